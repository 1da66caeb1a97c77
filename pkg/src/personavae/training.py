"""Optimization loop, checkpointing, and the strategy-comparison harness.

Runs are deterministic: data order, reparameterization noise, and podi
pairing each draw from their own generator spawned from the run seed, so
strategies that never touch a stream do not perturb the others. The
comparison harness trains every strategy from identical initial weights
on identical batch orders and reports the retained (best validation
perplexity) checkpoint.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericsError, Tensor
from .evaluation import active_units, kl_cost, perplexity
from .losses import ConfigError, ScheduleConfig, aggressive_step, total_loss
from .model import DialogueModel, ModelConfig, save_checkpoint
from .pipeline import PreparedExample, make_training_batch

# Published optimizer setting at full scale; desk runs use TrainConfig.learning_rate.
PAPER_LEARNING_RATE = 2.6e-5


class TrainingDiverged(RuntimeError):
    """Raised when a run hits non-finite numerics; carries the partial record."""

    def __init__(self, message: str, record: "RunRecord", model: DialogueModel):
        super().__init__(message)
        self.record = record
        self.model = model


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    grad_clip: float = 1.0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ConfigError("learning rate, batch size, and epochs must be positive")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")
        if isinstance(self.schedule, dict):
            self.schedule = ScheduleConfig(**self.schedule)


class Adam:
    """Adam with bias correction over an ordered parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self._v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale gradients so the global norm is at most max_norm; returns the pre-clip norm."""
    return ad.clip_gradients(params.values(), max_norm)


@dataclass
class StepRecord:
    step: int
    recon: float
    kl_zp: float
    fader: float
    bow: float
    podi: float
    beta: float
    total: float
    grad_norm: float
    inner_iterations: int = 0


@dataclass
class ValRecord:
    epoch: int
    step: int
    ppl: float
    kl_cost: float
    au: int


@dataclass
class RunRecord:
    config: dict
    steps: list[StepRecord] = field(default_factory=list)
    val: list[ValRecord] = field(default_factory=list)
    wall_clock_s: float = 0.0
    best_val_ppl: float = float("inf")
    best_epoch: int = -1
    diverged: bool = False
    note: str = ""

    def metrics_csv(self) -> str:
        lines = ["step,recon,kl_zp,fader,podi,beta"]
        for s in self.steps:
            lines.append(f"{s.step},{s.recon!r},{s.kl_zp!r},{s.fader!r},{s.podi!r},{s.beta!r}")
        return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    model: DialogueModel
    record: RunRecord
    best_params: dict[str, np.ndarray]

    def best_model(self) -> DialogueModel:
        m = DialogueModel(self.model.config, seed=0)
        m.load_parameter_values(self.best_params)
        return m


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        chunk = order[i : i + batch_size]
        if len(chunk) >= 2:  # pairing and batch statistics need at least 2 examples
            yield chunk


def train(
    model: DialogueModel,
    train_prepared: list[PreparedExample],
    dev_prepared: list[PreparedExample],
    config: TrainConfig,
    pad_id: int,
    run_dir: str | Path | None = None,
    step_offset: int = 0,
) -> TrainResult:
    """Train in place; retains the best-validation-perplexity parameters.

    Divergence (non-finite loss or gradients) aborts with the parameters
    rolled back to the last completed step and raises TrainingDiverged.
    """
    started = time.monotonic()
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    rng_data = np.random.default_rng(seeds[0])
    rng_noise = np.random.default_rng(seeds[1])
    rng_podi = np.random.default_rng(seeds[2])

    n = len(train_prepared)
    batches_per_epoch = sum(1 for _ in _epoch_batches(n, config.batch_size, np.random.default_rng(0)))
    schedule = config.schedule.resolved(config.epochs * max(batches_per_epoch, 1))

    optimizer = Adam(
        model.params, config.learning_rate, (config.adam_beta1, config.adam_beta2), config.adam_eps
    )
    enc_optimizer = None
    if schedule.strategy == "aggressive":
        enc_optimizer = Adam(
            model.recognition_parameters(),
            config.learning_rate,
            (config.adam_beta1, config.adam_beta2),
            config.adam_eps,
        )

    record = RunRecord(config={**asdict(config), "strategy": schedule.strategy})
    best_params = model.parameter_values()
    rollback = model.parameter_values()
    step = step_offset
    k = model.config.latent_size

    for epoch in range(1, config.epochs + 1):
        for idx in _epoch_batches(n, config.batch_size, rng_data):
            batch = make_training_batch([train_prepared[i] for i in idx], pad_id)
            noise = rng_noise.standard_normal((len(idx), k))
            step += 1
            for name, p in model.params.items():
                np.copyto(rollback[name], p.data)
            try:
                inner = 0
                if schedule.strategy == "aggressive":
                    breakdown, inner, norm = aggressive_step(
                        batch, model, enc_optimizer, optimizer, schedule, step, noise,
                        grad_clip=config.grad_clip,
                    )
                else:
                    breakdown, _ = total_loss(batch, model, schedule, step, noise, rng_podi)
                    breakdown.total.backward()
                    norm = clip_gradients(model.params, config.grad_clip)
                    optimizer.step()
                    model.zero_grad()
                vals = breakdown.values()
            except NumericsError as err:
                model.load_parameter_values(rollback)
                record.diverged = True
                record.note = f"non-finite numerics at step {step}: {err}"
                record.wall_clock_s = time.monotonic() - started
                if run_dir is not None:
                    _write_run_dir(run_dir, model, record, best_params)
                raise TrainingDiverged(record.note, record, model) from err
            record.steps.append(
                StepRecord(
                    step=step,
                    recon=vals["recon"],
                    kl_zp=vals["kl_zp"],
                    fader=vals["fader"],
                    bow=vals["bow"],
                    podi=vals["podi"],
                    beta=vals["beta"],
                    total=vals["total"],
                    grad_norm=norm,
                    inner_iterations=inner,
                )
            )
        val_ppl = perplexity(model, dev_prepared, pad_id)
        val_kl = kl_cost(model, dev_prepared, pad_id)
        val_au = active_units(model, dev_prepared, pad_id)
        record.val.append(ValRecord(epoch=epoch, step=step, ppl=val_ppl, kl_cost=val_kl, au=val_au))
        if val_ppl < record.best_val_ppl:
            record.best_val_ppl = val_ppl
            record.best_epoch = epoch
            best_params = model.parameter_values()

    record.wall_clock_s = time.monotonic() - started
    result = TrainResult(model=model, record=record, best_params=best_params)
    if run_dir is not None:
        _write_run_dir(run_dir, result.best_model(), record, best_params)
    return result


def _write_run_dir(run_dir, model: DialogueModel, record: RunRecord, best_params) -> None:
    import json

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(record.config, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    (run_dir / "metrics.csv").write_text(record.metrics_csv(), encoding="utf-8")
    save_checkpoint(model, run_dir / "checkpoint.bin", meta={"best_epoch": record.best_epoch})
    report = {
        "best_val_ppl": record.best_val_ppl,
        "best_epoch": record.best_epoch,
        "wall_clock_s": record.wall_clock_s,
        "diverged": record.diverged,
        "note": record.note,
        "val": [asdict(v) for v in record.val],
        "final_step": record.steps[-1].step if record.steps else 0,
        "step_breakdown_fields": ["bow", "total", "grad_norm", "inner_iterations"],
        "steps_extra": [
            {"step": s.step, "bow": s.bow, "total": s.total, "grad_norm": s.grad_norm, "inner_iterations": s.inner_iterations}
            for s in record.steps
        ],
    }
    (run_dir / "report.json").write_text(json.dumps(report, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class ProbeRow:
    strategy: str
    ppl: float
    kl_cost: float
    au: int
    wall_clock_s: float
    seed: int


@dataclass
class ProbeResult:
    rows: list[ProbeRow]
    kl_curves: dict[str, list[tuple[int, float]]]
    records: dict[str, RunRecord]
    best_params: dict[str, dict[str, np.ndarray]]
    model_config: ModelConfig

    def table(self) -> str:
        lines = [f"{'Method':<12} {'PPL':>10} {'KL cost':>10} {'AU':>4}"]
        for r in self.rows:
            lines.append(f"{r.strategy:<12} {r.ppl:>10.3f} {r.kl_cost:>10.3f} {r.au:>4d}")
        return "\n".join(lines)

    def csv(self) -> str:
        lines = ["strategy,ppl,kl_cost,au,wall_clock_s,seed"]
        for r in self.rows:
            lines.append(f"{r.strategy},{r.ppl!r},{r.kl_cost!r},{r.au},{r.wall_clock_s!r},{r.seed}")
        return "\n".join(lines) + "\n"

    def kl_curves_csv(self) -> str:
        strategies = list(self.kl_curves)
        steps = [s for s, _ in self.kl_curves[strategies[0]]]
        lines = ["step," + ",".join(strategies)]
        for i, s in enumerate(steps):
            vals = ",".join(repr(self.kl_curves[name][i][1]) for name in strategies)
            lines.append(f"{s},{vals}")
        return "\n".join(lines) + "\n"

    def best_model(self, strategy: str) -> DialogueModel:
        m = DialogueModel(self.model_config, seed=0)
        m.load_parameter_values(self.best_params[strategy])
        return m


def probe_compare(
    model_config: ModelConfig,
    train_prepared: list[PreparedExample],
    dev_prepared: list[PreparedExample],
    strategies: list[str],
    config: TrainConfig,
    pad_id: int,
    run_dir: str | Path | None = None,
) -> ProbeResult:
    """One training run per strategy under identical seeds, data order, and init."""
    if len(strategies) < 1:
        raise ConfigError("probe needs at least one strategy")
    init = DialogueModel(model_config, seed=config.seed)
    init_values = init.parameter_values()

    rows: list[ProbeRow] = []
    curves: dict[str, list[tuple[int, float]]] = {}
    records: dict[str, RunRecord] = {}
    best: dict[str, dict[str, np.ndarray]] = {}
    for strategy in strategies:
        m = DialogueModel(model_config, seed=config.seed)
        m.load_parameter_values(init_values)
        cfg = replace(config, schedule=replace(config.schedule, strategy=strategy))
        sub_dir = Path(run_dir) / strategy if run_dir is not None else None
        result = train(m, train_prepared, dev_prepared, cfg, pad_id, run_dir=sub_dir)
        best_model = result.best_model()
        rows.append(
            ProbeRow(
                strategy=strategy,
                ppl=perplexity(best_model, dev_prepared, pad_id),
                kl_cost=kl_cost(best_model, dev_prepared, pad_id),
                au=active_units(best_model, dev_prepared, pad_id),
                wall_clock_s=result.record.wall_clock_s,
                seed=config.seed,
            )
        )
        curves[strategy] = [(s.step, s.kl_zp) for s in result.record.steps]
        records[strategy] = result.record
        best[strategy] = result.best_params
    probe = ProbeResult(rows=rows, kl_curves=curves, records=records, best_params=best, model_config=model_config)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "probe.csv").write_text(probe.csv(), encoding="utf-8")
        (run_dir / "kl_curves.csv").write_text(probe.kl_curves_csv(), encoding="utf-8")
    return probe
