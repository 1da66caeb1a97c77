"""Training objectives: ELBO terms, Po-di regularization, and strategy composition.

The evidence lower bound decomposes into the response reconstruction
loss, the KL between the recognition and prior latents, and a squared
fader-match term (the fader's recognition side is a parameter-free
similarity, so its KL degenerates into a regression target). Collapse
mitigation strategies either reweight the KL (kla, cyclic), add a term
(bow, podi), or change the update pattern (aggressive).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import RESERVED_TOKENS
from .model import DialogueModel, GaussianParams, PackedBatch

N_RESERVED = len(RESERVED_TOKENS)

STRATEGIES = ("none", "kla", "cyclic", "bow", "aggressive", "podi")

AGGRESSIVE_IMPROVEMENT_THRESHOLD = 1e-3


class ConfigError(ValueError):
    """Bad strategy or schedule configuration."""


@dataclass
class PodiConfig:
    """Posterior-discrimination settings; pairing is within-batch without replacement."""

    distinction_lambda: float = 0.15

    def __post_init__(self):
        if self.distinction_lambda <= 0:
            raise ConfigError("distinction lambda must be positive")


@dataclass
class ScheduleConfig:
    strategy: str = "none"
    kla_ramp_steps: int = 5000
    cyclic_cycles: int = 4
    cyclic_ramp_proportion: float = 0.5
    cyclic_period: int | None = None  # resolved from planned steps when unset
    aggressive_inner_cap: int = 30
    podi: PodiConfig = field(default_factory=PodiConfig)
    podi_with_annealing: bool = False  # let the kla ramp run under podi

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.kla_ramp_steps <= 0:
            raise ConfigError("kla_ramp_steps must be positive")
        if not 0.0 < self.cyclic_ramp_proportion <= 1.0:
            raise ConfigError("cyclic_ramp_proportion must lie in (0, 1]")
        if self.cyclic_cycles < 1:
            raise ConfigError("cyclic_cycles must be >= 1")
        if self.aggressive_inner_cap < 1:
            raise ConfigError("aggressive_inner_cap must be >= 1")
        if isinstance(self.podi, dict):
            self.podi = PodiConfig(**self.podi)

    def resolved(self, total_steps: int) -> "ScheduleConfig":
        """Fill the cyclic period from the planned step count."""
        if self.strategy != "cyclic" or self.cyclic_period is not None:
            return self
        period = max(1, total_steps // self.cyclic_cycles)
        return ScheduleConfig(
            strategy=self.strategy,
            kla_ramp_steps=self.kla_ramp_steps,
            cyclic_cycles=self.cyclic_cycles,
            cyclic_ramp_proportion=self.cyclic_ramp_proportion,
            cyclic_period=period,
            aggressive_inner_cap=self.aggressive_inner_cap,
            podi=self.podi,
            podi_with_annealing=self.podi_with_annealing,
        )


def anneal_weight(step: int, config: ScheduleConfig) -> float:
    """KL weight in [0, 1] for a step index; piecewise linear, schedule-only state."""
    if step < 0:
        raise ConfigError("step must be >= 0")
    if config.strategy == "kla" or (config.strategy == "podi" and config.podi_with_annealing):
        return min(step / config.kla_ramp_steps, 1.0)
    if config.strategy == "cyclic":
        if config.cyclic_period is None:
            raise ConfigError("cyclic schedule needs a resolved period")
        t = config.cyclic_period
        return min((step % t) / (config.cyclic_ramp_proportion * t), 1.0)
    return 1.0


def kl_diag_gaussians(q: GaussianParams, p: GaussianParams) -> Tensor:
    """KL(q || p) summed over latent dimensions; shape [] or [B] for batched params."""
    if q.mean.shape != p.mean.shape:
        raise ad.ShapeError(f"latent sizes disagree: {q.mean.shape} vs {p.mean.shape}")
    var_ratio = ad.exp(ad.sub(q.logvar, p.logvar))
    diff_sq = ad.pow_(ad.sub(q.mean, p.mean), 2.0)
    scaled = ad.mul(diff_sq, ad.exp(ad.neg(p.logvar)))
    term = ad.add(ad.sub(ad.add(var_ratio, scaled), 1.0), ad.sub(p.logvar, q.logvar))
    return ad.mul(ad.sum_(term, axis=-1), 0.5)


def podi_partners(n: int, rng: np.random.Generator) -> np.ndarray:
    """Partner permutation without fixed points (each example used once)."""
    if n < 2:
        raise ConfigError("podi pairing needs at least 2 posteriors")
    for _ in range(100):
        perm = rng.permutation(n)
        if not (perm == np.arange(n)).any():
            return perm
    return np.roll(np.arange(n), 1)  # cyclic shift is always a derangement


def podi_loss(posteriors: GaussianParams, lam: float, partners: np.ndarray) -> Tensor:
    """Sum over the batch of squared hinges on pairwise posterior KL below lambda."""
    if posteriors.mean.ndim != 2 or posteriors.mean.shape[0] < 2:
        raise ConfigError("podi needs a batch of at least 2 posteriors")
    if lam <= 0:
        raise ConfigError("distinction lambda must be positive")
    partner = GaussianParams(
        ad.gather_rows(posteriors.mean, partners),
        ad.gather_rows(posteriors.logvar, partners),
    )
    pair_kl = kl_diag_gaussians(posteriors, partner)
    hinge = ad.neg(ad.relu(ad.neg(ad.sub(pair_kl, lam))))  # min(kl - lambda, 0)
    return ad.sum_(ad.mul(hinge, hinge))


def bow_loss(z: Tensor, response_token_ids: np.ndarray, bow_head) -> Tensor:
    """Order-free bag-of-words NLL of the response tokens under a K->V head."""
    if z.ndim != 1:
        raise ad.ShapeError("bow_loss takes a single latent vector")
    ids = np.asarray(response_token_ids)
    logits = bow_head(ad.reshape(z, (1, z.shape[0])))
    rows = ad.gather_rows(logits, np.zeros(len(ids), dtype=np.int64))
    ce = ad.cross_entropy_logits(rows, ids, np.ones(len(ids)))
    return ad.mul(ce, float(len(ids)))  # mean -> sum


@dataclass
class TrainingBatch:
    """Packed encoder/decoder inputs plus per-example recognition fader values."""

    prior: PackedBatch
    posterior: PackedBatch
    fader: PackedBatch
    decoder: PackedBatch
    alphas: np.ndarray  # recognition fader per example, [B]

    @property
    def batch_size(self) -> int:
        return self.decoder.batch_size


@dataclass
class LossBreakdown:
    total: Tensor
    recon: Tensor
    kl_zp: Tensor
    fader: Tensor
    beta: float
    bow: Tensor | None = None
    podi: Tensor | None = None

    def values(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "recon": self.recon.item(),
            "kl_zp": self.kl_zp.item(),
            "fader": self.fader.item(),
            "beta": self.beta,
            "bow": self.bow.item() if self.bow is not None else 0.0,
            "podi": self.podi.item() if self.podi is not None else 0.0,
        }


@dataclass
class ElboInternals:
    posterior: GaussianParams
    prior: GaussianParams
    z: Tensor
    alpha_hat: Tensor


def _reconstruction(model: DialogueModel, z: Tensor, alphas, batch: PackedBatch) -> Tensor:
    """Per-example response NLL (sum over tokens), averaged over the batch.

    The bound's reconstruction term is the log-likelihood of the whole
    response sequence, so tokens are summed within an example; scoring a
    token-mean instead would re-weight the KL by the sequence length.
    """
    logits = model.decode_logits(z, alphas, batch)
    b, t, v = logits.shape
    shifted = ad.reshape(ad.narrow(logits, 1, 0, t - 1), (b * (t - 1), v))
    targets = batch.token_ids[:, 1:].reshape(-1)
    mask = batch.loss_mask[:, 1:].reshape(-1)
    token_mean = ad.cross_entropy_logits(shifted, targets, mask)
    return ad.mul(token_mean, float(mask.sum()) / float(b))


def elbo(
    batch: TrainingBatch,
    model: DialogueModel,
    noise: np.ndarray,
    beta: float = 1.0,
) -> tuple[LossBreakdown, ElboInternals]:
    """Negative ELBO pieces for one batch; z is sampled from the recognition side."""
    q = model.encode_posterior_zp(batch.posterior)
    p = model.encode_prior_zp(batch.prior)
    z = q.sample(noise)
    alpha_hat = model.prior_fader(batch.fader, z)
    recon = _reconstruction(model, z, batch.alphas, batch.decoder)
    kl = ad.mean_(kl_diag_gaussians(q, p))
    fader = ad.mean_(ad.pow_(ad.sub(alpha_hat, Tensor(batch.alphas)), 2.0))
    total = ad.add(ad.add(recon, ad.mul(kl, beta)), fader)
    return (
        LossBreakdown(total=total, recon=recon, kl_zp=kl, fader=fader, beta=beta),
        ElboInternals(posterior=q, prior=p, z=z, alpha_hat=alpha_hat),
    )


def _batched_bow(model: DialogueModel, z: Tensor, batch: PackedBatch) -> Tensor:
    """Mean over examples of the per-example bag-of-words NLL sum."""
    b = batch.batch_size
    rows, cols = np.nonzero(batch.loss_mask)
    token_ids = batch.token_ids[rows, cols]
    content = token_ids >= N_RESERVED  # order-free target: real words, not [EOS]
    rows, token_ids = rows[content], token_ids[content]
    logits = model.bow_head(z)
    expanded = ad.gather_rows(logits, rows)
    ce = ad.cross_entropy_logits(expanded, token_ids, np.ones(len(token_ids)))
    return ad.mul(ce, float(len(token_ids)) / float(b))


def total_loss(
    batch: TrainingBatch,
    model: DialogueModel,
    schedule: ScheduleConfig,
    step: int,
    noise: np.ndarray,
    podi_rng: np.random.Generator | None = None,
) -> tuple[LossBreakdown, ElboInternals]:
    """Strategy-composed loss; breakdown terms sum to the scalar."""
    beta = anneal_weight(step, schedule)
    breakdown, internals = elbo(batch, model, noise, beta=beta)
    if schedule.strategy == "bow":
        bow = _batched_bow(model, internals.z, batch.decoder)
        breakdown.bow = bow
        breakdown.total = ad.add(breakdown.total, bow)
    elif schedule.strategy == "podi":
        if podi_rng is None:
            raise ConfigError("podi strategy needs a pairing rng")
        partners = podi_partners(batch.batch_size, podi_rng)
        podi = podi_loss(internals.posterior, schedule.podi.distinction_lambda, partners)
        breakdown.podi = podi
        breakdown.total = ad.add(breakdown.total, podi)
    return breakdown, internals


def aggressive_step(
    batch: TrainingBatch,
    model: DialogueModel,
    encoder_optimizer,
    joint_optimizer,
    schedule: ScheduleConfig,
    step: int,
    noise: np.ndarray,
    grad_clip: float | None = None,
) -> tuple[LossBreakdown, int, float]:
    """Encoder-only inner updates until the ELBO stops improving, then one joint update.

    The reparameterization noise stays fixed across the inner loop so the
    improvement test compares like with like. Returns the joint-step
    breakdown, inner iterations used, and the joint-step gradient norm.
    """
    cap = schedule.aggressive_inner_cap
    enc_params = model.recognition_parameters().values()
    inner = 0
    last = None
    while inner < cap:
        breakdown, _ = elbo(batch, model, noise, beta=1.0)
        if last is not None and last - breakdown.total.item() < AGGRESSIVE_IMPROVEMENT_THRESHOLD:
            model.zero_grad()
            break
        breakdown.total.backward()
        if grad_clip is not None:
            ad.clip_gradients(enc_params, grad_clip)
        encoder_optimizer.step()
        model.zero_grad()
        last = breakdown.total.item()
        inner += 1
    breakdown, _ = elbo(batch, model, noise, beta=1.0)
    breakdown.total.backward()
    norm = ad.clip_gradients(model.params.values(), grad_clip) if grad_clip is not None else 0.0
    joint_optimizer.step()
    model.zero_grad()
    return breakdown, inner, norm
