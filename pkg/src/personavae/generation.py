"""Inference-time response generation.

Latents are sampled from the context prior, the fader comes from its
prior network unless overridden, and decoding is autoregressive with
top-k plus nucleus filtering. One context can be sampled many times;
each sample keeps its (z, alpha) record.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import (
    ROLE_AGENT,
    DialogueExample,
    Vocab,
    decode_tokens,
    detokenize,
    encode_context_decoder_prefix,
    encode_context_for_fader,
    encode_context_for_prior,
)
from .metrics import EmbeddingTable, KeywordExtractor, p_distance
from .model import DialogueModel, ModelError, PackedBatch, pack

FADER_GRID_STEP = 0.1


@dataclass(frozen=True)
class DecodeConfig:
    top_k: int = 4
    top_p: float = 0.9
    max_new_tokens: int = 24
    temperature: float = 1.0
    n_samples: int = 3
    fader_override: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.fader_override is not None and not 0.0 <= self.fader_override <= 1.0:
            raise ValueError("fader_override must lie in [0, 1]")


def nucleus_filter(logits_row: np.ndarray, top_k: int, top_p: float) -> np.ndarray:
    """Filtered next-token distribution: top-k, then the smallest prefix with mass >= top_p.

    Returns a full-vocabulary probability row; excluded tokens get 0.
    """
    logits_row = np.asarray(logits_row, dtype=np.float64)
    if logits_row.ndim != 1:
        raise ValueError("nucleus_filter expects a single logits row")
    shifted = logits_row - logits_row.max()
    probs = np.exp(shifted)
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")
    keep = order[: min(top_k, len(probs))]
    kept = probs[keep]
    cum = np.cumsum(kept)
    # tolerance so that an exact hand-specified mass (e.g. 0.5 + 0.3 >= 0.8) counts as reached
    cut = int(np.searchsorted(cum, top_p - 1e-12)) + 1
    cut = min(cut, len(keep))  # whole top-k survives when its mass stays below top_p
    out = np.zeros_like(probs)
    out[keep[:cut]] = kept[:cut]
    out /= out.sum()
    return out


@dataclass
class GenerationSample:
    text: str
    tokens: list[int]
    alpha: float
    z: np.ndarray

    @property
    def z_norm(self) -> float:
        return float(np.linalg.norm(self.z))

    def to_dict(self) -> dict:
        return {"text": self.text, "alpha": self.alpha, "z_norm": self.z_norm}


def _next_token(model: DialogueModel, z, alpha, batch: PackedBatch, config: DecodeConfig, rng) -> int:
    logits = model.decode_logits(z, alpha, batch)
    row = logits.data[0, -1] / config.temperature
    probs = nucleus_filter(row, config.top_k, config.top_p)
    return int(rng.choice(len(probs), p=probs))


def _decode(
    model: DialogueModel,
    vocab: Vocab,
    prefix,
    z: np.ndarray,
    alpha: float,
    config: DecodeConfig,
    rng: np.random.Generator,
) -> list[int]:
    token_ids = list(prefix.token_ids)
    position_ids = list(prefix.position_ids)
    role_ids = list(prefix.role_ids)
    next_pos = int(max(position_ids)) + 1
    if next_pos + config.max_new_tokens > model.config.max_positions:
        raise ModelError("context too long for the configured maximum generation length")
    generated: list[int] = []
    z_t = Tensor(z.reshape(1, -1))
    alpha_arr = np.array([alpha], dtype=np.float64)
    with ad.no_grad():
        for _ in range(config.max_new_tokens):
            batch = PackedBatch(
                token_ids=np.array([token_ids], dtype=np.int64),
                position_ids=np.array([position_ids], dtype=np.int64),
                role_ids=np.array([role_ids], dtype=np.int64),
                loss_mask=np.zeros((1, len(token_ids))),
                pad_mask=np.ones((1, len(token_ids))),
                n_latent_slots=2,
                lengths=np.array([len(token_ids)]),
            )
            tok = _next_token(model, z_t, alpha_arr, batch, config, rng)
            if tok == vocab.eos_id:
                break
            generated.append(tok)
            token_ids.append(tok)
            position_ids.append(next_pos)
            role_ids.append(ROLE_AGENT)
            next_pos += 1
    return generated


def generate(
    model: DialogueModel,
    vocab: Vocab,
    context,
    config: DecodeConfig,
    window: int | None = None,
) -> list[GenerationSample]:
    """N responses for one context, each from a fresh prior latent sample."""
    window = window if window is not None else model.config.context_window
    prior_seq = encode_context_for_prior(context, vocab, window)
    fader_seq = encode_context_for_fader(context, vocab, window)
    prefix = encode_context_decoder_prefix(context, vocab, window)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed]))
    samples = []
    with ad.no_grad():
        prior = model.encode_prior_zp(pack([prior_seq], vocab.pad_id))
        mu = prior.mean.data[0]
        sd = np.exp(0.5 * prior.logvar.data[0])
        fader_batch = pack([fader_seq], vocab.pad_id)
        for _ in range(config.n_samples):
            z = mu + sd * rng.standard_normal(len(mu))
            if config.fader_override is not None:
                alpha = float(config.fader_override)
            else:
                alpha = float(model.prior_fader(fader_batch, Tensor(z.reshape(1, -1))).data[0])
            tokens = _decode(model, vocab, prefix, z, alpha, config, rng)
            text = detokenize(decode_tokens(tokens, vocab))
            samples.append(GenerationSample(text=text, tokens=tokens, alpha=alpha, z=z))
    return samples


@dataclass
class SweepPoint:
    alpha: float
    response: str
    length_tokens: int
    p_distance: float


@dataclass
class SweepRecord:
    points: list[SweepPoint] = field(default_factory=list)

    def csv_rows(self) -> list[str]:
        rows = ["alpha,response,length_tokens,p_distance"]
        for p in self.points:
            text = p.response.replace('"', '""')
            rows.append(f'{p.alpha:.1f},"{text}",{p.length_tokens},{p.p_distance!r}')
        return rows


def fader_sweep(
    model: DialogueModel,
    vocab: Vocab,
    example: DialogueExample,
    config: DecodeConfig,
    extractor: KeywordExtractor,
    table: EmbeddingTable,
    window: int | None = None,
    grid_step: float = FADER_GRID_STEP,
) -> SweepRecord:
    """Decode the same context at alpha = 0.0, 0.1, ... 1.0 with a shared prior-mean latent.

    Each grid point gets its own (seed, index)-derived rng, so a single
    row can be reproduced in isolation.
    """
    window = window if window is not None else model.config.context_window
    n_points = int(round(1.0 / grid_step)) + 1
    grid = [round(i * grid_step, 10) for i in range(n_points)]
    prior_seq = encode_context_for_prior(example.context, vocab, window)
    prefix = encode_context_decoder_prefix(example.context, vocab, window)
    record = SweepRecord()
    with ad.no_grad():
        prior = model.encode_prior_zp(pack([prior_seq], vocab.pad_id))
        z = prior.mean.data[0]  # shared across the grid
        for idx, alpha in enumerate(grid):
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, idx]))
            tokens = _decode(model, vocab, prefix, z, float(alpha), config, rng)
            response = detokenize(decode_tokens(tokens, vocab))
            pd = p_distance(example.profile, response, extractor, table)
            record.points.append(
                SweepPoint(alpha=float(alpha), response=response, length_tokens=len(tokens), p_distance=pd)
            )
    return record


def sweep_summary(records: list[SweepRecord]) -> dict:
    """Aggregate many per-context sweeps: mean P.Distance and length per alpha."""
    if not records:
        return {"alphas": [], "mean_p_distance": [], "mean_length": []}
    alphas = [p.alpha for p in records[0].points]
    pd = np.array([[p.p_distance for p in r.points] for r in records])
    ln = np.array([[p.length_tokens for p in r.points] for r in records])
    return {
        "alphas": alphas,
        "mean_p_distance": pd.mean(axis=0).tolist(),
        "mean_length": ln.mean(axis=0).tolist(),
    }
