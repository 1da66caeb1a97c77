"""Corpus-level model evaluation and the combined report.

Perplexity conditions on the prior mean latent and the prior fader (no
sampling noise), so repeated evaluations of one checkpoint agree
exactly. Generation-based metrics follow the N-sample protocol: each of
the N sample sets is scored on its own and the N scores are averaged.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .corpus import DataError, Vocab
from .generation import DecodeConfig, generate
from .losses import kl_diag_gaussians
from .metrics import EmbeddingTable, KeywordExtractor, distinct_n, p_distance
from .model import DialogueModel, pack
from .pipeline import PreparedExample

AU_THRESHOLD = 0.01
EVAL_BATCH = 32


@dataclass
class EvalReport:
    ppl: float
    distinct1: float
    distinct2: float
    p_distance: float
    kl_cost: float
    au: int
    sample_count: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _batches(prepared: list[PreparedExample], size: int):
    for i in range(0, len(prepared), size):
        yield prepared[i : i + size]


def perplexity(model: DialogueModel, prepared: list[PreparedExample], pad_id: int) -> float:
    """exp(total response NLL / total response tokens), teacher-forced."""
    if not prepared:
        raise DataError("perplexity needs a non-empty corpus")
    total_nll = 0.0
    total_tokens = 0.0
    with ad.no_grad():
        for chunk in _batches(prepared, EVAL_BATCH):
            prior = pack([p.prior for p in chunk], pad_id)
            fader = pack([p.fader for p in chunk], pad_id)
            dec = pack([p.decoder for p in chunk], pad_id)
            params = model.encode_prior_zp(prior)
            z = params.mean  # no sampling noise
            alpha = model.prior_fader(fader, z)
            logits = model.decode_logits(z, alpha, dec)
            b, t, v = logits.shape
            flat = ad.reshape(ad.narrow(logits, 1, 0, t - 1), (b * (t - 1), v))
            mask = dec.loss_mask[:, 1:].reshape(-1)
            ce = ad.cross_entropy_logits(flat, dec.token_ids[:, 1:].reshape(-1), mask)
            total_nll += ce.item() * mask.sum()
            total_tokens += mask.sum()
    return float(np.exp(total_nll / total_tokens))


def _posterior_and_prior(model, chunk, pad_id):
    q = model.encode_posterior_zp(pack([c.posterior for c in chunk], pad_id))
    p = model.encode_prior_zp(pack([c.prior for c in chunk], pad_id))
    return q, p


def kl_cost(model: DialogueModel, prepared: list[PreparedExample], pad_id: int) -> float:
    """Mean over the corpus of KL(q(z|profile) || p(z|context))."""
    vals = []
    with ad.no_grad():
        for chunk in _batches(prepared, EVAL_BATCH):
            q, p = _posterior_and_prior(model, chunk, pad_id)
            vals.append(kl_diag_gaussians(q, p).data)
    return float(np.concatenate(vals).mean())


def posterior_means(model: DialogueModel, prepared: list[PreparedExample], pad_id: int) -> np.ndarray:
    rows = []
    with ad.no_grad():
        for chunk in _batches(prepared, EVAL_BATCH):
            q = model.encode_posterior_zp(pack([p.posterior for p in chunk], pad_id))
            rows.append(q.mean.data)
    return np.concatenate(rows, axis=0)


def active_units_from_means(means: np.ndarray, threshold: float = AU_THRESHOLD) -> int:
    if means.shape[0] < 2:
        raise DataError("active units need at least 2 examples")
    return int((means.var(axis=0) > threshold).sum())


def active_units(
    model: DialogueModel, prepared: list[PreparedExample], pad_id: int, threshold: float = AU_THRESHOLD
) -> int:
    """Latent dimensions whose posterior mean varies across the corpus above `threshold`."""
    return active_units_from_means(posterior_means(model, prepared, pad_id), threshold)


def pca_2d(means: np.ndarray) -> np.ndarray:
    """Top-2 principal-component coordinates of mean-centered vectors."""
    centered = means - means.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:2].T


def export_latents(model: DialogueModel, prepared: list[PreparedExample], pad_id: int, path) -> np.ndarray:
    """Per-example posterior mean plus its 2-component projection, written as CSV."""
    means = posterior_means(model, prepared, pad_id)
    coords = pca_2d(means)
    k = means.shape[1]
    header = "id,category," + ",".join(f"mu_{i + 1}" for i in range(k)) + ",pc1,pc2"
    lines = [header]
    for i, p in enumerate(prepared):
        mu = ",".join(repr(float(x)) for x in means[i])
        lines.append(f"{i},{p.category or ''},{mu},{coords[i, 0]!r},{coords[i, 1]!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return coords


def nearest_centroid_accuracy(vectors: np.ndarray, labels: list[str]) -> float:
    """Fraction of vectors closest to their own category centroid."""
    labels = np.asarray(labels)
    cats = sorted(set(labels.tolist()))
    if len(cats) < 2:
        raise DataError("nearest-centroid probe needs at least 2 categories")
    centroids = np.stack([vectors[labels == c].mean(axis=0) for c in cats])
    d = ((vectors[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    pred = np.asarray(cats)[d.argmin(axis=1)]
    return float((pred == labels).mean())


def evaluate_model(
    model: DialogueModel,
    vocab: Vocab,
    prepared: list[PreparedExample],
    extractor: KeywordExtractor,
    table: EmbeddingTable,
    decode_config: DecodeConfig | None = None,
    max_contexts: int | None = None,
) -> EvalReport:
    """Full report: teacher-forced metrics plus N-sample generation metrics."""
    cfg = decode_config or DecodeConfig()
    ppl = perplexity(model, prepared, vocab.pad_id)
    klc = kl_cost(model, prepared, vocab.pad_id)
    au = active_units(model, prepared, vocab.pad_id)

    subset = prepared if max_contexts is None else prepared[:max_contexts]
    runs: list[list[tuple[PreparedExample, str]]] = [[] for _ in range(cfg.n_samples)]
    for i, p in enumerate(subset):
        seed_i = int(np.random.SeedSequence([cfg.seed, i]).generate_state(1)[0])
        samples = generate(model, vocab, p.example.context, _with_seed(cfg, seed_i))
        for n, s in enumerate(samples):
            runs[n].append((p, s.text))

    d1s, d2s, pds = [], [], []
    for run in runs:
        responses = [text for _, text in run]
        d1s.append(distinct_n(responses, 1))
        d2s.append(distinct_n(responses, 2))
        pds.append(float(np.mean([p_distance(p.example.profile, text, extractor, table) for p, text in run])))
    return EvalReport(
        ppl=ppl,
        distinct1=float(np.mean(d1s)),
        distinct2=float(np.mean(d2s)),
        p_distance=float(np.mean(pds)),
        kl_cost=klc,
        au=au,
        sample_count=len(subset) * cfg.n_samples,
    )


def _with_seed(cfg: DecodeConfig, seed: int) -> DecodeConfig:
    from dataclasses import replace

    return replace(cfg, seed=seed)
