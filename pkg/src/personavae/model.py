"""Dual-latent transformer dialogue model.

Three-layer bidirectional encoders feed diagonal-Gaussian latent heads:
the prior reads the context, the recognition network reads the profile,
and the fader prior re-reads the context with the sampled latent spliced
into its slot. The two prior-side encoders are one object, so their
parameters are shared by construction. The decoder is a causal
transformer whose first two positions carry the projected latent and the
fader embedding; at every injection site the slot hidden states are
re-mixed with the original latent vectors through a learnable gate.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import EMPTY_POSITION, EncodedSequence

MASK_NEG = -1e9


class ModelError(ValueError):
    """Contract violation on a model input."""


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_size: int = 64
    latent_size: int = 16
    heads: int = 4
    encoder_layers: int = 3
    decoder_layers: int = 4
    injection_interval: int = 4
    context_window: int = 4
    max_positions: int = 80
    ffn_mult: int = 4
    logvar_clamp: float = 8.0
    init_std: float = 0.02

    def __post_init__(self):
        if self.hidden_size % self.heads:
            raise ModelError("hidden_size must be divisible by heads")
        if self.latent_size < 2:
            raise ModelError("latent_size must be >= 2")
        if self.injection_interval > self.decoder_layers:
            raise ModelError("injection_interval must not exceed decoder_layers")
        if min(self.encoder_layers, self.decoder_layers, self.injection_interval) < 1:
            raise ModelError("layer counts must be positive")

    @classmethod
    def desk(cls, vocab_size: int, **overrides) -> "ModelConfig":
        # interval 2 keeps an injection site inside the 4-layer desk stack,
        # mirroring what interval 4 does for the 24-layer configuration
        overrides.setdefault("injection_interval", 2)
        return cls(vocab_size=vocab_size, **overrides)

    @classmethod
    def paper_scale(cls, vocab_size: int = 50257) -> "ModelConfig":
        """The published configuration (345M-class decoder); recorded, not trained here."""
        return cls(
            vocab_size=vocab_size,
            hidden_size=1024,
            latent_size=1024,
            heads=16,
            encoder_layers=3,
            decoder_layers=24,
            injection_interval=4,
            max_positions=1024,
        )


@dataclass
class GaussianParams:
    """Mean and log-variance of a diagonal Gaussian, one row per example."""

    mean: Tensor
    logvar: Tensor

    def sample(self, noise) -> Tensor:
        return ad.reparameterize(self.mean, self.logvar, noise)

    def detached(self) -> "GaussianParams":
        return GaussianParams(self.mean.detach(), self.logvar.detach())


@dataclass
class PackedBatch:
    """Right-padded id arrays for a batch of encoded sequences."""

    token_ids: np.ndarray  # [B, T] int64
    position_ids: np.ndarray
    role_ids: np.ndarray
    loss_mask: np.ndarray  # [B, T] float
    pad_mask: np.ndarray  # [B, T] float, 1 = real token
    n_latent_slots: int
    lengths: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.token_ids.shape[1]


def pack(sequences: list[EncodedSequence], pad_id: int) -> PackedBatch:
    if not sequences:
        raise ModelError("cannot pack an empty batch")
    slots = {s.n_latent_slots for s in sequences}
    if len(slots) != 1:
        raise ModelError("mixed latent-slot layouts in one batch")
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    t = int(lengths.max())
    b = len(sequences)
    token_ids = np.full((b, t), pad_id, dtype=np.int64)
    position_ids = np.zeros((b, t), dtype=np.int64)
    role_ids = np.zeros((b, t), dtype=np.int64)
    loss_mask = np.zeros((b, t), dtype=np.float64)
    pad_mask = np.zeros((b, t), dtype=np.float64)
    for i, s in enumerate(sequences):
        n = len(s)
        token_ids[i, :n] = s.token_ids
        position_ids[i, :n] = s.position_ids
        role_ids[i, :n] = s.role_ids
        loss_mask[i, :n] = s.loss_mask
        pad_mask[i, :n] = 1.0
    return PackedBatch(token_ids, position_ids, role_ids, loss_mask, pad_mask, slots.pop(), lengths)


class ParamRegistry:
    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self.params:
            raise ModelError(f"duplicate parameter name {name!r}")
        t = Tensor(values, requires_grad=True, name=name)
        self.params[name] = t
        return t


class Linear:
    def __init__(self, reg: ParamRegistry, name: str, d_in: int, d_out: int, rng, init_std: float):
        self.w = reg.add(f"{name}.w", rng.normal(0.0, init_std, (d_in, d_out)))
        self.b = reg.add(f"{name}.b", np.zeros(d_out))
        self.d_out = d_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            return ad.add(ad.matmul(x, self.w), self.b)
        # one flat GEMM instead of a batched-matmul loop
        lead = x.shape[:-1]
        flat = ad.reshape(x, (-1, x.shape[-1]))
        out = ad.add(ad.matmul(flat, self.w), self.b)
        return ad.reshape(out, (*lead, self.d_out))


class LayerNorm:
    def __init__(self, reg: ParamRegistry, name: str, dim: int):
        self.g = reg.add(f"{name}.g", np.ones(dim))
        self.b = reg.add(f"{name}.b", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.g, self.b)


class TransformerLayer:
    """Pre-norm block: attention with an additive mask, then a GELU MLP."""

    def __init__(self, reg, name, cfg: ModelConfig, rng):
        d = cfg.hidden_size
        self.heads = cfg.heads
        self.head_dim = d // cfg.heads
        self.ln1 = LayerNorm(reg, f"{name}.ln1", d)
        self.qkv = Linear(reg, f"{name}.qkv", d, 3 * d, rng, cfg.init_std)
        self.proj = Linear(reg, f"{name}.proj", d, d, rng, cfg.init_std)
        self.ln2 = LayerNorm(reg, f"{name}.ln2", d)
        self.fc1 = Linear(reg, f"{name}.fc1", d, cfg.ffn_mult * d, rng, cfg.init_std)
        self.fc2 = Linear(reg, f"{name}.fc2", cfg.ffn_mult * d, d, rng, cfg.init_std)

    def __call__(self, x: Tensor, add_mask: np.ndarray) -> Tensor:
        b, t, d = x.shape
        h = self.ln1(x)
        qkv = self.qkv(h)
        q = ad.narrow(qkv, 2, 0, d)
        k = ad.narrow(qkv, 2, d, d)
        v = ad.narrow(qkv, 2, 2 * d, d)

        def split_heads(m):
            return ad.transpose(ad.reshape(m, (b, t, self.heads, self.head_dim)), (0, 2, 1, 3))

        q, k, v = split_heads(q), split_heads(k), split_heads(v)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.head_dim))
        scores = ad.add(scores, Tensor(add_mask))
        att = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(att, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        x = ad.add(x, self.proj(ctx))
        x = ad.add(x, self.fc2(ad.relu(self.fc1(self.ln2(x)))))
        return x


class TransformerStack:
    def __init__(self, reg, name, cfg: ModelConfig, n_layers: int, rng):
        self.layers = [TransformerLayer(reg, f"{name}.layer{i}", cfg, rng) for i in range(n_layers)]
        self.ln_f = LayerNorm(reg, f"{name}.ln_f", cfg.hidden_size)


def _pad_attention_mask(pad_mask: np.ndarray) -> np.ndarray:
    # keys at padded positions are unreachable
    return ((1.0 - pad_mask) * MASK_NEG)[:, None, None, :]


def _causal_attention_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), MASK_NEG), k=1)[None, None, :, :]


class DialogueModel:
    """All networks of the generator, sharing one parameter registry."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([config.vocab_size, seed]))
        reg = ParamRegistry()
        self._reg = reg
        d, k = config.hidden_size, config.latent_size

        word = rng.normal(0.0, config.init_std, (config.vocab_size, d))
        self.word_emb = reg.add("embed.word", word)
        pos = rng.normal(0.0, config.init_std, (config.max_positions + 1, d))
        pos[EMPTY_POSITION] = 0.0  # pinned empty row
        self.pos_emb = reg.add("embed.position", pos)
        self.role_emb = reg.add("embed.role", rng.normal(0.0, config.init_std, (2, d)))

        # one object serves both prior roles: z-prior and fader prior share parameters
        self.prior_encoder = TransformerStack(reg, "prior", config, config.encoder_layers, rng)
        self.recognition_encoder = TransformerStack(reg, "recognition", config, config.encoder_layers, rng)
        self.decoder = TransformerStack(reg, "decoder", config, config.decoder_layers, rng)

        self.prior_head = Linear(reg, "head.prior", d, 2 * k, rng, config.init_std)
        self.recognition_head = Linear(reg, "head.recognition", d, 2 * k, rng, config.init_std)
        self.z_proj = Linear(reg, "head.z_proj", k, d, rng, config.init_std)
        self.fader_head = Linear(reg, "head.fader", d, 1, rng, config.init_std)
        self.fader_dir = reg.add("head.fader_dir", rng.normal(0.0, config.init_std, (d,)))
        self.bow_head = Linear(reg, "head.bow", k, config.vocab_size, rng, config.init_std)

        self.injection_sites = tuple(
            i for i in range(config.injection_interval, config.decoder_layers + 1, config.injection_interval)
        )
        self.injection_weights = [
            reg.add(f"decoder.inject{site}.w", np.asarray(0.5)) for site in self.injection_sites
        ]

    # -- parameter plumbing -------------------------------------------------

    @property
    def params(self) -> dict[str, Tensor]:
        return self._reg.params

    def parameter_values(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_parameter_values(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(values)
        extra = set(values) - set(self.params)
        if missing or extra:
            raise CheckpointError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, t in self.params.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
            t.data = arr.copy()

    def recognition_parameters(self) -> dict[str, Tensor]:
        return {
            n: t
            for n, t in self.params.items()
            if n.startswith("recognition.") or n.startswith("head.recognition")
        }

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def prior_parameter_checksums(self) -> tuple[str, str]:
        """Checksums of the z-prior and fader-prior encoder parameters.

        Both roles run through self.prior_encoder, so the checksums are
        computed from the tensors each code path actually uses.
        """

        def checksum(stack: TransformerStack) -> str:
            h = hashlib.sha256()
            for layer in stack.layers:
                for lin in (layer.qkv, layer.proj, layer.fc1, layer.fc2):
                    h.update(lin.w.data.tobytes())
                    h.update(lin.b.data.tobytes())
                for ln in (layer.ln1, layer.ln2):
                    h.update(ln.g.data.tobytes())
                    h.update(ln.b.data.tobytes())
            h.update(stack.ln_f.g.data.tobytes())
            h.update(stack.ln_f.b.data.tobytes())
            return h.hexdigest()

        return checksum(self._z_prior_stack()), checksum(self._fader_prior_stack())

    def _z_prior_stack(self) -> TransformerStack:
        return self.prior_encoder

    def _fader_prior_stack(self) -> TransformerStack:
        return self.prior_encoder

    # -- forward passes -------------------------------------------------------

    def _check_positions(self, batch: PackedBatch) -> None:
        if batch.position_ids.max() > self.config.max_positions:
            raise ModelError(
                f"sequence length {batch.position_ids.max()} exceeds configured maximum "
                f"{self.config.max_positions}"
            )

    def _embed(self, batch: PackedBatch, slot_vectors: list[Tensor] | None = None) -> Tensor:
        self._check_positions(batch)
        tok = ad.gather_rows(self.word_emb, batch.token_ids)
        # empty-position rule: slot rows contribute nothing and receive no gradient
        keep = (batch.position_ids != EMPTY_POSITION).astype(np.float64)[:, :, None]
        pos = ad.mul(ad.gather_rows(self.pos_emb, batch.position_ids), Tensor(keep))
        role = ad.gather_rows(self.role_emb, batch.role_ids)
        x = ad.add(ad.add(tok, pos), role)
        if slot_vectors:
            n = len(slot_vectors)
            tail = ad.narrow(x, 1, n, batch.seq_len - n)
            x = ad.concat([*slot_vectors, tail], axis=1)
        return x

    def _run_stack(self, stack: TransformerStack, x: Tensor, add_mask: np.ndarray) -> Tensor:
        for layer in stack.layers:
            x = layer(x, add_mask)
        return stack.ln_f(x)

    def _latent_params(self, hidden0: Tensor, head: Linear) -> GaussianParams:
        k = self.config.latent_size
        out = head(hidden0)
        mean = ad.narrow(out, 1, 0, k)
        logvar = ad.clip(ad.narrow(out, 1, k, k), -self.config.logvar_clamp, self.config.logvar_clamp)
        return GaussianParams(mean, logvar)

    def _require_slot(self, batch: PackedBatch, zp_id: int) -> None:
        if not (batch.token_ids[:, 0] == zp_id).all():
            raise ModelError("sequence must start with the [Z_p] slot token")

    def encode_prior_zp(self, batch: PackedBatch, zp_id: int | None = None) -> GaussianParams:
        """p(z | context): Gaussian parameters from the [Z_p] hidden state."""
        if zp_id is not None:
            self._require_slot(batch, zp_id)
        x = self._embed(batch)
        h = self._run_stack(self._z_prior_stack(), x, _pad_attention_mask(batch.pad_mask))
        h0 = ad.reshape(ad.narrow(h, 1, 0, 1), (batch.batch_size, self.config.hidden_size))
        return self._latent_params(h0, self.prior_head)

    def encode_posterior_zp(self, batch: PackedBatch, zp_id: int | None = None) -> GaussianParams:
        """q(z | profile): recognition-network Gaussian parameters."""
        if zp_id is not None:
            self._require_slot(batch, zp_id)
        x = self._embed(batch)
        h = self._run_stack(self.recognition_encoder, x, _pad_attention_mask(batch.pad_mask))
        h0 = ad.reshape(ad.narrow(h, 1, 0, 1), (batch.batch_size, self.config.hidden_size))
        return self._latent_params(h0, self.recognition_head)

    def prior_fader(self, batch: PackedBatch, z: Tensor) -> Tensor:
        """Fader estimate in (0, 1) from context plus the sampled latent."""
        if batch.n_latent_slots != 2:
            raise ModelError("fader input needs [Z_p] and [Z_a] slots")
        b = batch.batch_size
        slot0 = ad.reshape(self.z_proj(z), (b, 1, self.config.hidden_size))
        x = self._embed(batch, slot_vectors=[slot0])
        h = self._run_stack(self._fader_prior_stack(), x, _pad_attention_mask(batch.pad_mask))
        h1 = ad.reshape(ad.narrow(h, 1, 1, 1), (b, self.config.hidden_size))
        return ad.reshape(ad.sigmoid(self.fader_head(h1)), (b,))

    def decode_logits(
        self,
        z: Tensor,
        alpha,
        batch: PackedBatch,
        inject: bool = True,
        collect_slot_states: dict | None = None,
    ) -> Tensor:
        """Causal logits [B, T, V] with latent injection at the configured sites."""
        if batch.n_latent_slots != 2:
            raise ModelError("decoder input needs [Z_p] and [Z_a] slots")
        b, t = batch.batch_size, batch.seq_len
        d = self.config.hidden_size
        alpha = alpha if isinstance(alpha, Tensor) else Tensor(np.asarray(alpha, dtype=np.float64))
        slot0 = ad.reshape(self.z_proj(z), (b, 1, d))
        slot1 = ad.mul(ad.reshape(alpha, (b, 1, 1)), ad.reshape(self.fader_dir, (1, 1, d)))
        z_orig = ad.concat([slot0, slot1], axis=1)
        x = self._embed(batch, slot_vectors=[slot0, slot1])
        mask = _causal_attention_mask(t)
        site_to_gate = dict(zip(self.injection_sites, self.injection_weights))
        for i, layer in enumerate(self.decoder.layers, start=1):
            x = layer(x, mask)
            if inject and i in site_to_gate:
                w = site_to_gate[i]
                slots = ad.narrow(x, 1, 0, 2)
                mixed = ad.add(ad.mul(w, slots), ad.mul(ad.sub(1.0, w), z_orig))
                x = ad.concat([mixed, ad.narrow(x, 1, 2, t - 2)], axis=1)
                if collect_slot_states is not None:
                    collect_slot_states[i] = mixed.data.copy()
        h = self.decoder.ln_f(x)
        flat = ad.reshape(h, (b * t, d))
        logits = ad.matmul(flat, ad.transpose(self.word_emb))  # weight-tied output head
        return ad.reshape(logits, (b, t, self.config.vocab_size))


@dataclass(frozen=True)
class FaderValue:
    """Scalar persona gate in [0, 1]; its decoder embedding is alpha * fader_dir."""

    alpha: float

    def embedding(self, model: DialogueModel) -> np.ndarray:
        return self.alpha * model.fader_dir.data


def recognition_fader(profile_texts, response: str, extractor, table) -> FaderValue:
    """Parameter-free fader recognition: persona proximity of the response, clamped to [0, 1].

    Degenerate inputs (a response without keywords) give alpha 0.
    """
    from .metrics import p_distance

    value = p_distance(profile_texts, response, extractor, table)
    return FaderValue(float(np.clip(value, 0.0, 1.0)))


# -- checkpoint I/O ----------------------------------------------------------

_MAGIC = b"PVAE0001"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: DialogueModel, path, meta: dict | None = None) -> None:
    """Write a byte-stable checkpoint: magic, JSON header, float64 payload."""
    names = list(model.params)
    payload = b"".join(model.params[n].data.astype("<f8").tobytes() for n in names)
    tensors = []
    offset = 0
    for n in names:
        arr = model.params[n].data
        tensors.append({"name": n, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size * 8
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "meta": meta or {},
        "tensors": tensors,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        f.write(payload)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> tuple[DialogueModel, dict]:
    """Rebuild the model stored at `path`; returns (model, meta)."""
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    hlen = int.from_bytes(raw[len(_MAGIC) : len(_MAGIC) + 8], "little")
    start = len(_MAGIC) + 8
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: corrupt header: {err}") from err
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    payload = raw[start + hlen :]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch (corrupt file)")
    config = ModelConfig(**header["config"])
    if expected_config is not None and config != expected_config:
        diffs = [
            f"{k}: {v} != {getattr(expected_config, k)}"
            for k, v in asdict(config).items()
            if getattr(expected_config, k) != v
        ]
        raise CheckpointError(f"{path}: config mismatch ({'; '.join(diffs)})")
    model = DialogueModel(config, seed=0)
    values = {}
    for t in header["tensors"]:
        a = np.frombuffer(payload, dtype="<f8", count=t["count"], offset=t["offset"])
        values[t["name"]] = a.reshape(t["shape"])
    model.load_parameter_values(values)
    return model, header["meta"]
