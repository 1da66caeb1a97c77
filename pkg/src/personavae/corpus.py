"""Dialogue data model, word-level tokenizer, vocabulary, and input assembly.

A training example is a (profile, context, response) triple. Encoders
turn it into the four aligned id sequences the networks consume: token
ids, position ids, role ids, and a loss mask. Latent placeholder tokens
occupy the first slots of every sequence and carry the reserved "empty"
position id 0, whose embedding row stays pinned to zero.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD, UNK, BOS, EOS, SEP, ZP, ZA = "[PAD]", "[UNK]", "[BOS]", "[EOS]", "[SEP]", "[Z_p]", "[Z_a]"
RESERVED_TOKENS = (PAD, UNK, BOS, EOS, SEP, ZP, ZA)

# Position id for latent-slot tokens; the position table's row 0 is pinned to zero.
EMPTY_POSITION = 0

ROLE_AGENT = 0  # agent (and profile / special tokens)
ROLE_USER = 1  # the other party

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:'[a-z]+)?|[^\sa-z0-9]")


class DataError(ValueError):
    """Malformed corpus input."""


def tokenize(text: str) -> list[str]:
    """Lowercase word-level tokens; punctuation split off as single tokens."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


@dataclass(frozen=True)
class Utterance:
    speaker: str  # "user" | "agent"
    text: str


@dataclass(frozen=True)
class DialogueExample:
    """One (profile, context, response) triple; the agent answers the user."""

    profile: tuple[str, ...]
    context: tuple[Utterance, ...]
    response: str
    category: str | None = None

    def __post_init__(self):
        if not self.profile or any(not d.strip() for d in self.profile):
            raise DataError("profile must be a non-empty list of non-empty descriptions")
        if not self.context:
            raise DataError("context must contain at least one utterance")
        for utt in self.context:
            if utt.speaker not in ("user", "agent"):
                raise DataError(f"unknown speaker {utt.speaker!r}")
            if not utt.text.strip():
                raise DataError("context utterance text is empty")
        if self.context[-1].speaker != "user":
            raise DataError("last context utterance must be spoken by the user")
        if not self.response.strip():
            raise DataError("response is empty")


class Vocab:
    """Token <-> id table with reserved special tokens at fixed low ids."""

    def __init__(self, tokens: list[str]):
        if list(tokens[: len(RESERVED_TOKENS)]) != list(RESERVED_TOKENS):
            raise DataError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary contains duplicate tokens")
        self._tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self._tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, self._ids[UNK])

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def encode_words(self, words: list[str]) -> list[int]:
        return [self.id_of(w) for w in words]

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def unk_id(self) -> int:
        return self._ids[UNK]

    @property
    def bos_id(self) -> int:
        return self._ids[BOS]

    @property
    def eos_id(self) -> int:
        return self._ids[EOS]

    @property
    def sep_id(self) -> int:
        return self._ids[SEP]

    @property
    def zp_id(self) -> int:
        return self._ids[ZP]

    @property
    def za_id(self) -> int:
        return self._ids[ZA]

    def special_ids(self) -> set[int]:
        return {self._ids[t] for t in RESERVED_TOKENS}

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self._tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


def build_vocab(examples: list[DialogueExample]) -> Vocab:
    """Frequency-then-lexicographic vocabulary over every text field."""
    if not examples:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts: dict[str, int] = {}
    for ex in examples:
        for text in (*ex.profile, *(u.text for u in ex.context), ex.response):
            for tok in tokenize(text):
                counts[tok] = counts.get(tok, 0) + 1
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocab(list(RESERVED_TOKENS) + ordered)


@dataclass
class EncodedSequence:
    """Aligned id sequences for one model input."""

    token_ids: np.ndarray
    position_ids: np.ndarray
    role_ids: np.ndarray
    loss_mask: np.ndarray
    n_latent_slots: int = 1

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.position_ids = np.asarray(self.position_ids, dtype=np.int64)
        self.role_ids = np.asarray(self.role_ids, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=np.float64)
        n = len(self.token_ids)
        if not (len(self.position_ids) == len(self.role_ids) == len(self.loss_mask) == n):
            raise DataError("encoded sequence fields must have equal lengths")
        if any(self.position_ids[: self.n_latent_slots] != EMPTY_POSITION):
            raise DataError("latent slots must carry the empty position id")

    def __len__(self) -> int:
        return len(self.token_ids)


def _window(context: tuple[Utterance, ...], window: int) -> tuple[Utterance, ...]:
    return context[-window:] if window else context


class _SeqBuilder:
    def __init__(self):
        self.tokens: list[int] = []
        self.positions: list[int] = []
        self.roles: list[int] = []
        self.mask: list[float] = []
        self._next_pos = 1

    def slot(self, token_id: int) -> None:
        self.tokens.append(token_id)
        self.positions.append(EMPTY_POSITION)
        self.roles.append(ROLE_AGENT)
        self.mask.append(0.0)

    def push(self, token_id: int, role: int = ROLE_AGENT, in_loss: bool = False) -> None:
        self.tokens.append(token_id)
        self.positions.append(self._next_pos)
        self.roles.append(role)
        self.mask.append(1.0 if in_loss else 0.0)
        self._next_pos += 1

    def build(self, n_latent_slots: int) -> EncodedSequence:
        return EncodedSequence(
            np.array(self.tokens),
            np.array(self.positions),
            np.array(self.roles),
            np.array(self.mask),
            n_latent_slots=n_latent_slots,
        )


def _push_utterances(b: _SeqBuilder, vocab: Vocab, utterances, role_for) -> None:
    # every utterance ends with [SEP]; [BOS]/[EOS] bracket the whole block
    b.push(vocab.bos_id)
    for utt in utterances:
        role = role_for(utt)
        for tok in tokenize(utt.text):
            b.push(vocab.id_of(tok), role=role)
        b.push(vocab.sep_id)
    b.push(vocab.eos_id)


def _speaker_role(u: Utterance) -> int:
    return ROLE_USER if u.speaker == "user" else ROLE_AGENT


def encode_context_for_prior(context, vocab: Vocab, window: int = 4) -> EncodedSequence:
    """[Z_p] [BOS] utterance [SEP] ... [EOS] over the context window."""
    b = _SeqBuilder()
    b.slot(vocab.zp_id)
    _push_utterances(b, vocab, _window(tuple(context), window), _speaker_role)
    return b.build(1)


def encode_context_for_fader(context, vocab: Vocab, window: int = 4) -> EncodedSequence:
    """[Z_p] [Z_a] [BOS] context ... [EOS]; the z slot is replaced by the sampled latent."""
    b = _SeqBuilder()
    b.slot(vocab.zp_id)
    b.slot(vocab.za_id)
    _push_utterances(b, vocab, _window(tuple(context), window), _speaker_role)
    return b.build(2)


def encode_context_decoder_prefix(context, vocab: Vocab, window: int = 4) -> EncodedSequence:
    """Decoder input up to (excluding) the response: [Z_p] [Z_a] [BOS] context ... [EOS]."""
    b = _SeqBuilder()
    b.slot(vocab.zp_id)
    b.slot(vocab.za_id)
    _push_utterances(b, vocab, _window(tuple(context), window), _speaker_role)
    return b.build(2)


def encode_for_prior_zp(example: DialogueExample, vocab: Vocab, window: int = 4) -> EncodedSequence:
    return encode_context_for_prior(example.context, vocab, window)


def encode_for_posterior_zp(example: DialogueExample, vocab: Vocab) -> EncodedSequence:
    """[Z_p] [BOS] description [SEP] ... [EOS] over the profile (no role ids)."""
    b = _SeqBuilder()
    b.slot(vocab.zp_id)
    _push_utterances(b, vocab, [Utterance("agent", d) for d in example.profile], lambda u: ROLE_AGENT)
    return b.build(1)


def encode_for_fader_prior(example: DialogueExample, vocab: Vocab, window: int = 4) -> EncodedSequence:
    return encode_context_for_fader(example.context, vocab, window)


def encode_for_decoder(
    example: DialogueExample,
    vocab: Vocab,
    window: int = 4,
    include_response: bool = True,
) -> EncodedSequence:
    """[Z_p] [Z_a] [BOS] context ... [EOS] response [EOS].

    The loss mask marks the response tokens plus the closing [EOS]
    (the positions a language-model loss should score).
    """
    b = _SeqBuilder()
    b.slot(vocab.zp_id)
    b.slot(vocab.za_id)
    _push_utterances(b, vocab, _window(example.context, window), _speaker_role)
    if include_response:
        for tok in tokenize(example.response):
            b.push(vocab.id_of(tok), role=ROLE_AGENT, in_loss=True)
        b.push(vocab.eos_id, in_loss=True)
    return b.build(2)


def decode_tokens(token_ids, vocab: Vocab, strip_special: bool = True) -> list[str]:
    toks = [vocab.token_of(int(i)) for i in token_ids]
    if strip_special:
        specials = set(RESERVED_TOKENS)
        toks = [t for t in toks if t not in specials]
    return toks


# -- file I/O ---------------------------------------------------------------


def example_to_dict(ex: DialogueExample) -> dict:
    d = {
        "profile": list(ex.profile),
        "context": [{"speaker": u.speaker, "text": u.text} for u in ex.context],
        "response": ex.response,
    }
    if ex.category is not None:
        d["category"] = ex.category
    return d


def example_from_dict(d: dict) -> DialogueExample:
    for key in ("profile", "context", "response"):
        if key not in d:
            raise DataError(f"missing key {key!r}")
    if not isinstance(d["profile"], list):
        raise DataError("profile must be a list of strings")
    context = []
    for u in d["context"]:
        if not isinstance(u, dict) or "speaker" not in u or "text" not in u:
            raise DataError("context entries need 'speaker' and 'text'")
        context.append(Utterance(u["speaker"], u["text"]))
    return DialogueExample(
        profile=tuple(d["profile"]),
        context=tuple(context),
        response=d["response"],
        category=d.get("category"),
    )


def load_jsonl(path) -> list[DialogueExample]:
    """Read a JSON-lines corpus; malformed lines are reported by number."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus file not found: {path}")
    examples = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            examples.append(example_from_dict(json.loads(line)))
        except (json.JSONDecodeError, DataError) as err:
            raise DataError(f"{path.name}:{lineno}: {err}") from err
    return examples


def save_jsonl(examples: list[DialogueExample], path) -> None:
    lines = [json.dumps(example_to_dict(ex), ensure_ascii=False, sort_keys=True) for ex in examples]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def convert_personachat_text(lines) -> list[DialogueExample]:
    """Convert a PERSONA-CHAT-style text dump to examples.

    Expected line shapes (leading turn number, resets to 1 per dialogue):
        ``N your persona: <description>``
        ``N <user utterance>\\t<agent reply>[\\t...extra fields ignored]``
    """
    examples: list[DialogueExample] = []
    profile: list[str] = []
    history: list[Utterance] = []
    last_no = 0
    for raw in lines:
        raw = raw.rstrip("\n")
        if not raw.strip():
            continue
        m = re.match(r"^(\d+) (.*)$", raw)
        if not m:
            raise DataError(f"unparseable line: {raw!r}")
        no, rest = int(m.group(1)), m.group(2)
        if no <= last_no:
            profile, history = [], []
        last_no = no
        pm = re.match(r"^(?:your|partner's) persona:\s*(.*)$", rest)
        if pm:
            profile.append(pm.group(1).strip())
            continue
        parts = rest.split("\t")
        if len(parts) < 2:
            raise DataError(f"dialogue line without a reply: {raw!r}")
        user_text, agent_text = parts[0].strip(), parts[1].strip()
        history.append(Utterance("user", user_text))
        if profile:
            examples.append(
                DialogueExample(profile=tuple(profile), context=tuple(history), response=agent_text)
            )
        history.append(Utterance("agent", agent_text))
    return examples
