"""Text-side metrics: n-gram diversity and persona proximity.

Persona proximity scores a response against a profile: extract keywords
from both, build the profile-by-response cosine-similarity matrix, take
each profile keyword's best match, and average. Degenerate inputs (no
keywords, no vectors) score 0 and are flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import DataError, DialogueExample, tokenize
from .synthetic import STOP_WORDS

DEFAULT_KEYWORDS_PER_TEXT = 5
DEFAULT_FREQUENCY_BAND = 0.4  # keywords live in the top 40% of content-word frequencies


class EmbeddingTable:
    """word -> fixed-dimension vector; lookups of unknown words miss (skipped)."""

    def __init__(self, vectors: dict[str, np.ndarray]):
        if not vectors:
            raise DataError("embedding table is empty")
        dims = {len(v) for v in vectors.values()}
        if len(dims) != 1:
            raise DataError(f"embedding table has mixed dimensions: {sorted(dims)}")
        self.dim = dims.pop()
        self._vectors = {w: np.asarray(v, dtype=np.float64) for w, v in vectors.items()}

    def __contains__(self, word: str) -> bool:
        return word in self._vectors

    def __len__(self) -> int:
        return len(self._vectors)

    def get(self, word: str) -> np.ndarray | None:
        return self._vectors.get(word)

    def unit(self, word: str) -> np.ndarray | None:
        v = self._vectors.get(word)
        if v is None:
            return None
        norm = np.linalg.norm(v)
        return None if norm == 0 else v / norm

    def save(self, path) -> None:
        """Textual word-vector format: header 'count dim', then 'word v1 .. vd'."""
        lines = [f"{len(self._vectors)} {self.dim}"]
        for word in sorted(self._vectors):
            vals = " ".join(repr(float(x)) for x in self._vectors[word])
            lines.append(f"{word} {vals}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise DataError(f"empty embedding file: {path}")
        head = lines[0].split()
        if len(head) != 2:
            raise DataError(f"embedding file header must be 'count dim', got {lines[0]!r}")
        count, dim = int(head[0]), int(head[1])
        vectors = {}
        for lineno, line in enumerate(lines[1 : count + 1], start=2):
            parts = line.rstrip().split(" ")
            if len(parts) != dim + 1:
                raise DataError(f"{Path(path).name}:{lineno}: expected {dim} components")
            vectors[parts[0]] = np.array([float(x) for x in parts[1:]])
        return cls(vectors)


class KeywordExtractor:
    """Frequency-ranked content-word extraction with a per-text cap.

    The keyword vocabulary is the top `frequency_band` share of content
    words ranked by training-set frequency. Within a text, candidates
    are ordered rarest-first (rare in-band words are the distinctive
    ones; first occurrence breaks ties) and capped.
    """

    def __init__(
        self,
        frequencies: dict[str, int],
        stop_words=STOP_WORDS,
        per_text_cap: int = DEFAULT_KEYWORDS_PER_TEXT,
        frequency_band: float = DEFAULT_FREQUENCY_BAND,
    ):
        self.stop_words = frozenset(stop_words)
        self.per_text_cap = per_text_cap
        content = {w: c for w, c in frequencies.items() if w not in self.stop_words}
        ranked = sorted(content, key=lambda w: (-content[w], w))
        keep = int(np.ceil(len(ranked) * frequency_band)) if ranked else 0
        self._freq = content
        self.vocabulary = frozenset(ranked[:keep])

    @classmethod
    def from_corpus(cls, examples: list[DialogueExample], **kwargs) -> "KeywordExtractor":
        counts: dict[str, int] = {}
        for ex in examples:
            for text in (*ex.profile, *(u.text for u in ex.context), ex.response):
                for tok in tokenize(text):
                    counts[tok] = counts.get(tok, 0) + 1
        return cls(counts, **kwargs)

    def extract(self, text: str) -> list[str]:
        seen = []
        for tok in tokenize(text):
            if tok in self.vocabulary and tok not in seen:
                seen.append(tok)
        ranked = sorted(seen, key=lambda w: self._freq.get(w, 0))  # stable: text order breaks ties
        return ranked[: self.per_text_cap]


def similarity_matrix(profile_kws: list[str], response_kws: list[str], table: EmbeddingTable) -> np.ndarray | None:
    """Cosine similarities, profile keywords as rows. None if either side is empty after lookup."""
    p_vecs = [table.unit(w) for w in profile_kws]
    r_vecs = [table.unit(w) for w in response_kws]
    p_vecs = [v for v in p_vecs if v is not None]
    r_vecs = [v for v in r_vecs if v is not None]
    if not p_vecs or not r_vecs:
        return None
    return np.stack(p_vecs) @ np.stack(r_vecs).T


@dataclass
class PDistanceResult:
    value: float
    degenerate: bool
    profile_keywords: list[str] = field(default_factory=list)
    response_keywords: list[str] = field(default_factory=list)
    matrix: np.ndarray | None = None


def p_distance_detailed(profile_texts, response: str, extractor: KeywordExtractor, table: EmbeddingTable) -> PDistanceResult:
    profile_kws = extractor.extract(" ".join(profile_texts))
    response_kws = extractor.extract(response)
    m = similarity_matrix(profile_kws, response_kws, table)
    if m is None:
        return PDistanceResult(0.0, True, profile_kws, response_kws, None)
    return PDistanceResult(float(m.max(axis=1).mean()), False, profile_kws, response_kws, m)


def p_distance(profile_texts, response: str, extractor: KeywordExtractor, table: EmbeddingTable) -> float:
    """Mean over profile keywords of the best cosine match among response keywords."""
    return p_distance_detailed(profile_texts, response, extractor, table).value


def distinct_n(responses: list[str], n: int) -> float:
    """Unique n-grams divided by total n-grams across the whole response set."""
    if n < 1:
        raise DataError("n must be >= 1")
    total = 0
    unique: set[tuple[str, ...]] = set()
    for resp in responses:
        toks = tokenize(resp)
        for i in range(len(toks) - n + 1):
            unique.add(tuple(toks[i : i + n]))
            total += 1
    return len(unique) / total if total else 0.0
