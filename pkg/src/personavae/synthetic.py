"""Synthetic persona-corpus generator with known ground-truth structure.

Profiles are templated around category-specific keywords; persona-related
responses always echo one profile keyword, while persona-sparse responses
come from a generic-phrase pool whose content words are disjoint from
every profile word. That makes the keyword-overlap fraction exactly
1 - sparse_ratio by construction, scannable after the fact.

A matching synthetic word-embedding table places same-category keywords
near a shared centroid, so similarity metrics over the corpus behave the
way pre-trained vectors would on real text.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .corpus import DataError, DialogueExample, Utterance, tokenize

CATEGORIES = ("hobby", "occupation", "family", "location")

KEYWORDS = {
    "hobby": ("painting", "chess", "hiking", "baking", "gardening", "fishing", "dancing", "photography"),
    "occupation": ("teacher", "nurse", "carpenter", "lawyer", "farmer", "barista", "plumber", "architect"),
    "family": ("brother", "sister", "daughter", "cousin", "grandmother", "nephew", "aunt", "uncle"),
    "location": ("seattle", "denver", "austin", "boston", "portland", "chicago", "miami", "tucson"),
}

PROFILE_TEMPLATES = {
    "hobby": (
        "i love {k} more than anything",
        "my favorite hobby is {k}",
        "i spend my weekends on {k}",
        "i got into {k} last spring",
        "{k} keeps me happy and busy",
    ),
    "occupation": (
        "i work as a {k} downtown",
        "my job is being a {k}",
        "i trained for years to become a {k}",
        "being a {k} takes all my energy",
        "people know me as the local {k}",
    ),
    "family": (
        "my {k} lives with me",
        "i visit my {k} every sunday",
        "my {k} taught me everything",
        "i grew up beside my {k}",
        "my {k} calls me all the time",
    ),
    "location": (
        "i live near {k} these days",
        "home for me is {k}",
        "i moved to {k} two years ago",
        "{k} is where my house is",
        "i was born right outside {k}",
    ),
}

# persona-related responses are category-styled and echo the keyword twice,
# so the latent pathway informs every response position
RELATED_TEMPLATES = {
    "hobby": (
        "yes i adore {k} and i practice {k} every evening",
        "oh {k} totally rules my free hours i tinker with {k} nonstop",
        "honestly {k} is my escape i unwind with {k} after supper",
        "you caught me i am obsessed with {k} truly {k} forever",
    ),
    "occupation": (
        "yes i earn my living as a {k} being a {k} suits me",
        "correct i clock in daily as a {k} the {k} routine fits me",
        "indeed the {k} craft pays my rent i relish {k} duties",
        "you got it i serve folks as a {k} proud {k} here",
    ),
    "family": (
        "yes my {k} and i are close my {k} visits constantly",
        "true my {k} keeps me grounded i cherish my {k} deeply",
        "indeed my {k} shaped my childhood my {k} still guides me",
        "right my {k} is family glue i phone my {k} nightly",
    ),
    "location": (
        "yes {k} is my town i wander {k} streets daily",
        "true i settled around {k} the {k} air suits me",
        "indeed {k} raised me i roam {k} corners proudly",
        "right {k} is home turf i praise {k} everywhere",
    ),
}

GENERIC_RESPONSES = (
    "that sounds fairly nice to hear",
    "i am doing fine thanks for asking",
    "not much new here to report",
    "it has been a slow afternoon",
    "maybe we can talk again tomorrow",
    "i had a quiet morning today",
    "the weather has been lovely this week",
    "sorry i keep yawning right now",
    "my phone battery is nearly dead",
    "i might nap for a little while",
    "the bus ran late again this evening",
    "i burned my toast this morning oops",
    "my neighbor plays loud music at night",
    "i lost my umbrella somewhere yesterday",
    "dinner tonight will probably be soup",
    "i watched clouds drift past my window",
)

GENERIC_OPENERS = (
    "hello there how are you",
    "tell me something about yourself",
    "what should we chat about",
    "hey it has been a while",
    "so what is new with you",
    "good to see you around again",
    "did you catch the game last night",
    "any plans for the holidays",
    "you seem cheerful this evening",
    "tell me a story please",
    "what keeps you up these days",
    "i am bored entertain me",
    "guess what happened earlier",
    "help me settle a debate",
    "rate your week so far",
    "describe your perfect meal",
    "we have not talked in ages",
    "what song is stuck in your head",
    "give me one fun fact",
    "how was the traffic out there",
    "did the package ever arrive",
    "remind me where we left off",
    "share some gossip with me",
    "what made you smile lately",
)

MENTION_TEMPLATES = (
    "i heard you are into {k}",
    "someone told me {k} matters to you",
    "is it true you know all about {k}",
)

AGENT_FILLERS = (
    "oh really",
    "go on",
    "is that so",
    "interesting tell me more",
    "that explains it",
    "fair enough",
    "makes sense",
    "wild story",
    "good point",
    "say more",
    "i follow",
    "hm alright",
)

# Function words ignored by keyword scans; shared with the metrics module.
STOP_WORDS = frozenset(
    """a an the i my me mine is am are was were be been being do does did done to of in on at
    for with and or but not no yes it its this that these those you your yours we us our ours
    he she they them his her their theirs as by from up down out about into over under after
    before what who whom how when where why which so just very really quite can could will
    would shall should may might must have has had there here all any some none such other
    another more most much many few little own same than too s t don now then once only if
    because while during each both between through again further them's let's im ive id
    anything everything something nothing time times day days week weeks year years people
    person thing things stuff lot bit right well oh hey hello hi honestly maybe fairly pretty
    ok okay please thanks thank sorry sure . , ! ? ' \" ; :""".split()
)


def _content_words(texts) -> set[str]:
    words = set()
    for t in texts:
        words.update(w for w in tokenize(t) if w not in STOP_WORDS)
    return words


def _check_pool_disjointness() -> None:
    profile_words = _content_words(
        [t.format(k=k) for c in CATEGORIES for t in PROFILE_TEMPLATES[c] for k in KEYWORDS[c]]
    )
    generic_words = _content_words(GENERIC_RESPONSES)
    clash = profile_words & generic_words
    if clash:
        raise AssertionError(f"generic response pool overlaps profile words: {sorted(clash)}")


_check_pool_disjointness()


@dataclass
class SynthSpec:
    """Knobs of the synthetic corpus."""

    categories: int = 4
    descriptions_per_profile: int = 5
    sparse_ratio: float = 0.5  # fraction of responses with no persona content
    train_size: int = 2000
    dev_size: int = 200
    test_size: int = 200
    seed: int = 0
    mention_rate: float = 0.25  # chance the user's last turn names a profile keyword
    embedding_dim: int = 32

    def __post_init__(self):
        if not 0.0 <= self.sparse_ratio <= 1.0:
            raise DataError("sparse_ratio must lie in [0, 1]")
        if not 0.0 <= self.mention_rate <= 1.0:
            raise DataError("mention_rate must lie in [0, 1]")
        if min(self.train_size, self.dev_size, self.test_size) <= 0:
            raise DataError("split sizes must be positive")
        if not 2 <= self.categories <= len(CATEGORIES):
            raise DataError(f"categories must be in [2, {len(CATEGORIES)}]")
        if self.descriptions_per_profile < 1:
            raise DataError("descriptions_per_profile must be >= 1")


def _make_profile(rng: np.random.Generator, spec: SynthSpec, category: str) -> tuple[tuple[str, ...], list[str]]:
    pool = KEYWORDS[category]
    n = spec.descriptions_per_profile
    kws = list(rng.choice(len(pool), size=min(n, len(pool)), replace=False))
    while len(kws) < n:  # profiles longer than the pool reuse keywords
        kws.append(int(rng.integers(len(pool))))
    templates = PROFILE_TEMPLATES[category]
    order = rng.permutation(len(templates))
    descs = []
    keywords = []
    for i, ki in enumerate(kws):
        k = pool[int(ki)]
        keywords.append(k)
        descs.append(templates[int(order[i % len(templates)])].format(k=k))
    return tuple(descs), keywords


def _make_context(rng: np.random.Generator, spec: SynthSpec, keywords: list[str]) -> tuple[tuple[Utterance, ...], str | None]:
    mentioned = None
    turns: list[Utterance] = []
    if rng.random() < 0.4:  # optional earlier exchange
        turns.append(Utterance("user", GENERIC_OPENERS[int(rng.integers(len(GENERIC_OPENERS)))]))
        turns.append(Utterance("agent", AGENT_FILLERS[int(rng.integers(len(AGENT_FILLERS)))]))
    if rng.random() < spec.mention_rate:
        mentioned = keywords[int(rng.integers(len(keywords)))]
        text = MENTION_TEMPLATES[int(rng.integers(len(MENTION_TEMPLATES)))].format(k=mentioned)
    else:
        text = GENERIC_OPENERS[int(rng.integers(len(GENERIC_OPENERS)))]
    turns.append(Utterance("user", text))
    return tuple(turns), mentioned


def _make_split(rng: np.random.Generator, spec: SynthSpec, size: int) -> list[DialogueExample]:
    n_related = round(size * (1.0 - spec.sparse_ratio))
    related_flags = np.zeros(size, dtype=bool)
    related_flags[:n_related] = True
    related_flags = related_flags[rng.permutation(size)]

    examples = []
    for i in range(size):
        category = CATEGORIES[i % spec.categories]
        profile, keywords = _make_profile(rng, spec, category)
        context, mentioned = _make_context(rng, spec, keywords)
        if related_flags[i]:
            if mentioned is not None and rng.random() < 0.5:
                k = mentioned
            else:
                k = keywords[int(rng.integers(len(keywords)))]
            pool = RELATED_TEMPLATES[category]
            response = pool[int(rng.integers(len(pool)))].format(k=k)
        else:
            response = GENERIC_RESPONSES[int(rng.integers(len(GENERIC_RESPONSES)))]
        examples.append(
            DialogueExample(profile=profile, context=context, response=response, category=category)
        )
    return examples


def generate_synthetic(spec: SynthSpec) -> dict[str, list[DialogueExample]]:
    """Deterministic train/dev/test splits, fully determined by spec.seed."""
    seeds = np.random.SeedSequence(spec.seed).spawn(3)
    return {
        "train": _make_split(np.random.default_rng(seeds[0]), spec, spec.train_size),
        "dev": _make_split(np.random.default_rng(seeds[1]), spec, spec.dev_size),
        "test": _make_split(np.random.default_rng(seeds[2]), spec, spec.test_size),
    }


def persona_overlap_fraction(examples: list[DialogueExample]) -> float:
    """Fraction of responses sharing at least one content word with their profile."""
    if not examples:
        return 0.0
    hits = 0
    for ex in examples:
        prof = _content_words(ex.profile)
        resp = _content_words([ex.response])
        if prof & resp:
            hits += 1
    return hits / len(examples)


def _word_rng(seed: int, word: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{word}".encode()).digest()
    return np.random.default_rng(np.frombuffer(digest[:16], dtype=np.uint64))


def build_synthetic_embeddings(spec: SynthSpec, words) -> dict[str, np.ndarray]:
    """Deterministic unit vectors; same-category keywords cluster around a centroid."""
    dim = spec.embedding_dim
    centroid_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7]))
    centroids = {}
    for c in CATEGORIES:
        v = centroid_rng.standard_normal(dim)
        centroids[c] = v / np.linalg.norm(v)
    keyword_category = {k: c for c in CATEGORIES for k in KEYWORDS[c]}

    table = {}
    for word in sorted(set(words)):
        rng = _word_rng(spec.seed, word)
        noise = rng.standard_normal(dim)
        noise /= np.linalg.norm(noise)
        if word in keyword_category:
            v = centroids[keyword_category[word]] + 0.4 * noise
        else:
            v = noise
        table[word] = v / np.linalg.norm(v)
    return table


def corpus_words(examples: list[DialogueExample]) -> set[str]:
    words: set[str] = set()
    for ex in examples:
        for text in (*ex.profile, *(u.text for u in ex.context), ex.response):
            words.update(tokenize(text))
    return words
