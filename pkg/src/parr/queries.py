"""Binary attribute queries rendered as text and embedded as vectors.

A query travels three routes:

* hard route: the raw 0/1 vector, cast to floats;
* soft route: the query is expanded into a fixed-template descriptive
  sentence, tokenized to exactly ``n_w`` words, and each word embedded by a
  deterministic provider; the word embeddings are flattened into one vector;
* word route: the surface words of active attributes are embedded
  individually and mean-pooled (no template).
"""

from __future__ import annotations

import hashlib
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .errors import AmbiguousQueryError, ProviderError
from .schema import AttributeSchema, QueryLike

PAD_WORD = "<pad>"
UNKNOWN_WORD = "unknown"
DEFAULT_N_W = 48
DEFAULT_DIM_W = 768

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class Slot:
    """One template slot plus the auxiliary words it owns.

    Owned words are dropped together with the slot; `optional` slots vanish
    when no bound attribute is active, required slots render "unknown".
    `multi` slots join several active words with "and"; a required slot with
    more than one active attribute is ambiguous.
    """

    tag: str
    pre: str = ""
    post: str = ""
    optional: bool = False
    multi: bool = False


# Sentence skeleton. Slots whose tag a schema does not define are simply
# skipped, so the same template serves vocabularies of different sizes.
TEMPLATE: tuple[object, ...] = (
    "this is a photo of",
    Slot("age"),
    Slot("gender"),
    Slot("camera angle", pre="taken from", optional=True),
    Slot("hair length", pre="with", post="hair"),
    Slot("lower color", pre=", is dressed in a"),
    Slot("lower clothing"),
    Slot("upper color", pre="and a"),
    Slot("upper clothing"),
    Slot("sleeves length", pre="with", post="sleeves"),
    Slot("motif", pre="with", post="motif", optional=True),
    Slot("accessory", pre=", is wearing a", multi=True),
    Slot("bag", pre=", carrying", multi=True),
    Slot("backpack", pre="and", optional=True, multi=True),
    ".",
)


@dataclass(frozen=True)
class PseudoDescription:
    text: str
    words: tuple[str, ...]

    @property
    def n_w(self) -> int:
        return len(self.words)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation."""
    return _TOKEN_RE.findall(text.lower())


def build_pseudo_description(
    schema: AttributeSchema, query: QueryLike, n_w: int = DEFAULT_N_W
) -> PseudoDescription:
    """Expand a binary query into the template sentence, fixed at n_w words."""
    vec = schema.check_query(query)
    chunks: list[str] = []
    for piece in TEMPLATE:
        if isinstance(piece, str):
            chunks.append(piece)
            continue
        slot: Slot = piece
        if not schema.has_tag(slot.tag):
            continue
        active = [b for b in schema.bindings(slot.tag) if vec.bits[b.index]]
        if len(active) > 1 and not slot.multi:
            names = [schema.attributes[b.index].name for b in active]
            raise AmbiguousQueryError(
                f"slot {slot.tag!r} is single-valued but {names} are all active"
            )
        if active:
            filler = " and ".join(b.word for b in active)
        elif slot.optional:
            continue
        else:
            filler = UNKNOWN_WORD
        for part in (slot.pre, filler, slot.post):
            if part:
                chunks.append(part)
    text = " ".join(chunks).replace(" ,", ",").replace(" .", ".").lower()
    words = tokenize(text)[:n_w]
    words += [PAD_WORD] * (n_w - len(words))
    return PseudoDescription(text=text, words=tuple(words))


class EmbeddingProvider(ABC):
    """Deterministic word-to-vector map: identical word, identical vector."""

    dim_w: int

    @abstractmethod
    def embed(self, word: str) -> np.ndarray:
        """Return a vector of shape (dim_w,)."""


class HashEmbeddingProvider(EmbeddingProvider):
    """Seeded pseudo-embeddings: each word maps to a stable unit vector.

    Stands in for an external language-model encoder; any provider honoring
    the same determinism contract can be swapped in.
    """

    def __init__(self, dim_w: int, seed: int = 0):
        if dim_w <= 0:
            raise ProviderError(f"dim_w must be positive, got {dim_w}")
        self.dim_w = dim_w
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, word: str) -> np.ndarray:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        digest = hashlib.sha256(f"{self.seed}:{word}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vec = rng.standard_normal(self.dim_w)
        vec /= np.linalg.norm(vec)
        self._cache[word] = vec
        return vec


def soft_embed(desc: PseudoDescription, provider: EmbeddingProvider) -> np.ndarray:
    """Flatten per-word provider embeddings into one (n_w * dim_w,) vector."""
    blocks = []
    for word in desc.words:
        try:
            vec = np.asarray(provider.embed(word), dtype=np.float64)
        except ProviderError:
            raise
        except Exception as exc:
            raise ProviderError(f"provider failed on word {word!r}: {exc}") from exc
        if vec.shape != (provider.dim_w,):
            raise ProviderError(
                f"provider returned shape {vec.shape} for {word!r}, "
                f"expected ({provider.dim_w},)"
            )
        if not np.all(np.isfinite(vec)):
            raise ProviderError(f"provider returned non-finite values for {word!r}")
        blocks.append(vec)
    return np.concatenate(blocks)


def hard_embed(schema: AttributeSchema, query: QueryLike) -> np.ndarray:
    """Identity cast of the binary query to a real vector of length n_attr."""
    return schema.check_query(query).to_numpy(np.float64)


def word_query_embedding(
    schema: AttributeSchema, query: QueryLike, provider: EmbeddingProvider
) -> np.ndarray:
    """Mean-pooled embeddings of active attributes' surface words, no template."""
    vec = schema.check_query(query)
    words = [schema.surface_word(i) for i in vec.active()]
    if not words:
        words = [PAD_WORD]
    embeds = [soft_embed(PseudoDescription(w, (w,)), provider) for w in words]
    return np.mean(embeds, axis=0)
