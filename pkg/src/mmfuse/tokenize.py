"""Per-modality tokenization: turn raw case data into d-dimensional token
matrices.

Clinical records and genomic profiles are (key, value) pairs embedded as
key-embedding + learnable value embedding; radiology slice features pass
through a projection stack and get sinusoidal positional terms (slice order
matters); pathology patch features pass through a projection stack with no
positional term (a bag).

Key/gene embeddings come from a deterministic, seeded hash embedder standing
in for pretrained word/gene vectors, so tokenization is a pure function of
the case, the providers, and the learnable projection weights.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MODALITIES = ("C", "R", "P", "G")
RADIOLOGY_DIM = 256
PATHOLOGY_DIM = 768


@dataclass
class ResponseLabel:
    cls: int  # 0 = non-responder, 1 = good responder

    def __post_init__(self):
        if self.cls not in (0, 1):
            raise ValueError(f"response class must be 0 or 1, got {self.cls}")


@dataclass
class SurvivalLabel:
    censor: int          # 1 = right-censored, 0 = event observed
    time_months: float
    bin: int = -1        # discrete interval index, assigned at ingestion

    def __post_init__(self):
        if self.censor not in (0, 1):
            raise ValueError(f"censor must be 0 or 1, got {self.censor}")
        if not self.time_months > 0:
            raise ValueError(f"survival time must be positive, got {self.time_months}")


@dataclass
class CaseRecord:
    """One patient: per-modality raw features, availability, and label."""

    case_id: str
    clinical: list[tuple[str, float]] = field(default_factory=list)
    radiology: Optional[np.ndarray] = None   # (n_slices, 256), axial order
    pathology: Optional[np.ndarray] = None   # (n_patches, 768), unordered bag
    genomic: list[tuple[str, float]] = field(default_factory=list)
    pathology_ids: Optional[list[str]] = None
    label: Union[ResponseLabel, SurvivalLabel, None] = None

    def __post_init__(self):
        if self.radiology is not None:
            self.radiology = np.asarray(self.radiology, dtype=np.float64)
            if self.radiology.ndim != 2 or self.radiology.shape[1] != RADIOLOGY_DIM:
                raise ValueError(f"radiology features must be (n, {RADIOLOGY_DIM})")
        if self.pathology is not None:
            self.pathology = np.asarray(self.pathology, dtype=np.float64)
            if self.pathology.ndim != 2 or self.pathology.shape[1] != PATHOLOGY_DIM:
                raise ValueError(f"pathology features must be (n, {PATHOLOGY_DIM})")

    @property
    def availability(self) -> frozenset:
        avail = set()
        if self.clinical:
            avail.add("C")
        if self.radiology is not None and len(self.radiology):
            avail.add("R")
        if self.pathology is not None and len(self.pathology):
            avail.add("P")
        if self.genomic:
            avail.add("G")
        return frozenset(avail)


@dataclass
class TokenSet:
    """d-dim tokens for one modality; `ordered` is true only for radiology."""

    modality: str
    tokens: Tensor          # (n, d)
    ordered: bool
    source_ids: list[str]

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality}")
        if self.tokens.data.shape[0] < 1:
            raise ValueError("token set must contain at least one token")
        if len(self.source_ids) != self.tokens.data.shape[0]:
            raise ValueError("source_ids length must match token count")


# ---------------------------------------------------------------------------
# embedding providers

def hash_embedding(key: str, seed: int, d: int) -> np.ndarray:
    """Deterministic unit-norm vector for a string key.

    The key is hashed (keyed blake2b) to seed a counter-based generator, so
    the same (key, seed, d) always yields the same vector on any platform.
    """
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8,
                             key=int(seed).to_bytes(8, "little")).digest()
    gen = np.random.Generator(np.random.Philox(int.from_bytes(digest, "little")))
    v = gen.standard_normal(d)
    return v / np.linalg.norm(v)


class EmbeddingProvider:
    """Named deterministic map from string keys to d-dim vectors.

    Produced vectors must be unit-scale (L2 norm within [0.5, 2]).
    """

    def __init__(self, name: str, fn: Callable[[str], np.ndarray], d: int):
        self.name = name
        self._fn = fn
        self.d = d
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, key: str) -> np.ndarray:
        v = self._cache.get(key)
        if v is None:
            v = np.asarray(self._fn(key), dtype=np.float64)
            if v.shape != (self.d,):
                raise ValueError(f"provider {self.name} returned shape {v.shape}")
            norm = float(np.linalg.norm(v))
            if not 0.5 <= norm <= 2.0:
                raise ValueError(f"provider {self.name}: vector norm {norm:.3g} "
                                 "outside unit scale [0.5, 2]")
            self._cache[key] = v
        return v


def hash_provider(name: str, seed: int, d: int) -> EmbeddingProvider:
    return EmbeddingProvider(name, lambda k: hash_embedding(k, seed, d), d)


# ---------------------------------------------------------------------------
# learnable pieces (parameters owned by the model)

@dataclass
class ValueEmbedder:
    """Scalar-to-vector map: v -> v * w + b, zero-initialized."""

    w: Tensor  # (1, d)
    b: Tensor  # (d,)


@dataclass
class ProjectionStack:
    """Two affine layers with GELU in between (e.g. 768-256-200)."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def apply(self, x: Tensor) -> Tensor:
        from .attention import ffn_apply
        return ffn_apply(x, self.w1, self.b1, self.w2, self.b2)


# ---------------------------------------------------------------------------
# positional embedding

def sinusoidal_position(i: int, d: int) -> np.ndarray:
    """Standard transformer sin/cos positional vector for index i."""
    if d % 2 != 0:
        raise ValueError(f"positional dim must be even, got {d}")
    j = np.arange(d // 2)
    angle = i / (10000.0 ** (2 * j / d))
    pe = np.empty(d)
    pe[0::2] = np.sin(angle)
    pe[1::2] = np.cos(angle)
    return pe


def positional_matrix(n: int, d: int) -> np.ndarray:
    return np.stack([sinusoidal_position(i, d) for i in range(n)])


# ---------------------------------------------------------------------------
# tokenizers

def _pair_tokens(pairs: list[tuple[str, float]], provider: EmbeddingProvider,
                 embedder: ValueEmbedder, what: str) -> tuple[Tensor, list[str]]:
    keys = [k for k, _ in pairs]
    if len(set(keys)) != len(keys):
        dupes = sorted({k for k in keys if keys.count(k) > 1})
        raise ValueError(f"duplicate {what} in case: {dupes}")
    key_mat = Tensor(np.stack([provider(k) for k in keys]))
    values = Tensor(np.array([[v] for _, v in pairs]))
    return ad.add(key_mat, ad.linear(values, embedder.w, embedder.b)), keys


def tokenize_clinical(records: list[tuple[str, float]], key_provider: EmbeddingProvider,
                      value_embedder: ValueEmbedder) -> TokenSet:
    """token_i = key_embedding(k_i) + value_embedding(v_i); unordered."""
    if not records:
        raise ValueError("clinical records are empty")
    tokens, keys = _pair_tokens(records, key_provider, value_embedder, "clinical keys")
    return TokenSet("C", tokens, ordered=False, source_ids=keys)


def tokenize_genomic(genes: list[tuple[str, float]], gene_provider: EmbeddingProvider,
                     expr_embedder: ValueEmbedder) -> TokenSet:
    """token_i = gene_embedding(g_i) + expression_embedding(x_i); unordered."""
    if not genes:
        raise ValueError("genomic profile is empty")
    tokens, names = _pair_tokens(genes, gene_provider, expr_embedder, "genes")
    return TokenSet("G", tokens, ordered=False, source_ids=names)


def tokenize_radiology(slices: np.ndarray, projector: ProjectionStack,
                       positional: bool = True) -> TokenSet:
    """token_i = projection(slice_i) + positional(i); order-sensitive."""
    slices = np.asarray(slices, dtype=np.float64)
    if slices.ndim != 2 or slices.shape[1] != RADIOLOGY_DIM:
        raise ValueError(f"radiology slices must be (n, {RADIOLOGY_DIM}), got {slices.shape}")
    proj = projector.apply(Tensor(slices))
    d = proj.data.shape[1]
    if positional:
        proj = ad.add(proj, Tensor(positional_matrix(len(slices), d)))
    return TokenSet("R", proj, ordered=True,
                    source_ids=[str(i) for i in range(len(slices))])


def tokenize_pathology(patches: np.ndarray, projector: ProjectionStack,
                       patch_ids: Optional[list[str]] = None) -> TokenSet:
    """token_i = projection(patch_i); an unordered bag, no positional term."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[1] != PATHOLOGY_DIM:
        raise ValueError(f"pathology patches must be (n, {PATHOLOGY_DIM}), got {patches.shape}")
    if len(patches) < 1:
        raise ValueError("pathology bag is empty")
    ids = patch_ids if patch_ids is not None else [f"p{i:04d}" for i in range(len(patches))]
    return TokenSet("P", projector.apply(Tensor(patches)), ordered=False, source_ids=ids)
