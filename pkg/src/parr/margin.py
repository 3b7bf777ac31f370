"""Frozen-backbone margin learning for attribute-based retrieval.

Three small adapters map (a) the recognizer's person feature to a visual
embedding, (b) the binary attribute query to the first half of the query
space, and (c) the flattened pseudo-description embedding to the second half.
An angular-margin softmax over person categories pulls each visual embedding
toward its own category's query embeddings; the two query routes contribute a
beta-weighted sum.  The visual embedding is split in halves to pair with the
two routes, since each query head emits dim_vis / 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import queries
from .checkpoint import (
    load_checkpoint,
    module_hash,
    save_checkpoint,
    state_arrays,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DegenerateEmbeddingError,
    TrainingDivergedError,
)
from .queries import (
    DEFAULT_N_W,
    EmbeddingProvider,
    build_pseudo_description,
    hard_embed,
    soft_embed,
    word_query_embedding,
)
from .recognition import _batch_indices
from .schema import AttributeSchema

QUERY_MODES = ("hard", "soft", "word", "hard+soft")


def geometric_hidden(in_dim: int, out_dim: int) -> tuple[int, int]:
    """Two hidden widths interpolating geometrically between the endpoints."""
    h1 = max(1, round(in_dim ** (2 / 3) * out_dim ** (1 / 3)))
    h2 = max(1, round(in_dim ** (1 / 3) * out_dim ** (2 / 3)))
    return h1, h2


@dataclass(frozen=True)
class AdapterConfig:
    in_dim: int
    hidden_dims: tuple[int, int]
    out_dim: int

    @classmethod
    def geometric(cls, in_dim: int, out_dim: int) -> "AdapterConfig":
        return cls(in_dim, geometric_hidden(in_dim, out_dim), out_dim)


class Adapter(nn.Module):
    """Three linear layers, ReLU after the first two only."""

    def __init__(self, cfg: AdapterConfig):
        super().__init__()
        self.cfg = cfg
        h1, h2 = cfg.hidden_dims
        self.l1 = nn.Linear(cfg.in_dim, h1)
        self.l2 = nn.Linear(h1, h2)
        self.l3 = nn.Linear(h2, cfg.out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.cfg.in_dim:
            raise ConfigError(
                f"adapter expects input dim {self.cfg.in_dim}, got {x.shape[-1]}"
            )
        return self.l3(torch.relu(self.l2(torch.relu(self.l1(x)))))


@dataclass(frozen=True)
class MarginParams:
    """Angular-margin softmax knobs.

    The margin gamma (radians) is added inside the cosine for the positive
    logit and, by default, for negatives as well (`margin_on_negatives`);
    the scale is applied once unless `double_scale` asks for the doubled
    variant.  `eps` keeps cosines away from +-1 before arccos; it is floored
    by a dtype-dependent amount at evaluation time.
    """

    scale: float = 16.0
    margin: float = 0.1
    beta1: float = 0.3
    beta2: float = 0.7
    eps: float = 1e-12
    margin_on_negatives: bool = True
    double_scale: bool = False

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")
        if self.margin < 0:
            raise ConfigError(f"margin must be non-negative, got {self.margin}")
        if self.beta1 < 0 or self.beta2 < 0 or self.beta1 + self.beta2 <= 0:
            raise ConfigError(
                f"betas must be non-negative with positive sum, "
                f"got {self.beta1}, {self.beta2}"
            )


def _normalize(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise DegenerateEmbeddingError(f"zero-norm {what} embedding")
    return x / norms


def neg_log_softmax(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """-log softmax(logits) at target, per row; shift-invariant by
    construction (max-subtracted logsumexp)."""
    lse = torch.logsumexp(logits, dim=-1)
    picked = logits.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    return lse - picked


def margin_logits(
    embeddings: torch.Tensor, query_table: torch.Tensor, p: MarginParams
) -> torch.Tensor:
    """sigma * cos(arccos(cos) + gamma) for every (person, category) pair."""
    f = _normalize(embeddings, "person")
    g = _normalize(query_table, "query")
    cos = f @ g.T
    delta = max(p.eps, 8.0 * torch.finfo(cos.dtype).eps)
    theta = torch.arccos(cos.clamp(-1.0 + delta, 1.0 - delta))
    if p.margin_on_negatives:
        base = torch.cos(theta + p.margin)
    else:
        base = torch.cos(theta)
    logits = p.scale * base
    if p.double_scale:
        logits = p.scale * logits
    return logits


def _positive_margin_logits(
    logits: torch.Tensor,
    embeddings: torch.Tensor,
    query_table: torch.Tensor,
    targets: torch.Tensor,
    p: MarginParams,
) -> torch.Tensor:
    """Rebuild only the target-column logits with the margin applied."""
    f = _normalize(embeddings, "person")
    g = _normalize(query_table, "query")[targets]
    cos = (f * g).sum(dim=-1)
    delta = max(p.eps, 8.0 * torch.finfo(cos.dtype).eps)
    theta = torch.arccos(cos.clamp(-1.0 + delta, 1.0 - delta))
    pos = p.scale * torch.cos(theta + p.margin)
    if p.double_scale:
        pos = p.scale * pos
    return logits.scatter(-1, targets.unsqueeze(-1), pos.unsqueeze(-1))


def margin_loss_batch(
    embeddings: torch.Tensor,
    query_table: torch.Tensor,
    targets: torch.Tensor,
    p: MarginParams,
) -> torch.Tensor:
    """Mean -log softmax over category logits at each person's category."""
    n_cat = query_table.shape[0]
    if n_cat < 2:
        raise ConfigError("margin loss needs at least one negative category")
    if (targets < 0).any() or (targets >= n_cat).any():
        raise ValueError("person assigned to unknown category")
    logits = margin_logits(embeddings, query_table, p)
    if not p.margin_on_negatives:
        logits = _positive_margin_logits(logits, embeddings, query_table, targets, p)
    return neg_log_softmax(logits, targets).mean()


def margin_loss(
    f: torch.Tensor,
    g_pos: torch.Tensor,
    g_negs: torch.Tensor,
    p: MarginParams,
) -> torch.Tensor:
    """Single-person form: the positive plus a stack of negatives."""
    g_negs = torch.atleast_2d(g_negs)
    if g_negs.shape[0] == 0:
        raise ConfigError("margin loss needs at least one negative")
    table = torch.cat([g_pos.unsqueeze(0), g_negs], dim=0)
    target = torch.zeros(1, dtype=torch.long)
    return margin_loss_batch(f.unsqueeze(0), table, target, p)


def total_loss(
    person_emb: torch.Tensor,
    hard_table: torch.Tensor,
    soft_table: torch.Tensor,
    assignments: torch.Tensor,
    p: MarginParams,
) -> torch.Tensor:
    """beta1 * hard-route margin loss + beta2 * soft-route margin loss.

    The person embedding's first half pairs with the hard query table and the
    second half with the soft one (each table lives in dim_vis / 2).
    Negatives are all other categories in the tables.
    """
    dim = person_emb.shape[-1]
    if dim % 2:
        raise ConfigError(f"person embedding dim {dim} is not splittable in half")
    if hard_table.shape[-1] != dim // 2 or soft_table.shape[-1] != dim // 2:
        raise ConfigError(
            f"query tables must have dim {dim // 2}, got "
            f"{hard_table.shape[-1]} and {soft_table.shape[-1]}"
        )
    half = dim // 2
    loss = person_emb.new_zeros(())
    if p.beta1 > 0:
        loss = loss + p.beta1 * margin_loss_batch(
            person_emb[..., :half], hard_table, assignments, p
        )
    if p.beta2 > 0:
        loss = loss + p.beta2 * margin_loss_batch(
            person_emb[..., half:], soft_table, assignments, p
        )
    return loss


@dataclass(frozen=True)
class RetrievalHeadsConfig:
    feature_dim: int
    n_attr: int
    n_w: int = DEFAULT_N_W
    dim_w: int = queries.DEFAULT_DIM_W
    dim_vis: int = 512

    def __post_init__(self):
        if self.dim_vis % 2:
            raise ConfigError(f"dim_vis must be even, got {self.dim_vis}")
        for name in ("feature_dim", "n_attr", "n_w", "dim_w"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def dim_query(self) -> int:
        return self.dim_vis // 2

    def to_json_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "n_attr": self.n_attr,
            "n_w": self.n_w,
            "dim_w": self.dim_w,
            "dim_vis": self.dim_vis,
        }


class RetrievalHeads(nn.Module):
    """The three retrieval adapters over a frozen recognizer."""

    def __init__(self, cfg: RetrievalHeadsConfig):
        super().__init__()
        self.cfg = cfg
        self.f_vis = Adapter(AdapterConfig.geometric(cfg.feature_dim, cfg.dim_vis))
        self.f_attr = Adapter(AdapterConfig.geometric(cfg.n_attr, cfg.dim_query))
        self.f_text = Adapter(
            AdapterConfig.geometric(cfg.n_w * cfg.dim_w, cfg.dim_query)
        )

    def encode_person(self, features: torch.Tensor) -> torch.Tensor:
        return self.f_vis(features)


def encode_query(
    schema: AttributeSchema,
    provider: EmbeddingProvider,
    heads: RetrievalHeads,
    query,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns (hard_enc, soft_enc, combined); combined is their concat."""
    hard_vec = torch.as_tensor(hard_embed(schema, query), dtype=torch.float32)
    desc = build_pseudo_description(schema, query, n_w=heads.cfg.n_w)
    soft_vec = torch.as_tensor(soft_embed(desc, provider), dtype=torch.float32)
    hard_enc = heads.f_attr(hard_vec)
    soft_enc = heads.f_text(soft_vec)
    return hard_enc, soft_enc, torch.cat([hard_enc, soft_enc], dim=-1)


def query_vector(
    schema: AttributeSchema,
    provider: EmbeddingProvider,
    heads: RetrievalHeads,
    query,
    mode: str = "hard+soft",
) -> torch.Tensor:
    """A dim_vis search vector for any query mode.

    Single-route modes place their encoding in that route's half and zero the
    other half, so they remain comparable against the same gallery index.
    The word mode tiles the mean surface-word embedding across all word slots
    and reuses the text adapter.
    """
    if mode not in QUERY_MODES:
        raise ConfigError(f"unknown query mode {mode!r}; pick from {QUERY_MODES}")
    dim_q = heads.cfg.dim_query
    if mode == "word":
        mean_vec = word_query_embedding(schema, query, provider)
        tiled = torch.as_tensor(
            np.tile(mean_vec, heads.cfg.n_w), dtype=torch.float32
        )
        enc = heads.f_text(tiled)
        return torch.cat([enc.new_zeros(dim_q), enc], dim=-1)
    hard_enc, soft_enc, combined = encode_query(schema, provider, heads, query)
    if mode == "hard+soft":
        return combined
    if mode == "hard":
        return torch.cat([hard_enc, hard_enc.new_zeros(dim_q)], dim=-1)
    return torch.cat([soft_enc.new_zeros(dim_q), soft_enc], dim=-1)


@dataclass
class CategoryTable:
    """Distinct training attribute vectors, each a person category."""

    vectors: np.ndarray  # (n_cat, n_attr) of 0/1
    _index: dict[tuple[int, ...], int] = field(repr=False, default_factory=dict)

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "CategoryTable":
        vecs = np.unique(np.asarray(labels, dtype=np.int64), axis=0)
        table = cls(vectors=vecs)
        table._index = {tuple(v.tolist()): i for i, v in enumerate(vecs)}
        return table

    @property
    def n_categories(self) -> int:
        return self.vectors.shape[0]

    def category_of(self, bits) -> int:
        key = tuple(int(b) for b in np.asarray(bits).tolist())
        if key not in self._index:
            raise ValueError(f"unknown person category {key}")
        return self._index[key]

    def assignments(self, labels: np.ndarray) -> np.ndarray:
        return np.array([self.category_of(row) for row in labels], dtype=np.int64)

    def raw_query_embeddings(
        self, schema: AttributeSchema, provider: EmbeddingProvider, n_w: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """Pre-adapter (hard, soft) query matrices, one row per category."""
        hard = np.stack([hard_embed(schema, v) for v in self.vectors])
        soft = np.stack(
            [
                soft_embed(build_pseudo_description(schema, v, n_w=n_w), provider)
                for v in self.vectors
            ]
        )
        return hard, soft


def freeze(module: nn.Module) -> nn.Module:
    """Mark every parameter non-trainable and switch to eval mode."""
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


@dataclass
class RetTrainConfig:
    steps: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    margin: MarginParams = field(default_factory=MarginParams)


def train_ret(
    heads: RetrievalHeads,
    features: np.ndarray,
    labels: np.ndarray,
    schema: AttributeSchema,
    provider: EmbeddingProvider,
    cfg: RetTrainConfig,
    on_step=None,
) -> tuple[CategoryTable, list[float]]:
    """Optimize the adapters only; features come from the frozen recognizer.

    Returns the category table used for negatives and the loss curve.
    """
    n = features.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    table = CategoryTable.from_labels(labels)
    if table.n_categories < 2:
        raise ConfigError("need at least two person categories to form negatives")
    hard_raw, soft_raw = table.raw_query_embeddings(schema, provider, heads.cfg.n_w)
    hard_t = torch.as_tensor(hard_raw, dtype=torch.float32)
    soft_t = torch.as_tensor(soft_raw, dtype=torch.float32)
    features_t = torch.as_tensor(features, dtype=torch.float32)
    cats_t = torch.as_tensor(table.assignments(labels))

    optimizer = torch.optim.AdamW(
        heads.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=max(1, cfg.steps)
    )
    heads.train()
    curve: list[float] = []
    for step in range(cfg.steps):
        idx = _batch_indices(n, cfg.batch_size, cfg.seed, step)
        person = heads.f_vis(features_t[idx])
        loss = total_loss(
            person, heads.f_attr(hard_t), heads.f_text(soft_t), cats_t[idx], cfg.margin
        )
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite retrieval loss at step {step}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        scheduler.step()
        curve.append(loss.item())
        if on_step is not None:
            on_step(step + 1, curve[-1])
    return table, curve


def save_heads(
    path,
    heads: RetrievalHeads,
    frozen_backbone_hash: str,
    extra: dict | None = None,
) -> None:
    config = {
        "kind": "retrieval_heads",
        "heads": heads.cfg.to_json_dict(),
        "frozen_backbone_hash": frozen_backbone_hash,
    }
    if extra:
        config.update(extra)
    save_checkpoint(path, state_arrays(heads), config)


def load_heads(
    path, expect_backbone_hash: str | None = None
) -> tuple[RetrievalHeads, dict]:
    from .checkpoint import load_into_module

    config, arrays = load_checkpoint(path)
    if config.get("kind") != "retrieval_heads":
        raise CheckpointError(f"{path} is not a retrieval-heads checkpoint")
    stored = config.get("frozen_backbone_hash")
    if expect_backbone_hash is not None and stored != expect_backbone_hash:
        raise CheckpointError(
            "heads were trained against a different backbone "
            f"(stored {str(stored)[:12]}..., expected {expect_backbone_hash[:12]}...)"
        )
    heads = RetrievalHeads(RetrievalHeadsConfig(**config["heads"]))
    load_into_module(heads, arrays)
    return heads, config


def backbone_feature_matrix(
    backbone: nn.Module, images: np.ndarray, batch_size: int = 64
) -> np.ndarray:
    """Person features for a stack of images, without touching gradients."""
    freeze(backbone)
    chunks = []
    images_t = torch.as_tensor(images, dtype=torch.float32)
    with torch.no_grad():
        for start in range(0, images_t.shape[0], batch_size):
            chunks.append(
                backbone(images_t[start : start + batch_size]).feature.cpu().numpy()
            )
    return np.concatenate(chunks, axis=0)


def verify_frozen(backbone: nn.Module, hash_before: str) -> bool:
    """True iff the backbone's parameters are untouched."""
    return module_hash(backbone) == hash_before
