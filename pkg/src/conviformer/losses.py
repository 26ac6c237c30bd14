"""Training objectives: cross-entropy, triplet, hierarchical and phylogenetic losses.

``combined_loss`` dispatches on a mode string:

==============  ==============================================================
``ce``          taxon cross-entropy
``ce+trip``     taxon cross-entropy + lambda3 * taxon-level triplet on emb_tax
``hier``        ce_tax + lambda1 * ce_gen + lambda2 * ce_fam
``hier+trip``   hier + lambda3/4/5 * triplet on emb_tax/gen/fam, one shared
                set of triplets mined at ``level`` (genus by default)
``hier+phylo``  hier + lambda_dist * phylogenetic distance regression on emb_gen
==============  ==============================================================

Terms a batch cannot support (no valid triplet, a single genus) are zero and
counted in the optional ``stats`` Counter instead of raising mid-training.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError, LabelError, SamplingError
from .labels import LEVELS, Hierarchy, HierLabels
from .tensor import Tensor

log = logging.getLogger(__name__)

LOSS_MODES = ("ce", "ce+trip", "hier", "hier+trip", "hier+phylo")
MINING = ("random", "all")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    lambda5: float = 1.0
    alpha: float = 1.0
    p: float = 2.0
    lambda_dist: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be >= 0")
        if self.p < 1:
            raise ConfigError("norm order p must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PhyloMatrix:
    """Symmetric, non-negative genus-by-genus distance matrix with a zero diagonal."""

    d: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise DimensionError(f"phylo matrix must be square, got {d.shape}")
        if not np.isfinite(d).all() or (d < 0).any():
            raise ConfigError("phylo distances must be finite and non-negative")
        if not np.array_equal(d, d.T):
            raise ConfigError("phylo matrix must be symmetric")
        if (np.diag(d) != 0).any():
            raise ConfigError("phylo matrix must have a zero diagonal")
        d = d.copy()
        d.setflags(write=False)
        object.__setattr__(self, "d", d)

    @property
    def n_genus(self) -> int:
        return self.d.shape[0]

    def save(self, path) -> None:
        np.savetxt(path, self.d, fmt="%.17g")

    @classmethod
    def load(cls, path) -> "PhyloMatrix":
        return cls(np.atleast_2d(np.loadtxt(Path(path), dtype=np.float64)))


def _zero(like: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=like.dtype))


def _skip(stats: Optional[Counter], key: str, why: str) -> None:
    if stats is not None:
        stats[key] += 1
    log.info("skipping %s: %s", key, why)


# ---------------------------------------------------------------- primitives


def cross_entropy(logits: Tensor, targets, class_weights=None) -> Tensor:
    """Mean over the batch of ``-w[y] * log softmax(logits)[y]``."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (N, C), got {logits.shape}")
    n, c = logits.shape
    y = np.asarray(targets, dtype=np.int64)
    if y.shape != (n,):
        raise DimensionError(f"expected {n} targets, got shape {y.shape}")
    if n == 0:
        raise DimensionError("cross_entropy on an empty batch")
    if y.min() < 0 or y.max() >= c:
        raise LabelError(f"target id out of range [0, {c})")
    picked = ops.getitem(ops.log_softmax(logits, axis=1), (np.arange(n), y))
    if class_weights is not None:
        w = np.asarray(class_weights, dtype=logits.dtype)
        if w.shape != (c,):
            raise DimensionError(f"class weights must have shape ({c},), got {w.shape}")
        picked = ops.mul(picked, Tensor(w[y]))
    return ops.neg(ops.mean(picked))


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor, alpha: float = 1.0) -> Tensor:
    """Mean over the batch of ``max(alpha + |a - p|^2 - |a - n|^2, 0)``."""
    if not anchor.shape == positive.shape == negative.shape or anchor.ndim != 2:
        raise DimensionError(
            f"triplet inputs must share an (N, D) shape: {anchor.shape}, {positive.shape}, {negative.shape}")
    d_pos = ops.sum(ops.power(ops.sub(anchor, positive), 2.0), axis=1)
    d_neg = ops.sum(ops.power(ops.sub(anchor, negative), 2.0), axis=1)
    return ops.mean(ops.relu(ops.add(ops.sub(d_pos, d_neg), alpha)))


def mine_triplets(labels, rng: Optional[np.random.Generator] = None,
                  strategy: str = "random") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index triples (anchor, positive, negative) from one batch.

    ``random``: every sample that has both a same-label partner and a
    different-label sample is an anchor; its positive and negative are the
    first valid ones in a seeded shuffle of the batch. ``all``: every valid triple.
    """
    lab = np.asarray(labels)
    n = lab.size
    if strategy not in MINING:
        raise ConfigError(f"mining strategy must be one of {MINING}, got {strategy!r}")
    triples = []
    if strategy == "all":
        for a in range(n):
            for p in range(n):
                if p == a or lab[p] != lab[a]:
                    continue
                triples.extend((a, p, q) for q in range(n) if lab[q] != lab[a])
    else:
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for a in range(n):
            same = order[(lab[order] == lab[a]) & (order != a)]
            other = order[lab[order] != lab[a]]
            if same.size and other.size:
                triples.append((a, int(same[0]), int(other[0])))
    if not triples:
        raise SamplingError("batch has no anchor with both a positive and a negative")
    ia, ip, ineg = (np.array(col, dtype=np.int64) for col in zip(*triples))
    return ia, ip, ineg


def phylo_distance_loss(emb_gen: Tensor, genus, phylo: PhyloMatrix, p: float = 2.0,
                        stats: Optional[Counter] = None) -> Tensor:
    """Mean over cross-genus pairs a < b of ``(|e_a - e_b|_p - d[g_a, g_b])^2``."""
    g = np.asarray(genus, dtype=np.int64)
    if emb_gen.ndim != 2 or g.shape != (emb_gen.shape[0],):
        raise DimensionError(f"emb_gen {emb_gen.shape} does not match {g.shape} genus ids")
    if g.size and (g.min() < 0 or g.max() >= phylo.n_genus):
        raise LabelError(f"genus id out of range [0, {phylo.n_genus})")
    ia, ib = np.triu_indices(g.size, k=1)
    keep = g[ia] != g[ib]
    ia, ib = ia[keep], ib[keep]
    if ia.size == 0:
        _skip(stats, "phylo_skipped", "batch holds a single genus")
        return _zero(emb_gen)
    diff = ops.sub(ops.getitem(emb_gen, ia), ops.getitem(emb_gen, ib))
    target = Tensor(phylo.d[g[ia], g[ib]].astype(emb_gen.dtype))
    return ops.mean(ops.power(ops.sub(ops.pnorm(diff, p=p, axis=-1), target), 2.0))


# ---------------------------------------------------------------- compositions


def _ce_terms(outputs: dict, labels: HierLabels, w: LossWeights, hierarchical: bool,
              class_weights=None) -> dict[str, Tensor]:
    terms = {"ce_tax": cross_entropy(outputs["label_tax"], labels.taxon, class_weights)}
    if hierarchical:
        for key, head, ids, lam in (("ce_gen", "label_gen", labels.genus, w.lambda1),
                                    ("ce_fam", "label_fam", labels.family, w.lambda2)):
            if head not in outputs:
                raise ConfigError(f"hierarchical loss needs the {head} head")
            terms[key] = ops.mul(cross_entropy(outputs[head], ids), lam)
    return terms


def _triplet_terms(outputs: dict, labels: HierLabels, level: str, w: LossWeights, heads: tuple[str, ...],
                   rng, strategy: str, stats: Optional[Counter]) -> dict[str, Tensor]:
    lams = {"tax": w.lambda3, "gen": w.lambda4, "fam": w.lambda5}
    try:
        ia, ip, ineg = mine_triplets(labels.level(level), rng, strategy)
    except SamplingError as exc:
        _skip(stats, "triplet_skipped", str(exc))
        return {f"trip_{h}": _zero(outputs[f"emb_{h}"]) for h in heads}
    terms = {}
    for h in heads:
        e = outputs[f"emb_{h}"]
        t = triplet_loss(ops.getitem(e, ia), ops.getitem(e, ip), ops.getitem(e, ineg), w.alpha)
        terms[f"trip_{h}"] = ops.mul(t, lams[h])
    return terms


def _sum(terms: dict[str, Tensor]) -> Tensor:
    total = None
    for t in terms.values():
        total = t if total is None else ops.add(total, t)
    return total


def hierarchical_ce(outputs: dict, labels: HierLabels, weights: LossWeights = LossWeights(),
                    hierarchy: Optional[Hierarchy] = None, class_weights=None) -> Tensor:
    """``ce_tax + lambda1 * ce_gen + lambda2 * ce_fam``."""
    labels.check(hierarchy)
    return _sum(_ce_terms(outputs, labels, weights, True, class_weights))


def hierarchical_triplet(outputs: dict, labels: HierLabels, level: str = "genus",
                         weights: LossWeights = LossWeights(), rng: Optional[np.random.Generator] = None,
                         hierarchy: Optional[Hierarchy] = None, stats: Optional[Counter] = None,
                         strategy: str = "random", class_weights=None) -> Tensor:
    """Hierarchical CE plus triplet terms on all three embedding heads."""
    labels.check(hierarchy)
    terms = _ce_terms(outputs, labels, weights, True, class_weights)
    terms.update(_triplet_terms(outputs, labels, level, weights, ("tax", "gen", "fam"), rng, strategy, stats))
    return _sum(terms)


def loss_terms(mode: str, outputs: dict, labels: HierLabels, weights: LossWeights = LossWeights(), *,
               phylo: Optional[PhyloMatrix] = None, level: Optional[str] = None,
               rng: Optional[np.random.Generator] = None, hierarchy: Optional[Hierarchy] = None,
               stats: Optional[Counter] = None, strategy: str = "random",
               class_weights=None) -> dict[str, Tensor]:
    """Weighted contributions of every term of ``mode``, in summation order."""
    if mode not in LOSS_MODES:
        raise ConfigError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
    if level is not None and level not in LEVELS:
        raise ConfigError(f"sampling level must be one of {LEVELS}, got {level!r}")
    hierarchical = mode.startswith("hier")
    if hierarchical:
        labels.check(hierarchy)
    terms = _ce_terms(outputs, labels, weights, hierarchical, class_weights)
    if mode == "ce+trip":
        terms.update(_triplet_terms(outputs, labels, level or "taxon", weights, ("tax",), rng, strategy, stats))
    elif mode == "hier+trip":
        terms.update(_triplet_terms(outputs, labels, level or "genus", weights, ("tax", "gen", "fam"),
                                    rng, strategy, stats))
    elif mode == "hier+phylo":
        if phylo is None:
            raise ConfigError("hier+phylo needs a phylo matrix")
        d = phylo_distance_loss(outputs["emb_gen"], labels.genus, phylo, weights.p, stats)
        terms["dist"] = ops.mul(d, weights.lambda_dist)
    return terms


def combined_loss(mode: str, outputs: dict, labels: HierLabels, weights: LossWeights = LossWeights(),
                  **kw) -> Tensor:
    """Total objective for ``mode``; see :func:`loss_terms` for the keyword options."""
    return _sum(loss_terms(mode, outputs, labels, weights, **kw))
