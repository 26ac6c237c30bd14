"""Taxon -> genus -> family label hierarchy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, LabelError

LEVELS = ("taxon", "genus", "family")


def _ids(a) -> np.ndarray:
    arr = np.asarray(a)
    if arr.ndim != 1 or (arr.size and not np.issubdtype(arr.dtype, np.integer)):
        raise LabelError(f"class ids must be a 1-d integer array, got {arr.dtype} {arr.shape}")
    return arr.astype(np.int64)


@dataclass(frozen=True)
class Hierarchy:
    """Parent maps: ``genus_of_taxon[t]`` and ``family_of_genus[g]``."""

    genus_of_taxon: np.ndarray
    family_of_genus: np.ndarray

    def __post_init__(self):
        gt, fg = _ids(self.genus_of_taxon), _ids(self.family_of_genus)
        if gt.size == 0 or fg.size == 0:
            raise ConfigError("hierarchy needs at least one taxon and one genus")
        if gt.min() < 0 or gt.max() >= fg.size:
            raise ConfigError("genus_of_taxon refers to a genus that does not exist")
        if fg.min() < 0:
            raise ConfigError("family ids must be non-negative")
        if len(np.unique(gt)) != fg.size:
            raise ConfigError("every genus needs at least one taxon")
        if len(np.unique(fg)) != fg.max() + 1:
            raise ConfigError("every family needs at least one genus")
        object.__setattr__(self, "genus_of_taxon", gt)
        object.__setattr__(self, "family_of_genus", fg)

    @property
    def n_taxa(self) -> int:
        return self.genus_of_taxon.size

    @property
    def n_genus(self) -> int:
        return self.family_of_genus.size

    @property
    def n_family(self) -> int:
        return int(self.family_of_genus.max()) + 1

    @classmethod
    def balanced(cls, n_taxa: int, n_genus: int, n_family: int) -> "Hierarchy":
        """Contiguous, near-equal split of taxa into genera and genera into families."""
        if not n_taxa >= n_genus >= n_family >= 1:
            raise ConfigError(f"need n_taxa >= n_genus >= n_family >= 1, got {n_taxa}/{n_genus}/{n_family}")
        return cls(np.arange(n_taxa) * n_genus // n_taxa, np.arange(n_genus) * n_family // n_genus)

    def labels(self, taxa) -> "HierLabels":
        taxa = _ids(taxa)
        if taxa.size and (taxa.min() < 0 or taxa.max() >= self.n_taxa):
            raise LabelError(f"taxon id out of range [0, {self.n_taxa})")
        genus = self.genus_of_taxon[taxa]
        return HierLabels(taxa, genus, self.family_of_genus[genus])


@dataclass(frozen=True)
class HierLabels:
    """Per-sample (taxon, genus, family) ids for a batch."""

    taxon: np.ndarray
    genus: np.ndarray
    family: np.ndarray

    def __post_init__(self):
        t, g, f = _ids(self.taxon), _ids(self.genus), _ids(self.family)
        if not t.size == g.size == f.size:
            raise LabelError("taxon, genus and family arrays must have equal length")
        object.__setattr__(self, "taxon", t)
        object.__setattr__(self, "genus", g)
        object.__setattr__(self, "family", f)

    def __len__(self) -> int:
        return self.taxon.size

    def level(self, name: str) -> np.ndarray:
        if name not in LEVELS:
            raise ConfigError(f"level must be one of {LEVELS}, got {name!r}")
        return getattr(self, name)

    def subset(self, idx) -> "HierLabels":
        return HierLabels(self.taxon[idx], self.genus[idx], self.family[idx])

    def check(self, hierarchy: Hierarchy | None = None) -> None:
        """Raise LabelError unless taxon -> genus -> family is a function.

        Without a hierarchy the check is batch-internal: no taxon appears under
        two genera and no genus under two families.
        """
        if hierarchy is not None:
            for name, ids, n in (("taxon", self.taxon, hierarchy.n_taxa), ("genus", self.genus, hierarchy.n_genus),
                                 ("family", self.family, hierarchy.n_family)):
                if ids.size and (ids.min() < 0 or ids.max() >= n):
                    raise LabelError(f"{name} id out of range [0, {n})")
            bad = np.flatnonzero(hierarchy.genus_of_taxon[self.taxon] != self.genus)
            if bad.size:
                i = int(bad[0])
                raise LabelError(f"sample {i}: taxon {self.taxon[i]} belongs to genus "
                                 f"{hierarchy.genus_of_taxon[self.taxon[i]]}, labelled {self.genus[i]}")
            bad = np.flatnonzero(hierarchy.family_of_genus[self.genus] != self.family)
            if bad.size:
                i = int(bad[0])
                raise LabelError(f"sample {i}: genus {self.genus[i]} belongs to family "
                                 f"{hierarchy.family_of_genus[self.genus[i]]}, labelled {self.family[i]}")
            return
        for child, parent, cname in ((self.taxon, self.genus, "taxon"), (self.genus, self.family, "genus")):
            seen: dict[int, int] = {}
            for c, p in zip(child.tolist(), parent.tolist()):
                if seen.setdefault(c, p) != p:
                    raise LabelError(f"{cname} {c} appears under two parents ({seen[c]} and {p})")
