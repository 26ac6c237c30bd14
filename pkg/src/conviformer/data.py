"""Procedural long-tailed, hierarchically labelled image dataset.

Each image carries one cue per level of the hierarchy:

* family: low-frequency background stripes (orientation, frequency, tint);
* genus: a large coloured shape;
* taxon: a 4x4 binary glyph with exactly 8 lit pixels, printed inside a
  white label tile at a 4-aligned position.

Because every glyph has the same number of lit pixels and sits on a 4-pixel
grid, 4x area downsampling maps every glyph to the same flat grey block. The
taxon is then only recoverable through the genus prior, so accuracy depends on
input resolution.
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import yaml

from .errors import ConfigError, DimensionError
from .labels import Hierarchy, HierLabels
from .losses import PhyloMatrix
from .presizer import RasterImage, read_ppm, write_ppm
from .rng import stream

GLYPH = 4
LIT = 8


@dataclass(frozen=True)
class SynthSpec:
    n_family: int = 4
    n_genus: int = 12
    n_taxa: int = 36
    img_size: int = 128
    samples_per_taxon: tuple = (7, 100)
    zipf_exponent: float = 1.2
    noise_std: float = 6.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "samples_per_taxon", tuple(int(v) for v in self.samples_per_taxon))
        lo, hi = self.samples_per_taxon
        if not self.n_taxa >= self.n_genus >= self.n_family >= 1:
            raise ConfigError(f"need n_taxa >= n_genus >= n_family >= 1, got "
                              f"{self.n_taxa}/{self.n_genus}/{self.n_family}")
        if lo < 3 or hi < lo:
            raise ConfigError(f"samples_per_taxon must satisfy 3 <= min <= max, got {self.samples_per_taxon}")
        if self.img_size < 32 or self.img_size % GLYPH:
            raise ConfigError(f"img_size must be a multiple of {GLYPH} and >= 32, got {self.img_size}")
        if self.zipf_exponent < 0 or self.noise_std < 0:
            raise ConfigError("zipf_exponent and noise_std must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["samples_per_taxon"] = list(self.samples_per_taxon)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SynthSpec":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        return cls.from_dict(data.get("data", data))

    @property
    def hierarchy(self) -> Hierarchy:
        return Hierarchy.balanced(self.n_taxa, self.n_genus, self.n_family)


# ---------------------------------------------------------------- long tail


def taxon_counts(spec: SynthSpec) -> np.ndarray:
    """Per-taxon sample counts: ``max * rank^-s`` rounded and clipped to [min, max].

    Ranks are assigned to taxa by a seeded permutation, so the head classes are
    spread over genera.
    """
    lo, hi = spec.samples_per_taxon
    rank = stream(spec.seed, "counts").permutation(spec.n_taxa) + 1
    return np.clip(np.round(hi * rank.astype(np.float64) ** -spec.zipf_exponent), lo, hi).astype(np.int64)


def top_decile_share(counts) -> float:
    """Fraction of samples held by the ceil(10%) most frequent classes."""
    c = np.sort(np.asarray(counts))[::-1]
    k = math.ceil(0.1 * c.size)
    return float(c[:k].sum() / c.sum())


# ---------------------------------------------------------------- glyphs


def glyph_bank(n: int, seed: int = 0) -> np.ndarray:
    """``n`` distinct 4x4 patterns with 8 lit pixels, greedily kept far apart in Hamming distance."""
    cells = GLYPH * GLYPH
    patterns = np.zeros((math.comb(cells, LIT), cells), dtype=bool)
    for i, lit in enumerate(itertools.combinations(range(cells), LIT)):
        patterns[i, list(lit)] = True
    if n > len(patterns):
        raise ConfigError(f"only {len(patterns)} distinct glyphs exist, {n} requested")
    patterns = patterns[stream(seed, "glyphs").permutation(len(patterns))]
    for min_dist in (8, 6, 4, 2):
        chosen = []
        for p in patterns:
            if all(np.count_nonzero(p != q) >= min_dist for q in chosen):
                chosen.append(p)
                if len(chosen) == n:
                    return np.array(chosen).reshape(n, GLYPH, GLYPH)
    raise AssertionError("unreachable: distance 2 admits every pattern")


# ---------------------------------------------------------------- rendering


@dataclass(frozen=True)
class _Style:
    family_tint: np.ndarray  # (F, 3)
    family_phase: np.ndarray  # (F,)
    genus_color: np.ndarray  # (G, 3)
    glyphs: np.ndarray  # (T, 4, 4) bool


def _style(spec: SynthSpec) -> _Style:
    rng = stream(spec.seed, "style")
    return _Style(
        family_tint=rng.uniform(60, 190, (spec.n_family, 3)),
        family_phase=rng.uniform(0, 2 * np.pi, spec.n_family),
        genus_color=rng.uniform(0, 255, (spec.n_genus, 3)),
        glyphs=glyph_bank(spec.n_taxa, spec.seed),
    )


def label_tile_origin(img_size: int) -> int:
    """Top-left row/column of the 12x12 label tile; the glyph starts 4 pixels further in."""
    return img_size - 4 * GLYPH


def _shape_mask(kind: int, S: int) -> np.ndarray:
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64) + 0.5
    cy = cx = 0.4 * S
    r = 0.22 * S
    dy, dx = yy - cy, xx - cx
    if kind == 0:
        return dy * dy + dx * dx <= r * r
    if kind == 1:
        return (np.abs(dy) <= 0.85 * r) & (np.abs(dx) <= 0.85 * r)
    if kind == 2:
        return np.abs(dy) + np.abs(dx) <= 1.15 * r
    if kind == 3:
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == 4:
        return ((np.abs(dy) <= 0.3 * r) | (np.abs(dx) <= 0.3 * r)) & (np.abs(dy) <= r) & (np.abs(dx) <= r)
    return (dy <= 0.8 * r) & (dy >= -r + 2 * np.abs(dx))  # triangle


N_SHAPES = 6


def render(spec: SynthSpec, taxon: int, index: int, style: Optional[_Style] = None) -> np.ndarray:
    """The ``index``-th sample of ``taxon`` as an (S, S, 3) uint8 array."""
    style = style or _style(spec)
    h = spec.hierarchy
    genus = int(h.genus_of_taxon[taxon])
    family = int(h.family_of_genus[genus])
    S = spec.img_size
    rng = stream(spec.seed, "sample", taxon, index)

    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    theta = np.pi * family / spec.n_family
    freq = 1.5 + family
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) / S + style.family_phase[family])
    img = style.family_tint[family] + 40.0 * wave[..., None]

    mask = _shape_mask(genus % N_SHAPES, S)
    img[mask] = style.genus_color[genus] + rng.uniform(-12, 12, 3)

    t0 = label_tile_origin(S)
    img[t0:t0 + 3 * GLYPH, t0:t0 + 3 * GLYPH] = 255.0
    g0 = t0 + GLYPH
    patch = img[g0:g0 + GLYPH, g0:g0 + GLYPH]
    patch[style.glyphs[taxon]] = 0.0

    img += rng.normal(0.0, spec.noise_std, img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- dataset


@dataclass
class SynthDataset:
    images: np.ndarray  # (N, S, S, 3) uint8
    labels: HierLabels
    hierarchy: Hierarchy

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[3] != 3 or self.images.dtype != np.uint8:
            raise DimensionError(f"images must be (N, S, S, 3) uint8, got {self.images.dtype} {self.images.shape}")
        if len(self.labels) != self.images.shape[0]:
            raise DimensionError("one label per image required")
        self.labels.check(self.hierarchy)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def img_size(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "SynthDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SynthDataset(self.images[idx], self.labels.subset(idx), self.hierarchy)

    def class_counts(self, level: str = "taxon") -> np.ndarray:
        n = {"taxon": self.hierarchy.n_taxa, "genus": self.hierarchy.n_genus,
             "family": self.hierarchy.n_family}[level]
        return np.bincount(self.labels.level(level), minlength=n)

    def downsample(self, factor: int) -> "SynthDataset":
        """Area-average ``factor x factor`` blocks (round half up)."""
        if factor == 1:
            return self
        N, S = self.images.shape[:2]
        if S % factor:
            raise DimensionError(f"image size {S} is not divisible by {factor}")
        blocks = self.images.reshape(N, S // factor, factor, S // factor, factor, 3).astype(np.float64)
        small = np.floor(blocks.mean(axis=(2, 4)) + 0.5).astype(np.uint8)
        return SynthDataset(small, self.labels, self.hierarchy)

    def degrade(self, factor: int) -> "SynthDataset":
        """Area downsample then nearest upsample back to the original size."""
        small = self.downsample(factor).images
        return SynthDataset(small.repeat(factor, axis=1).repeat(factor, axis=2), self.labels, self.hierarchy)

    def restrict(self, taxa: Sequence[int]) -> "SynthDataset":
        """Samples of the given taxa, relabelled to a compact hierarchy (taxa keep the given order)."""
        taxa = np.asarray(taxa, dtype=np.int64)
        genera = np.unique(self.hierarchy.genus_of_taxon[taxa])
        families = np.unique(self.hierarchy.family_of_genus[genera])
        t_map = {int(t): i for i, t in enumerate(taxa)}
        g_map = {int(g): i for i, g in enumerate(genera)}
        f_map = {int(f): i for i, f in enumerate(families)}
        h = Hierarchy(np.array([g_map[int(self.hierarchy.genus_of_taxon[t])] for t in taxa]),
                      np.array([f_map[int(self.hierarchy.family_of_genus[g])] for g in genera]))
        idx = np.flatnonzero(np.isin(self.labels.taxon, taxa))
        new_taxa = np.array([t_map[int(t)] for t in self.labels.taxon[idx]], dtype=np.int64)
        return SynthDataset(self.images[idx], h.labels(new_taxa), h)

    def split(self, test_fraction: float = 0.3, seed: int = 0) -> tuple["SynthDataset", "SynthDataset"]:
        """Stratified by taxon; each taxon with >= 2 samples puts at least one in each part."""
        if not 0 < test_fraction < 1:
            raise ConfigError("test_fraction must be in (0, 1)")
        rng = stream(seed, "split")
        train, test = [], []
        for t in range(self.hierarchy.n_taxa):
            idx = np.flatnonzero(self.labels.taxon == t)
            if idx.size == 0:
                continue
            idx = idx[rng.permutation(idx.size)]
            k = min(max(1, round(test_fraction * idx.size)), idx.size - 1) if idx.size >= 2 else 0
            test.extend(idx[:k].tolist())
            train.extend(idx[k:].tolist())
        return self.subset(np.sort(train)), self.subset(np.sort(test))

    # ------------------------------------------------------------ files

    def save(self, out_dir) -> Path:
        """PPM per sample plus ``manifest.csv`` (path, family, genus, taxon) and ``hierarchy.yaml``."""
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        with open(out / "manifest.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "family", "genus", "taxon"])
            for i in range(len(self)):
                rel = f"images/{i:06d}.ppm"
                write_ppm(RasterImage(self.images[i]), out / rel)
                w.writerow([rel, int(self.labels.family[i]), int(self.labels.genus[i]), int(self.labels.taxon[i])])
        with open(out / "hierarchy.yaml", "w") as fh:
            yaml.safe_dump({"genus_of_taxon": self.hierarchy.genus_of_taxon.tolist(),
                            "family_of_genus": self.hierarchy.family_of_genus.tolist()}, fh)
        return out / "manifest.csv"

    @classmethod
    def load(cls, data_dir) -> "SynthDataset":
        root = Path(data_dir)
        with open(root / "hierarchy.yaml") as fh:
            h = yaml.safe_load(fh)
        hierarchy = Hierarchy(np.array(h["genus_of_taxon"]), np.array(h["family_of_genus"]))
        images, rows = [], []
        with open(root / "manifest.csv", newline="") as fh:
            for rec in csv.DictReader(fh):
                images.append(read_ppm(root / rec["path"]).data)
                rows.append((int(rec["taxon"]), int(rec["genus"]), int(rec["family"])))
        if not rows:
            raise ConfigError(f"{root}: manifest lists no samples")
        t, g, f = (np.array(c, dtype=np.int64) for c in zip(*rows))
        return cls(np.stack(images), HierLabels(t, g, f), hierarchy)


def generate(spec: SynthSpec, workers: int = 1) -> SynthDataset:
    """Render the whole dataset; a pure function of ``spec`` (including its seed).

    ``workers`` > 1 renders taxa on a thread pool; the result is identical.
    """
    style = _style(spec)
    counts = taxon_counts(spec)

    def one_taxon(t: int) -> np.ndarray:
        return np.stack([render(spec, t, i, style) for i in range(int(counts[t]))])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_taxon = list(pool.map(one_taxon, range(spec.n_taxa)))
    else:
        per_taxon = [one_taxon(t) for t in range(spec.n_taxa)]
    taxa = np.repeat(np.arange(spec.n_taxa), counts)
    h = spec.hierarchy
    return SynthDataset(np.concatenate(per_taxon), h.labels(taxa), h)


# ---------------------------------------------------------------- phylogeny


def phylo_matrix(hierarchy: Hierarchy, seed: int = 0) -> PhyloMatrix:
    """Ultrametric genus distances from a random binary tree that respects families.

    Genera of one family merge at heights in (0, 1); families merge at heights
    in (1, 2). The distance between two genera is twice the height at which
    they first share an ancestor.
    """
    G = hierarchy.n_genus
    if G < 2:
        raise ConfigError("a phylo matrix needs at least two genera")
    rng = stream(seed, "phylo")
    d = np.zeros((G, G))

    def agglomerate(clusters: list[list[int]], lo: float, hi: float) -> list[int]:
        heights = np.sort(rng.uniform(lo, hi, max(len(clusters) - 1, 0)))
        clusters = [list(c) for c in clusters]
        for h in heights:
            i, j = sorted(rng.choice(len(clusters), size=2, replace=False).tolist())
            a, b = clusters[i], clusters.pop(j)
            for x in a:
                for y in b:
                    d[x, y] = d[y, x] = 2.0 * h
            clusters[i] = a + b
        return clusters[0]

    fam_clusters = []
    for f in range(hierarchy.n_family):
        genera = np.flatnonzero(hierarchy.family_of_genus == f).tolist()
        fam_clusters.append(agglomerate([[g] for g in genera], 0.05, 0.95))
    agglomerate(fam_clusters, 1.05, 1.95)
    return PhyloMatrix(d)


# ---------------------------------------------------------------- batching


def has_valid_triplet(labels: np.ndarray) -> bool:
    _, counts = np.unique(labels, return_counts=True)
    return counts.size >= 2 and bool((counts >= 2).any())


def triplet_batches(labels: HierLabels, level: str, batch_size: int, seed: int, n_batches: Optional[int] = None,
                    epoch: int = 0) -> Iterator[np.ndarray]:
    """Index batches that each contain at least one valid (anchor, positive, negative) triple.

    Batches are consecutive chunks of a seeded permutation (one per epoch,
    starting at ``epoch``); a chunk with no valid triple gets two same-label
    samples and one different-label sample swapped in at its front.
    ``n_batches=None`` yields exactly one epoch.
    """
    lab = labels.level(level)
    N = lab.size
    if batch_size < 3:
        raise ConfigError("triplet batches need batch_size >= 3")
    if not has_valid_triplet(lab):
        raise ConfigError(f"no valid triplet exists at the {level} level")
    classes, counts = np.unique(lab, return_counts=True)
    eligible = classes[counts >= 2]
    emitted = 0
    while True:
        rng = stream(seed, "triplet_batches", level, epoch)
        perm = rng.permutation(N)
        chunks = [perm[i:i + batch_size] for i in range(0, N, batch_size)]
        if len(chunks) > 1 and chunks[-1].size < 3:
            tail = chunks.pop()
            chunks[-1] = np.concatenate([chunks[-1], tail])
        for chunk in chunks:
            if not has_valid_triplet(lab[chunk]):
                c = rng.choice(eligible)
                m1, m2 = rng.choice(np.flatnonzero(lab == c), size=2, replace=False)
                q = rng.choice(np.flatnonzero(lab != c))
                front = [int(m1), int(m2), int(q)]
                rest = [int(i) for i in chunk if int(i) not in front]
                chunk = np.array(front + rest[:max(chunk.size, 3) - 3], dtype=np.int64)
            yield chunk
            emitted += 1
            if n_batches is not None and emitted >= n_batches:
                return
        if n_batches is None:
            return
        epoch += 1


def to_input(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 (N, S, S, 3) -> normalised float (N, 3, S, S) in roughly [-2, 2]."""
    f = np.dtype(dtype).type
    x = images.astype(f).transpose(0, 3, 1, 2)
    return np.ascontiguousarray((x / f(255.0) - f(0.5)) / f(0.25))
