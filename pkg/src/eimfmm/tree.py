"""Uniform 2^D-ary box hierarchy over a cube.

Alongside point binning, this module owns the per-level reference geometry
the far-field operators are built on: a source box recentered at the
origin, and the hollow "far region" holding every well-separated translate.
Well-separation is the integer criterion (Chebyshev index distance >= 2),
so no floating-point tie cases exist in any list.
"""

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .eim import TrainingSet


@dataclass(frozen=True)
class TreeConfig:
    """Cube domain of a given side around a center, cut to uniform depth."""

    dimension: int = 3
    side: float = 1.0
    depth: int = 4
    center: tuple = None

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be at least 1")
        if not (self.side > 0.0):
            raise ValueError("side must be positive")
        if self.depth < 2:
            # Levels 0 and 1 have no well-separated boxes, so a shallower
            # tree has an empty far field and nothing to accelerate.
            raise ValueError("depth must be at least 2")
        if self.center is None:
            c = np.zeros(self.dimension)
        else:
            c = np.asarray(self.center, dtype=float)
        if c.shape != (self.dimension,):
            raise ValueError("center must have one coordinate per dimension")
        object.__setattr__(self, "center", tuple(float(v) for v in c))

    def half_width(self, level):
        """Half side of a level-k box: side / 2^(k+1)."""
        return self.side / float(2 ** (level + 1))

    def center_array(self):
        return np.asarray(self.center, dtype=float)


@dataclass(frozen=True)
class LevelGeometry:
    """Reference domains of one level, translated to the origin.

    The source box is the cube [-half_width, half_width]^D.  The far region
    is the closed cube of bound far_outer minus the open cube of bound
    far_inner; it contains the recentered position of every point of every
    well-separated same-level box.
    """

    level: int
    dimension: int
    half_width: float
    far_outer: float   # side - half_width
    far_inner: float   # 3 * half_width, open exclusion bound

    def in_source_box(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.max(np.abs(pts), axis=1) <= self.half_width

    def in_far_region(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        m = np.max(np.abs(pts), axis=1)
        return (m <= self.far_outer) & (m >= self.far_inner)


def level_geometry(config, level):
    """Per-level reference geometry; valid for 0 <= level <= depth."""
    if not (0 <= level <= config.depth):
        raise ValueError(f"level {level} outside 0..{config.depth}")
    half = config.half_width(level)
    return LevelGeometry(
        level=level,
        dimension=config.dimension,
        half_width=half,
        far_outer=config.side - half,
        far_inner=3.0 * half,
    )


def _tensor_grid(coords, dimension):
    axes = np.meshgrid(*([coords] * dimension), indexing="ij")
    return np.stack([a.ravel() for a in axes], axis=1)


def _unrank_hollow(ranks, n, lo, hi, dimension):
    """Multi-indices at the given ranks of the row-major enumeration of
    {0..n-1}^dimension with the block [lo, hi)^dimension removed."""
    t = np.asarray(ranks, dtype=np.int64).copy()
    m = hi - lo
    out = np.empty((t.size, dimension), dtype=np.int64)
    inside = np.ones(t.size, dtype=bool)  # prefix digits all in [lo, hi)
    for pos in range(dimension):
        s = dimension - pos - 1
        full = n**s
        kept = full - m**s
        first = lo * full
        second = first + m * kept
        dig = np.empty(t.size, dtype=np.int64)
        free = ~inside | (inside & (t < first))
        mid = inside & ~free & (t < second)
        high = inside & ~free & ~mid
        dig[free] = t[free] // full
        t[free] -= dig[free] * full
        if kept > 0:
            dig[mid] = lo + (t[mid] - first) // kept
            t[mid] = (t[mid] - first) % kept
        dig[high] = hi + (t[high] - second) // full
        t[high] = (t[high] - second) % full
        out[:, pos] = dig
        inside = inside & (dig >= lo) & (dig < hi)
    return out


def _thin_ranks(total, take):
    take = min(int(take), int(total))
    return (np.arange(take, dtype=np.int64) * int(total)) // take


def training_grids(geometry, resolution, x_budget=8192):
    """Cell-centered candidate grids for the greedy node searches.

    The source-box grid has resolution^D points strictly inside the box.
    The far-region grid reuses the same spacing over the hollow lattice,
    split in two zones thinned separately (the lattice at deep levels is
    far too large to materialize, let alone train on):

    * the transfer shell, max-norm distance up to 7 half-widths, where the
      kernel varies fastest and all same-level transfers live, gets the
      full budget.  Its relative site pattern is identical at every level,
      so a scale-invariant kernel sees the same training problem per level.
    * the remaining outer zone (empty at level 2) gets a quarter budget;
      the kernel restricted there is far smoother, but the upward/downward
      recursions still evaluate the interpolants there.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    if x_budget < 1:
        raise ValueError("x_budget must be positive")
    dim = geometry.dimension
    half = geometry.half_width
    spacing = 2.0 * half / resolution
    ycoords = -half + (np.arange(resolution) + 0.5) * spacing
    points_y = _tensor_grid(ycoords, dim)

    n = int(round(2.0 * geometry.far_outer / spacing))
    xcoords = -geometry.far_outer + (np.arange(n) + 0.5) * spacing
    interior = np.abs(xcoords) < geometry.far_inner
    if interior.all():
        raise ValueError(f"level {geometry.level} has no far region")
    lo3 = int(np.argmax(interior)) if interior.any() else 0
    hi3 = lo3 + int(interior.sum())
    shell = np.abs(xcoords) < 7.0 * half
    lo7 = int(np.argmax(shell))
    hi7 = lo7 + int(shell.sum())

    n_shell = hi7 - lo7
    shell_total = n_shell**dim - (hi3 - lo3) ** dim
    ranks = _thin_ranks(shell_total, x_budget)
    idx = _unrank_hollow(ranks, n_shell, lo3 - lo7, hi3 - lo7, dim) + lo7

    outer_total = n**dim - n_shell**dim
    if outer_total > 0:
        ranks = _thin_ranks(outer_total, max(1, x_budget // 4))
        outer_idx = _unrank_hollow(ranks, n, lo7, hi7, dim)
        idx = np.concatenate([idx, outer_idx])
    return TrainingSet(xcoords[idx], points_y)


@dataclass(frozen=True)
class BoxId:
    """A box named by its level and per-coordinate index."""

    level: int
    multi_index: tuple


@lru_cache(maxsize=None)
def child_offsets(dimension):
    """All 2^D child bit patterns in row-major order; index is the parity rank."""
    return np.asarray(list(itertools.product((0, 1), repeat=dimension)), dtype=np.int64)


def parity_rank(multi):
    """Row-major rank of a box's parity pattern among the 2^D children."""
    multi = np.asarray(multi, dtype=np.int64)
    dim = multi.shape[-1]
    weights = 1 << np.arange(dim - 1, -1, -1, dtype=np.int64)
    return (multi & 1) @ weights


@lru_cache(maxsize=None)
def transfer_offsets(dimension):
    """Distinct transfer offsets: integer vectors in [-3,3]^D with Chebyshev
    norm >= 2, in row-major order.  There are 7^D - 3^D of them."""
    cube = np.asarray(
        list(itertools.product(range(-3, 4), repeat=dimension)), dtype=np.int64
    )
    return cube[np.max(np.abs(cube), axis=1) >= 2]


@lru_cache(maxsize=None)
def _transfer_index_table(dimension):
    return {tuple(off): i for i, off in enumerate(transfer_offsets(dimension))}


def transfer_index(delta):
    """Canonical index of an integer offset among transfer_offsets."""
    table = _transfer_index_table(len(delta))
    try:
        return table[tuple(int(c) for c in delta)]
    except KeyError:
        raise ValueError(f"{tuple(delta)} is not a valid transfer offset") from None


def box_center(config, box):
    """Analytic center of a box; exact dyadic arithmetic for a dyadic side."""
    multi = np.asarray(box.multi_index, dtype=np.int64)
    half = config.half_width(box.level)
    return config.center_array() + ((2 * multi + 1) * half - 0.5 * config.side)


class Tree:
    """Immutable spatial index of one point set under a TreeConfig.

    Points are sorted by leaf once at build time; every per-box pass then
    reads contiguous slices.  Occupied boxes of every level are kept as
    sorted flat-index arrays (ancestors of occupied leaves).
    """

    def __init__(self, points, config):
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[np.newaxis, :]
        if points.ndim != 2 or points.shape[1] != config.dimension:
            raise ValueError(
                f"points must have shape (n, {config.dimension}), got {points.shape}"
            )
        shifted = points - config.center_array()
        half_side = 0.5 * config.side
        # The closed cube is accepted; exact upper-boundary points clamp into
        # the last cell so the leaves always partition the input.
        outside = np.abs(shifted) > half_side
        if outside.any():
            i = int(np.nonzero(outside.any(axis=1))[0][0])
            raise ValueError(
                f"point {i} at {points[i].tolist()} lies outside the domain cube"
            )
        nleaf = 2**config.depth
        cell = config.side / nleaf
        leaf_multi = np.floor((shifted + half_side) / cell).astype(np.int64)
        np.clip(leaf_multi, 0, nleaf - 1, out=leaf_multi)

        self.config = config
        self.points = points
        self.shifted = shifted
        self.leaf_multi = leaf_multi

        flat = self._ravel(leaf_multi, config.depth)
        order = np.argsort(flat, kind="stable")
        self.order = order
        self.sorted_points = points[order]
        self.sorted_shifted = shifted[order]
        sorted_flat = flat[order]
        leaves, starts, counts = np.unique(
            sorted_flat, return_index=True, return_counts=True
        )
        self.leaf_starts = starts
        self.leaf_counts = counts

        # Occupied boxes per level, from the leaves up.
        self.level_flat = {}
        self.level_multi = {}
        self.level_flat[config.depth] = leaves
        self.level_multi[config.depth] = self._unravel(leaves, config.depth)
        for level in range(config.depth - 1, -1, -1):
            coarser = np.unique(self.level_multi[level + 1] >> 1, axis=0)
            self.level_flat[level] = self._ravel(coarser, level)
            self.level_multi[level] = coarser

    def _ravel(self, multi, level):
        dim = self.config.dimension
        if multi.size == 0:
            return np.empty(0, dtype=np.int64)
        weights = (2**level) ** np.arange(dim - 1, -1, -1, dtype=np.int64)
        return multi @ weights

    def _unravel(self, flat, level):
        dim = self.config.dimension
        n = 2**level
        out = np.empty((flat.size, dim), dtype=np.int64)
        rest = flat.copy()
        for c in range(dim - 1, -1, -1):
            out[:, c] = rest % n
            rest //= n
        return out

    @property
    def n_points(self):
        return self.points.shape[0]

    def leaf_of(self, point_index):
        """BoxId of the leaf containing one input point."""
        return BoxId(self.config.depth, tuple(self.leaf_multi[point_index].tolist()))

    def points_in(self, box):
        """Indices (into the original point order) of the points in a box."""
        if box.level != self.config.depth:
            raise ValueError("per-box point lists exist at the leaf level only")
        flat = self._ravel(
            np.asarray(box.multi_index, dtype=np.int64)[np.newaxis, :], box.level
        )[0]
        pos = np.searchsorted(self.level_flat[box.level], flat)
        if pos == len(self.level_flat[box.level]) or self.level_flat[box.level][pos] != flat:
            return np.empty(0, dtype=np.intp)
        s = self.leaf_starts[pos]
        return self.order[s : s + self.leaf_counts[pos]]

    def occupancy(self):
        """Leaf flat index -> point count, for cross-checks."""
        return dict(zip(self.level_flat[self.config.depth].tolist(),
                        self.leaf_counts.tolist()))


def build_tree(points, config):
    """Bin points into the uniform hierarchy; errors name the first point
    outside the domain cube."""
    return Tree(points, config)


def neighbor_list(tree, box):
    """Same-level boxes within Chebyshev index distance 1, box included.

    This is exactly the complement of well-separation on a uniform grid.
    """
    n = 2**box.level
    ranges = [
        range(max(0, i - 1), min(n - 1, i + 1) + 1) for i in box.multi_index
    ]
    return [BoxId(box.level, combo) for combo in itertools.product(*ranges)]


def interaction_list(tree, box):
    """Same-level well-separated children of the parent's neighbors.

    Each entry pairs the box with the canonical index of its integer offset
    (their multi-index difference), which names the transfer operator to
    apply.  Levels 0 and 1 return an empty list.
    """
    if box.level < 2:
        return []
    n = 2**box.level
    own = np.asarray(box.multi_index, dtype=np.int64)
    parent = own >> 1
    nparent = n >> 1
    ranges = [
        range(max(0, 2 * (p - 1)), min(n - 1, 2 * (p + 1) + 1) + 1)
        for p in parent.tolist()
    ]
    out = []
    for combo in itertools.product(*ranges):
        delta = np.asarray(combo, dtype=np.int64) - own
        if np.max(np.abs(delta)) < 2:
            continue
        out.append((BoxId(box.level, combo), transfer_index(delta)))
    return out
