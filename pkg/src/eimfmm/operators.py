"""Per-level precomputation for the multilevel engine.

For each level this builds the two directional interpolation models, the
2^D parent/child translation matrices (coefficient maps folded in through
triangular solves), and the compressed transfer operators: one shared
column basis from a cross approximation of the concatenated transfer
blocks, then a per-offset recompression.  Everything serializes to a
versioned little-endian binary cache.
"""

import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .eim import EimModel, TrainingSet, eim_build
from .tree import child_offsets, level_geometry, training_grids, transfer_offsets

CACHE_MAGIC = b"EIMFMM01"
CACHE_VERSION = 1


class CacheError(Exception):
    """Base class for operator-cache failures."""


class CacheVersionError(CacheError):
    """File is not a cache of a version this library reads."""


class CacheMismatchError(CacheError):
    """Cache was built for a different configuration."""


class CacheCorruptError(CacheError):
    """File is truncated or internally inconsistent."""


@dataclass
class LevelEims:
    """Both directional interpolation models of one level.

    ``radiating`` approximates the kernel for far evaluation points against
    source-box points; ``receiving`` swaps the roles.  For symmetric kernels
    the receiving model is transpose-derived, so the node sets coincide.
    """

    level: int
    radiating: EimModel
    receiving: EimModel

    @property
    def terms(self):
        return self.radiating.d


@dataclass
class M2mOperators:
    """2^D child-to-parent moment maps at one level, indexed by parity rank.

    Each matrix maps the child level's moments (length d_{k+1}) to the
    parent level's (length d_k) and already contains the child coefficient
    map.
    """

    level: int
    matrices: list


@dataclass
class L2lOperators:
    """2^D parent-to-child local maps, indexed by the child's parity rank.

    Each matrix samples the parent's interpolated incoming field at the
    child's nodes (d_{k+1} by d_k); the parent coefficient map is folded in.
    """

    level: int
    matrices: list


@dataclass
class M2lOperators:
    """Compressed same-level transfer operators.

    ``projector`` is the shared column-orthonormal basis (d_k by rank).
    ``blocks[t]`` holds the operator for transfer offset t in projected
    coordinates: either ("dense", C) with C rank-by-rank, or
    ("lowrank", U, V) with U rank-by-s and V s-by-rank.
    """

    level: int
    projector: np.ndarray
    blocks: list
    svd_fallback: bool = False

    @property
    def rank(self):
        return self.projector.shape[1]

    def block_rank(self, t):
        tag, *factors = self.blocks[t]
        return factors[0].shape[1] if tag == "lowrank" else self.projector.shape[1]

    def apply_block(self, t, moments):
        """Projected transfer block applied to (rank, n) moment columns."""
        tag, *factors = self.blocks[t]
        if tag == "dense":
            return factors[0] @ moments
        u, v = factors
        return u @ (v @ moments)

    def dense_block(self, t):
        """Projected block as an explicit matrix (tests and fallbacks)."""
        tag, *factors = self.blocks[t]
        if tag == "dense":
            return factors[0]
        u, v = factors
        return u @ v


def build_level_eims(kernel, config, level, tolerance, max_terms,
                     resolution, x_budget=8192):
    """Greedy models for one level, on grids over the reference domains."""
    if not (2 <= level <= config.depth):
        raise ValueError(f"level {level} outside 2..{config.depth}")
    geo = level_geometry(config, level)
    train = training_grids(geo, resolution, x_budget)
    radiating = eim_build(kernel, train, tolerance, max_terms)
    if kernel.is_symmetric:
        receiving = radiating.transposed()
    else:
        receiving = eim_build(
            kernel,
            TrainingSet(train.points_y, train.points_x),
            tolerance,
            max_terms,
        )
    return LevelEims(level=level, radiating=radiating, receiving=receiving)


def assemble_m2m(kernel, config, level, eims, child_eims):
    """Child-to-parent moment operators between two consecutive levels."""
    if child_eims.level != level + 1:
        raise ValueError("child models must live one level below")
    half_child = config.half_width(level + 1)
    signs = 2 * child_offsets(config.dimension) - 1
    mats = []
    for bits in signs:
        # Parent nodes seen from the child center.
        shift = -bits * half_child
        geom = kernel.pairwise(
            eims.radiating.x_points + shift, child_eims.radiating.y_points
        )
        mats.append(child_eims.radiating.coefficients_t(geom.T).T)
    return M2mOperators(level=level, matrices=mats)


def assemble_l2l(kernel, config, level, eims, child_eims):
    """Parent-to-child local operators between two consecutive levels."""
    if child_eims.level != level + 1:
        raise ValueError("child models must live one level below")
    half_child = config.half_width(level + 1)
    signs = 2 * child_offsets(config.dimension) - 1
    mats = []
    for bits in signs:
        # Child nodes seen from the parent center.
        shift = bits * half_child
        geom = kernel.pairwise(
            child_eims.receiving.x_points + shift, eims.receiving.y_points
        )
        mats.append(eims.receiving.coefficients_t(geom.T).T)
    return L2lOperators(level=level, matrices=mats)


def _aca(matrix, rel_tol, max_rank):
    """Partially pivoted cross approximation with an explicit residual.

    Returns (U, V, converged); when converged, the bound
    ||matrix - U V||_F <= rel_tol * ||matrix||_F holds on the maintained
    residual, so the stop is certified rather than estimated.
    """
    resid = np.array(matrix, dtype=float)
    norm = float(np.linalg.norm(matrix))
    target = rel_tol * norm
    nrows = resid.shape[0]
    us, vs = [], []
    if norm == 0.0:
        return (
            np.empty((nrows, 0)),
            np.empty((0, resid.shape[1])),
            True,
        )
    row = int(np.argmax(np.max(np.abs(resid), axis=1)))
    used = np.zeros(nrows, dtype=bool)
    for _ in range(max_rank):
        j = int(np.argmax(np.abs(resid[row])))
        pivot = resid[row, j]
        if abs(pivot) <= 1e-15 * norm:
            # Row went flat; rescue with the globally worst entry.
            row = int(np.argmax(np.max(np.abs(resid), axis=1)))
            j = int(np.argmax(np.abs(resid[row])))
            pivot = resid[row, j]
            if abs(pivot) <= 1e-15 * norm:
                break
        u = resid[:, j].copy()
        v = resid[row] / pivot
        us.append(u)
        vs.append(v)
        resid -= np.outer(u, v)
        used[row] = True
        if float(np.linalg.norm(resid)) <= target:
            return np.column_stack(us), np.asarray(vs), True
        remaining = np.abs(u)
        remaining[used] = -1.0
        row = int(np.argmax(remaining))
    if us:
        return np.column_stack(us), np.asarray(vs), False
    return np.empty((nrows, 0)), np.empty((0, resid.shape[1])), False


def _cut_rank(svals, eps):
    """Combine the two truncation filters: drop-off and cumulative energy."""
    if svals.size == 0:
        return 0
    ratio = svals / svals[0]
    below = np.nonzero(ratio <= eps)[0]
    by_dropoff = int(below[0]) + 1 if below.size else int(svals.size)
    cum = np.cumsum(svals)
    reached = np.nonzero(cum / cum[-1] >= 1.0 - eps)[0]
    by_energy = int(reached[0]) + 1 if reached.size else int(svals.size)
    return min(max(by_dropoff, by_energy), int(svals.size))


def assemble_m2l(kernel, config, level, eims, compression_tolerance,
                 aca_max_rank=None):
    """Compressed transfer operators for every offset of one level.

    Builds the concatenation of all transfer blocks, cross-approximates it
    to the requested Frobenius accuracy, extracts a shared orthonormal
    column basis through QR plus SVD with the two truncation filters, then
    recompresses each projected block on its own (keeping it dense when the
    block rank does not drop enough to pay for two products).
    """
    if level < 2:
        raise ValueError("transfer operators exist at levels >= 2 only")
    eps = float(compression_tolerance)
    if eps <= 0.0:
        raise ValueError("compression tolerance must be positive")
    offsets = transfer_offsets(config.dimension)
    step = 2.0 * config.half_width(level)
    px = eims.receiving.x_points
    py = eims.radiating.y_points
    if px.shape[0] != py.shape[0] and not kernel.is_symmetric:
        raise NotImplementedError(
            "single-projector compression needs equal term counts in both "
            "directional models"
        )
    blocks = [kernel.pairwise(px, py + step * off) for off in offsets]
    if kernel.is_symmetric:
        fat = np.hstack(blocks)
    else:
        # The shared basis must span row spaces too; symmetric kernels get
        # that for free because the offset set is closed under negation.
        fat = np.hstack(blocks + [b.T for b in blocks])

    d = px.shape[0]
    max_rank = d if aca_max_rank is None else min(int(aca_max_rank), d)
    left, right, converged = _aca(fat, eps, max_rank)
    svd_fallback = not converged
    if converged:
        q_left, r_left = np.linalg.qr(left)
        q_right, r_right = np.linalg.qr(right.T)
        u_small, svals, _ = np.linalg.svd(r_left @ r_right.T)
        column_basis = q_left @ u_small
    else:
        column_basis, svals, _ = np.linalg.svd(fat, full_matrices=False)
    rank = _cut_rank(svals, eps)
    projector = np.ascontiguousarray(column_basis[:, :rank])

    out_blocks = []
    for block in blocks:
        projected = projector.T @ block @ projector
        out_blocks.append(_recompress_block(projected, eps, rank))
    return M2lOperators(
        level=level,
        projector=projector,
        blocks=out_blocks,
        svd_fallback=svd_fallback,
    )


def _recompress_block(projected, eps, rank):
    """Per-offset second stage: cross approximation, QR, SVD, square-root
    split.  Falls back to the dense block when the rank does not drop."""
    norm = float(np.linalg.norm(projected))
    if norm == 0.0:
        r = projected.shape[0]
        return ("lowrank", np.zeros((r, 0)), np.zeros((0, projected.shape[1])))
    left, right, converged = _aca(projected, 0.5 * eps, projected.shape[0])
    if not converged:
        return ("dense", projected)
    q_left, r_left = np.linalg.qr(left)
    q_right, r_right = np.linalg.qr(right.T)
    u_small, svals, vt_small = np.linalg.svd(r_left @ r_right.T)
    # Keep the smallest rank whose Frobenius tail stays within eps/2.
    tails = np.sqrt(np.cumsum((svals**2)[::-1])[::-1])
    keep = int(np.searchsorted(-tails, -(0.5 * eps * norm)))
    keep = min(max(keep, 0), svals.size)
    if keep > 0.8 * rank:
        return ("dense", projected)
    roots = np.sqrt(svals[:keep])
    u = (q_left @ u_small[:, :keep]) * roots[np.newaxis, :]
    v = (roots[:, np.newaxis] * vt_small[:keep]) @ q_right.T
    return ("lowrank", u, v)


@dataclass(frozen=True)
class CacheKey:
    """Everything the precomputed operators depend on.

    The domain center is deliberately absent: all operators are built on
    origin-translated domains, so a shifted domain reuses the same cache.
    """

    kernel_id: str
    dimension: int
    side: float
    depth: int
    tolerance: float
    compress_tol: float
    resolution: int
    x_budget: int
    max_terms: int

    def digest(self):
        parts = [
            f"version={CACHE_VERSION}",
            f"kernel={self.kernel_id}",
            f"dimension={self.dimension}",
            f"side={float(self.side).hex()}",
            f"depth={self.depth}",
            f"tolerance={float(self.tolerance).hex()}",
            f"compress_tol={float(self.compress_tol).hex()}",
            f"resolution={self.resolution}",
            f"x_budget={self.x_budget}",
            f"max_terms={self.max_terms}",
        ]
        return hashlib.sha256("|".join(parts).encode()).digest()


@dataclass
class OperatorCache:
    """All per-level operators for one (kernel, tree shape, tolerance)."""

    key: CacheKey
    eims: dict = field(default_factory=dict)      # level -> LevelEims
    m2m: dict = field(default_factory=dict)       # level -> M2mOperators
    l2l: dict = field(default_factory=dict)       # level -> L2lOperators
    m2l: dict = field(default_factory=dict)       # level -> M2lOperators

    @property
    def levels(self):
        return sorted(self.eims)

    def terms_per_level(self):
        return {k: self.eims[k].terms for k in self.levels}

    def ranks_per_level(self):
        return {k: self.m2l[k].rank for k in sorted(self.m2l)}


def build_operator_cache(kernel, config, tolerance, compress_tol=None,
                         max_terms=300, resolution=7, x_budget=8192):
    """Precompute every level's operators for a tree configuration."""
    if compress_tol is None:
        compress_tol = tolerance
    key = CacheKey(
        kernel_id=kernel.name,
        dimension=config.dimension,
        side=float(config.side),
        depth=config.depth,
        tolerance=float(tolerance),
        compress_tol=float(compress_tol),
        resolution=int(resolution),
        x_budget=int(x_budget),
        max_terms=int(max_terms),
    )
    cache = OperatorCache(key=key)
    for level in range(2, config.depth + 1):
        cache.eims[level] = build_level_eims(
            kernel, config, level, tolerance, max_terms, resolution, x_budget
        )
    for level in range(2, config.depth):
        cache.m2m[level] = assemble_m2m(
            kernel, config, level, cache.eims[level], cache.eims[level + 1]
        )
        cache.l2l[level] = assemble_l2l(
            kernel, config, level, cache.eims[level], cache.eims[level + 1]
        )
    for level in range(2, config.depth + 1):
        cache.m2l[level] = assemble_m2l(
            kernel, config, level, cache.eims[level], compress_tol
        )
    return cache


# ---------------------------------------------------------------------------
# Binary serialization.  All counts are little-endian u64, all reals f64;
# round trips are bitwise.

def _w_u64(fh, value):
    fh.write(struct.pack("<Q", int(value)))


def _w_f64(fh, value):
    fh.write(struct.pack("<d", float(value)))


def _w_bytes(fh, data):
    _w_u64(fh, len(data))
    fh.write(data)


def _w_array(fh, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    _w_u64(fh, arr.ndim)
    for s in arr.shape:
        _w_u64(fh, s)
    fh.write(arr.tobytes())


def _read(fh, n):
    if n > 1 << 36:  # no field is anywhere near this; corrupt length prefix
        raise CacheCorruptError("implausible field length in cache file")
    data = fh.read(n)
    if len(data) != n:
        raise CacheCorruptError("cache file is truncated")
    return data


def _r_u64(fh):
    return struct.unpack("<Q", _read(fh, 8))[0]


def _r_f64(fh):
    return struct.unpack("<d", _read(fh, 8))[0]


def _r_bytes(fh):
    return _read(fh, _r_u64(fh))


def _r_str(fh):
    try:
        return _r_bytes(fh).decode()
    except UnicodeDecodeError as exc:
        raise CacheCorruptError("undecodable name in cache file") from exc


def _r_array(fh):
    ndim = _r_u64(fh)
    if ndim > 4:
        raise CacheCorruptError("implausible array rank in cache file")
    shape = tuple(_r_u64(fh) for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if count > 1 << 32:
        raise CacheCorruptError("implausible array size in cache file")
    data = _read(fh, 8 * count)
    return np.frombuffer(data, dtype="<f8").reshape(shape).copy()


def _w_eim(fh, model):
    _w_bytes(fh, model.kernel_id.encode())
    _w_u64(fh, model.d)
    _w_u64(fh, 1 if model.degenerate else 0)
    _w_array(fh, model.x_points)
    _w_array(fh, model.y_points)
    _w_array(fh, model.basis_matrix)
    _w_array(fh, model.pivot_matrix)
    _w_array(fh, model.residual_history)


def _r_eim(fh):
    kernel_id = _r_str(fh)
    d = _r_u64(fh)
    degenerate = bool(_r_u64(fh))
    x_points = _r_array(fh)
    y_points = _r_array(fh)
    basis = _r_array(fh)
    pivots = _r_array(fh)
    history = _r_array(fh)
    if x_points.shape[0] != d or basis.shape != (d, d) or pivots.shape != (d, d):
        raise CacheCorruptError("inconsistent model block in cache file")
    return EimModel(kernel_id, x_points, y_points, basis, pivots, history,
                    degenerate=degenerate)


def save_cache(cache, path):
    """Write the cache; the round trip through load_cache is bitwise."""
    key = cache.key
    body = io.BytesIO()
    levels = cache.levels
    _w_u64(body, len(levels))
    for level in levels:
        _w_u64(body, level)
        pair = cache.eims[level]
        _w_eim(body, pair.radiating)
        _w_eim(body, pair.receiving)
        has_children = level in cache.m2m
        _w_u64(body, 1 if has_children else 0)
        if has_children:
            for mat in cache.m2m[level].matrices:
                _w_array(body, mat)
            for mat in cache.l2l[level].matrices:
                _w_array(body, mat)
        trans = cache.m2l[level]
        _w_u64(body, 1 if trans.svd_fallback else 0)
        _w_array(body, trans.projector)
        _w_u64(body, len(trans.blocks))
        for tag, *factors in trans.blocks:
            _w_u64(body, 0 if tag == "dense" else 1)
            for f in factors:
                _w_array(body, f)
    payload = body.getvalue()
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        _w_u64(fh, CACHE_VERSION)
        _w_bytes(fh, key.kernel_id.encode())
        _w_u64(fh, key.dimension)
        _w_f64(fh, key.side)
        _w_u64(fh, key.depth)
        _w_f64(fh, key.tolerance)
        _w_f64(fh, key.compress_tol)
        _w_u64(fh, key.resolution)
        _w_u64(fh, key.x_budget)
        _w_u64(fh, key.max_terms)
        fh.write(key.digest())
        fh.write(hashlib.sha256(payload).digest())
        _w_u64(fh, len(payload))
        fh.write(payload)


def load_cache(path, expected_key=None):
    """Read a cache file, validating version, hash, and (when given) the
    requested configuration."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CACHE_MAGIC))
        if magic != CACHE_MAGIC:
            raise CacheVersionError("not an operator cache file")
        version = _r_u64(fh)
        if version != CACHE_VERSION:
            raise CacheVersionError(
                f"cache version {version} unsupported (want {CACHE_VERSION})"
            )
        key = CacheKey(
            kernel_id=_r_str(fh),
            dimension=_r_u64(fh),
            side=_r_f64(fh),
            depth=_r_u64(fh),
            tolerance=_r_f64(fh),
            compress_tol=_r_f64(fh),
            resolution=_r_u64(fh),
            x_budget=_r_u64(fh),
            max_terms=_r_u64(fh),
        )
        stored_digest = _read(fh, 32)
        if stored_digest != key.digest():
            raise CacheCorruptError("config hash does not match header fields")
        if expected_key is not None and key != expected_key:
            raise CacheMismatchError(
                f"cache was built for {key}, requested {expected_key}"
            )
        payload_digest = _read(fh, 32)
        payload_len = _r_u64(fh)
        payload = fh.read(payload_len)
        if len(payload) != payload_len:
            raise CacheCorruptError("cache payload truncated")
        if fh.read(1):
            raise CacheCorruptError("trailing bytes after cache payload")
        if hashlib.sha256(payload).digest() != payload_digest:
            raise CacheCorruptError("cache payload checksum mismatch")
    body = io.BytesIO(payload)
    cache = OperatorCache(key=key)
    nlevels = _r_u64(body)
    if nlevels > key.depth + 1:
        raise CacheCorruptError("implausible level count in cache file")
    dim = key.dimension
    for _ in range(nlevels):
        level = _r_u64(body)
        radiating = _r_eim(body)
        receiving = _r_eim(body)
        cache.eims[level] = LevelEims(level, radiating, receiving)
        if _r_u64(body):
            m2m = [_r_array(body) for _ in range(2**dim)]
            l2l = [_r_array(body) for _ in range(2**dim)]
            cache.m2m[level] = M2mOperators(level, m2m)
            cache.l2l[level] = L2lOperators(level, l2l)
        fallback = bool(_r_u64(body))
        projector = _r_array(body)
        nblocks = _r_u64(body)
        if nblocks != len(transfer_offsets(dim)):
            raise CacheCorruptError("wrong transfer block count in cache file")
        blocks = []
        for _ in range(nblocks):
            if _r_u64(body):
                blocks.append(("lowrank", _r_array(body), _r_array(body)))
            else:
                blocks.append(("dense", _r_array(body)))
        cache.m2l[level] = M2lOperators(level, projector, blocks,
                                        svd_fallback=fallback)
    if body.read(1):
        raise CacheCorruptError("trailing bytes inside cache payload")
    return cache
