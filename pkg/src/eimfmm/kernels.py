"""Translation-invariant kernels evaluated from point displacements.

Every kernel here is a pure function of x - y, so both arguments can be
shifted by a common vector without changing the value.  The far-field
machinery only ever evaluates kernels on well-separated argument pairs;
near-field summation masks out coincident pairs before calling in, so the
singular kernels may emit inf at r = 0 without consequence.
"""

import numpy as np

_OSCILLATION_FREQ = 20.0


class Kernel:
    """A two-point function K(x, y) that depends only on x - y.

    ``profile`` maps an (..., D) array of displacements to values of shape
    (...,).  Instances are immutable and safe to evaluate concurrently.
    """

    def __init__(self, name, profile, is_symmetric):
        self.name = name
        self._profile = profile
        self.is_symmetric = is_symmetric

    def evaluate(self, point_x, point_y):
        """Scalar kernel value for one argument pair."""
        disp = np.asarray(point_x, dtype=float) - np.asarray(point_y, dtype=float)
        return float(self._profile(disp))

    def from_displacements(self, disp):
        """Vectorized evaluation on an (..., D) array of x - y displacements."""
        return self._profile(np.asarray(disp, dtype=float))

    def pairwise(self, points_x, points_y):
        """Dense matrix of K(points_x[i], points_y[j])."""
        px = np.atleast_2d(np.asarray(points_x, dtype=float))
        py = np.atleast_2d(np.asarray(points_y, dtype=float))
        return self._profile(px[:, None, :] - py[None, :, :])

    def __repr__(self):
        return f"Kernel({self.name!r}, symmetric={self.is_symmetric})"


def _radial(fn):
    # Divide-by-zero at coincident points is silenced here; callers on the
    # near-field path zero those entries out explicitly.
    def profile(disp):
        r = np.sqrt(np.sum(disp * disp, axis=-1))
        with np.errstate(divide="ignore", invalid="ignore"):
            return fn(r)

    return profile


_BUILTINS = {
    "laplace": lambda r: 1.0 / r,
    "oscillatory": lambda r: np.cos(_OSCILLATION_FREQ * r) / r,
    "gaussian": lambda r: np.exp(-(r * r)),
    "multiquadric": lambda r: np.sqrt(r * r + 1.0),
}


def make_builtin_kernel(name):
    """Return a builtin kernel by name.

    Supported: laplace (1/r), oscillatory (cos(20 r)/r), gaussian
    (exp(-r^2)), multiquadric (sqrt(r^2 + 1)), with r the Euclidean
    distance.  All four are symmetric.
    """
    try:
        fn = _BUILTINS[name]
    except KeyError:
        known = ", ".join(sorted(_BUILTINS))
        raise ValueError(f"unknown kernel {name!r}; expected one of: {known}") from None
    return Kernel(name, _radial(fn), is_symmetric=True)


def builtin_kernel_names():
    return sorted(_BUILTINS)
