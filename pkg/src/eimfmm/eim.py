"""Greedy empirical interpolation of a kernel on a pair of point domains.

The builder walks a residual matrix over the full training product, picking
at each step the row with the worst max-norm and the worst column within
that row, then subtracting the resulting rank-1 cross.  A built model keeps
the selected nodes plus two triangular factors; every linear action goes
through forward/back substitution, the inverses are never formed.
"""

import numpy as np
from scipy.linalg import solve_triangular

# A pivot this far below the first residual means the kernel section has
# numerically exhausted its rank on the training grid.
_PIVOT_FLOOR = 1e-14


class TrainingSet:
    """Candidate argmax points for the greedy search, one array per side."""

    def __init__(self, points_x, points_y):
        self.points_x = np.atleast_2d(np.asarray(points_x, dtype=float))
        self.points_y = np.atleast_2d(np.asarray(points_y, dtype=float))
        if self.points_x.size == 0 or self.points_y.size == 0:
            raise ValueError("training sets must be non-empty")
        if self.points_x.shape[1] != self.points_y.shape[1]:
            raise ValueError("training sets must share the point dimension")

    def __repr__(self):
        return (
            f"TrainingSet({self.points_x.shape[0]} x-candidates, "
            f"{self.points_y.shape[0]} y-candidates)"
        )


class EimModel:
    """Separable kernel approximant selected greedily from training grids.

    The approximation of K(x, y) is (row of kernel values at the y nodes)
    times coefficients(column of kernel values at the x nodes), where
    ``coefficients`` inverts the node cross matrix K(x_m, y_l) through two
    triangular solves.  Models are immutable once built.
    """

    def __init__(self, kernel_id, x_points, y_points, basis_matrix,
                 pivot_matrix, residual_history, degenerate=False):
        self.kernel_id = kernel_id
        self.x_points = np.asarray(x_points, dtype=float)
        self.y_points = np.asarray(y_points, dtype=float)
        # basis_matrix[l, m]: m-th greedy basis function at the l-th y node;
        # unit lower triangular by construction.
        self.basis_matrix = np.asarray(basis_matrix, dtype=float)
        # pivot_matrix[m, j]: residual after j-1 terms at (x_m, y_j); lower
        # triangular, greedy pivots on the diagonal.
        self.pivot_matrix = np.asarray(pivot_matrix, dtype=float)
        self.residual_history = np.asarray(residual_history, dtype=float)
        self.degenerate = bool(degenerate)

    @property
    def d(self):
        """Number of interpolation terms."""
        return self.x_points.shape[0]

    @property
    def dimension(self):
        return self.x_points.shape[1]

    def coefficients(self, rhs):
        """Map kernel samples at the x nodes to coefficients on the y basis.

        Accepts a vector of length d or a (d, n) block of columns.
        """
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.d:
            raise ValueError(f"expected leading size {self.d}, got {rhs.shape[0]}")
        z = solve_triangular(self.pivot_matrix, rhs, lower=True)
        return solve_triangular(self.basis_matrix, z, lower=True, trans="T")

    def coefficients_t(self, rhs):
        """Transpose of :meth:`coefficients` (same triangular factors)."""
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.d:
            raise ValueError(f"expected leading size {self.d}, got {rhs.shape[0]}")
        z = solve_triangular(self.basis_matrix, rhs, lower=True)
        return solve_triangular(self.pivot_matrix, z, lower=True, trans="T")

    def transposed(self):
        """Model for the swapped domain pair of a symmetric kernel.

        Node sets exchange roles and the coefficient action transposes;
        no new greedy run is needed.
        """
        diag = np.diag(self.pivot_matrix).copy()
        return EimModel(
            kernel_id=self.kernel_id,
            x_points=self.y_points,
            y_points=self.x_points,
            basis_matrix=self.pivot_matrix / diag[np.newaxis, :],
            pivot_matrix=self.basis_matrix * diag[np.newaxis, :],
            residual_history=self.residual_history,
            degenerate=self.degenerate,
        )

    def __repr__(self):
        return f"EimModel(kernel={self.kernel_id!r}, d={self.d})"


def eim_build(kernel, training, tolerance, max_terms=300):
    """Select interpolation nodes until the training residual is small.

    Stops once the max residual over the training product drops below
    tolerance relative to its starting value, or after max_terms terms, or
    early (with the degenerate flag set) when the pivot collapses.
    """
    if max_terms < 1:
        raise ValueError("max_terms must be at least 1")
    if tolerance <= 0.0:
        raise ValueError("tolerance must be positive")
    resid = kernel.pairwise(training.points_x, training.points_y)
    if not np.isfinite(resid).all():
        raise ValueError("kernel must be finite on the training product")
    scale = float(np.abs(resid).max())
    if scale == 0.0:
        raise ValueError("kernel vanishes on the entire training product")

    history = [scale]
    rows_sel, cols_sel = [], []
    basis_rows = []   # full residual row / pivot, one per term
    pivot_cols = []   # full residual column at the pivot, one per term
    degenerate = False
    while True:
        # Worst row in max-norm, then the worst column inside it; ties break
        # to the lowest index so rebuilt caches are reproducible.
        i = int(np.argmax(np.max(np.abs(resid), axis=1)))
        j = int(np.argmax(np.abs(resid[i])))
        pivot = resid[i, j]
        if abs(pivot) <= _PIVOT_FLOOR * scale:
            degenerate = True
            break
        col = resid[:, j].copy()
        row = resid[i] / pivot
        rows_sel.append(i)
        cols_sel.append(j)
        basis_rows.append(row)
        pivot_cols.append(col)
        resid -= np.outer(col, row)
        history.append(float(np.abs(resid).max()))
        if history[-1] <= tolerance * scale or len(rows_sel) == max_terms:
            break

    rows_sel = np.asarray(rows_sel, dtype=np.intp)
    cols_sel = np.asarray(cols_sel, dtype=np.intp)
    # The rank-1 update zeroes its own pivot row and column exactly, so the
    # gathered matrices come out triangular without any cleanup.
    basis = np.stack([r[cols_sel] for r in basis_rows], axis=1)
    pivots = np.stack([c[rows_sel] for c in pivot_cols], axis=1)
    return EimModel(
        kernel_id=kernel.name,
        x_points=training.points_x[rows_sel],
        y_points=training.points_y[cols_sel],
        basis_matrix=basis,
        pivot_matrix=pivots,
        residual_history=np.asarray(history),
        degenerate=degenerate,
    )


def eim_coefficients(model, vector):
    """Inverse-cross action on one sample vector (two triangular solves)."""
    return model.coefficients(vector)


def eim_interpolate(model, kernel, x, y):
    """Evaluate the separable approximation at a single (x, y) pair."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    at_nodes_x = kernel.pairwise(model.x_points, y[np.newaxis, :])[:, 0]
    at_nodes_y = kernel.pairwise(x[np.newaxis, :], model.y_points)[0]
    return float(at_nodes_y @ model.coefficients(at_nodes_x))


def eim_residual(model, kernel, training):
    """Worst absolute interpolation error over the full training product."""
    exact = kernel.pairwise(training.points_x, training.points_y)
    at_nodes_y = kernel.pairwise(training.points_x, model.y_points)
    at_nodes_x = kernel.pairwise(model.x_points, training.points_y)
    return float(np.abs(exact - at_nodes_y @ model.coefficients(at_nodes_x)).max())
