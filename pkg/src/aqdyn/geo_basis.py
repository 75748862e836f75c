"""Spatial basis construction: cubic B-splines on a pruned knot grid.

The well surveys are modeled with a tensor-product cubic B-spline surface.
Both axes share one knot spacing, derived from the number of inner knots
requested for the east axis.  Grid cells containing no wells are pruned and
the remaining occupied cells are completed to their convex hull (in cell-index
space) so the surface support is a single convex patch.  Product basis
functions whose support misses every active cell are dropped.

Each 1-D basis uses the open-uniform convention (endpoint knots repeated three
extra times) and drops the leading basis function, so a knot list with
``n_inner`` interior values yields ``n_inner + 3`` functions.  Dropping the
first function removes the confounding between the basis and a separate
regression intercept; partition of unity still holds on the interior knot
span.

Alongside point evaluations the module provides analytic Laplacian rows

    lap B_{(a,b)}(x) = B_a''(x_e) B_b(x_n) + B_b''(x_n) B_a(x_e),

which feed the mixing-coefficient regression of the blanket-survey model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "OutOfDomainError",
    "KnotGrid",
    "BasisSystem",
    "GpKernelParams",
    "bspline_1d",
    "bspline_rows",
    "quantile_knots",
    "build_knot_grid",
    "build_basis_system",
    "gp_covariance",
    "export_sparse_triplets",
    "read_sparse_triplets",
]

_DEGREE = 3


class OutOfDomainError(ValueError):
    """Raised when an evaluation point lies outside the closed knot span."""


def _check_knots(knots: np.ndarray) -> np.ndarray:
    knots = np.asarray(knots, dtype=float)
    if knots.ndim != 1 or knots.size < 2:
        raise ValueError("need at least two knots")
    if not np.all(np.diff(knots) > 0):
        raise ValueError("knots must be strictly increasing")
    return knots


def _pad_knots(knots: np.ndarray) -> np.ndarray:
    """Open-uniform padding: repeat each endpoint three extra times."""
    return np.concatenate([knots[:1]] * _DEGREE + [knots] + [knots[-1:]] * _DEGREE)


def _basis_funs(tpad: np.ndarray, span: np.ndarray, x: np.ndarray, degree: int) -> np.ndarray:
    """All nonzero degree-``degree`` basis values at ``x`` (vectorized de Boor).

    ``span`` indexes ``tpad`` with ``tpad[span] <= x < tpad[span + 1]``;
    returns shape ``(len(x), degree + 1)`` holding ``N[span-degree .. span]``.
    """
    n = x.shape[0]
    vals = np.zeros((n, degree + 1))
    vals[:, 0] = 1.0
    left = np.zeros((n, degree + 1))
    right = np.zeros((n, degree + 1))
    for d in range(1, degree + 1):
        left[:, d] = x - tpad[span + 1 - d]
        right[:, d] = tpad[span + d] - x
        saved = np.zeros(n)
        for r in range(d):
            # Denominator spans a nonempty interval for any valid span.
            temp = vals[:, r] / (right[:, r + 1] + left[:, d - r])
            vals[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, d - r] * temp
        vals[:, d] = saved
    return vals


def _raise_derivative(tpad: np.ndarray, span: np.ndarray, vals: np.ndarray, d: int) -> np.ndarray:
    """Differentiate while raising degree ``d-1`` values to degree ``d``."""
    n = vals.shape[0]
    out = np.zeros((n, d + 1))
    zero = np.zeros(n)
    for m in range(d + 1):
        i = span - d + m
        den1 = tpad[i + d] - tpad[i]
        den2 = tpad[i + d + 1] - tpad[i + 1]
        lower = vals[:, m - 1] if m >= 1 else zero
        upper = vals[:, m] if m <= d - 1 else zero
        t1 = np.divide(lower, den1, out=np.zeros(n), where=den1 > 0)
        t2 = np.divide(upper, den2, out=np.zeros(n), where=den2 > 0)
        out[:, m] = d * (t1 - t2)
    return out


def _nonzero_cubic(
    knots: np.ndarray, x: np.ndarray, derivative_order: int
) -> tuple[np.ndarray, np.ndarray]:
    """Nonzero cubic basis values (or derivatives) at each point.

    Returns ``(first, vals)`` where ``vals[p, r]`` is the value of basis
    function ``first[p] + r`` in the full (undropped) indexing ``0..K+1``.
    Points must already be clipped to the closed knot span.
    """
    tpad = _pad_knots(knots)
    ncell = knots.size - 1
    cell = np.clip(np.searchsorted(knots, x, side="right") - 1, 0, ncell - 1)
    span = cell + _DEGREE
    vals = _basis_funs(tpad, span, x, _DEGREE - derivative_order)
    for d in range(_DEGREE - derivative_order + 1, _DEGREE + 1):
        vals = _raise_derivative(tpad, span, vals, d)
    return cell, vals


def _rows_1d(
    knots: np.ndarray,
    x: np.ndarray,
    derivative_order: int,
    out_of_range: str = "error",
) -> np.ndarray:
    """Dense (n, n_inner + 3) design matrix for one axis.

    ``out_of_range="zero"`` returns all-zero rows outside the closed span
    (used when evaluating the autoregression spline at latent coordinates);
    the default raises :class:`OutOfDomainError`.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    inside = (x >= knots[0]) & (x <= knots[-1])
    if not np.all(inside):
        if out_of_range == "error":
            bad = x[~inside][0]
            raise OutOfDomainError(
                f"point {bad!r} outside knot span [{knots[0]!r}, {knots[-1]!r}]"
            )
        x = np.clip(x, knots[0], knots[-1])
    cell, vals = _nonzero_cubic(knots, x, derivative_order)
    n_fns = knots.size + 2
    dense = np.zeros((x.size, n_fns))
    rows = np.arange(x.size)[:, None]
    cols = cell[:, None] + np.arange(_DEGREE + 1)[None, :]
    dense[rows, cols] = vals
    if out_of_range == "zero":
        dense[~inside] = 0.0
    return dense[:, 1:]  # drop the leading function


def bspline_1d(knots, x: float, derivative_order: int = 0) -> np.ndarray:
    """Evaluate all cubic B-spline basis functions (or derivatives) at ``x``.

    ``knots`` are the ordered grid coordinates including both endpoints; the
    returned vector has ``len(knots) + 1`` entries (``n_inner + 3``), at most
    four of them nonzero.  ``derivative_order`` may be 0, 1, or 2.
    """
    knots = _check_knots(knots)
    if derivative_order not in (0, 1, 2):
        raise ValueError("derivative_order must be 0, 1, or 2")
    x = float(x)
    return _rows_1d(knots, np.array([x]), derivative_order)[0]


def bspline_rows(knots, x, derivative_order: int = 0, *, out_of_range: str = "error") -> np.ndarray:
    """Design-matrix rows of the 1-D basis at many points at once.

    With ``out_of_range="zero"`` points beyond the knot span get all-zero
    rows instead of raising; the autoregression spline uses this so its
    smooth term vanishes outside the range it was anchored to.
    """
    knots = _check_knots(knots)
    if derivative_order not in (0, 1, 2):
        raise ValueError("derivative_order must be 0, 1, or 2")
    if out_of_range not in ("error", "zero"):
        raise ValueError("out_of_range must be 'error' or 'zero'")
    return _rows_1d(knots, np.asarray(x, dtype=float), derivative_order, out_of_range)


def quantile_knots(values, n_interior: int = 9, extension: float = 2.0) -> np.ndarray:
    """Knots at evenly spaced quantiles of ``values``, with padded boundaries.

    The boundary knots sit ``extension`` below the minimum and above the
    maximum so the spline has full support over everything observed.
    """
    values = np.asarray(values, dtype=float)
    if values.size < n_interior + 2:
        raise ValueError("too few values to place quantile knots")
    if extension <= 0:
        raise ValueError("extension must be positive")
    quantiles = np.quantile(values, np.linspace(0.0, 1.0, n_interior + 2)[1:-1])
    knots = np.concatenate(
        [[values.min() - extension], quantiles, [values.max() + extension]]
    )
    if np.any(np.diff(knots) <= 0):
        raise ValueError("quantile knots collide; values have too little spread")
    return knots


# ---------------------------------------------------------------------------
# Knot grid


def _convex_hull(points: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Monotone-chain convex hull, counter-clockwise, no duplicate endpoint."""
    pts = sorted(set(points))
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[tuple[int, int]] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple[int, int]] = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def _fill_hull(occupied: set[tuple[int, int]]) -> set[tuple[int, int]]:
    """Cells whose index point lies inside the convex hull of ``occupied``."""
    hull = _convex_hull(list(occupied))
    if len(hull) <= 1:
        return set(occupied)
    es = [p[0] for p in occupied]
    ns = [p[1] for p in occupied]
    out: set[tuple[int, int]] = set()
    if len(hull) == 2:
        (ax, ay), (bx, by) = hull
        dx, dy = bx - ax, by - ay
        length2 = dx * dx + dy * dy
        for e in range(min(es), max(es) + 1):
            for n in range(min(ns), max(ns) + 1):
                cx, cy = e - ax, n - ay
                if cx * dy - cy * dx == 0 and 0 <= cx * dx + cy * dy <= length2:
                    out.add((e, n))
        return out
    for e in range(min(es), max(es) + 1):
        for n in range(min(ns), max(ns) + 1):
            inside = True
            for k in range(len(hull)):
                ax, ay = hull[k]
                bx, by = hull[(k + 1) % len(hull)]
                if (bx - ax) * (n - ay) - (by - ay) * (e - ax) < 0:
                    inside = False
                    break
            if inside:
                out.add((e, n))
    return out


@dataclass(frozen=True)
class KnotGrid:
    """Equal-spacing knot grid with the set of active (unpruned) cells.

    ``active_cells`` holds ``(east_cell, north_cell)`` index pairs; cell
    ``(i, j)`` spans ``[east_knots[i], east_knots[i+1]] x
    [north_knots[j], north_knots[j+1]]``.
    """

    east_knots: np.ndarray
    north_knots: np.ndarray
    active_cells: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        east = _check_knots(self.east_knots)
        north = _check_knots(self.north_knots)
        object.__setattr__(self, "east_knots", east)
        object.__setattr__(self, "north_knots", north)
        steps = np.concatenate([np.diff(east), np.diff(north)])
        x0 = steps[0]
        if np.any(np.abs(steps - x0) > 1e-9 * max(abs(x0), 1.0)):
            raise ValueError("knot spacing must be equal on both axes")
        cells = frozenset((int(e), int(n)) for e, n in self.active_cells)
        for e, n in cells:
            if not (0 <= e < east.size - 1 and 0 <= n < north.size - 1):
                raise ValueError(f"active cell {(e, n)} outside the grid")
        object.__setattr__(self, "active_cells", cells)

    @property
    def spacing(self) -> float:
        return float(self.east_knots[1] - self.east_knots[0])

    @property
    def n_cells(self) -> tuple[int, int]:
        return self.east_knots.size - 1, self.north_knots.size - 1

    def cell_of(self, east: np.ndarray, north: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ce = np.clip(
            np.searchsorted(self.east_knots, east, side="right") - 1,
            0,
            self.east_knots.size - 2,
        )
        cn = np.clip(
            np.searchsorted(self.north_knots, north, side="right") - 1,
            0,
            self.north_knots.size - 2,
        )
        return ce, cn


def build_knot_grid(
    locations,
    n_east_inner: int,
    bounds: tuple[float, float, float, float] | None = None,
) -> KnotGrid:
    """Build the shared-spacing grid and prune to the hull of occupied cells.

    The spacing is the east extent divided by ``n_east_inner + 1``, so the
    east axis has ``n_east_inner`` knots strictly inside its extent; the north
    axis gets as many equal steps as needed to cover its extent.  ``bounds``
    ``(east_min, east_max, north_min, north_max)`` overrides the extent
    derived from ``locations`` (used to share one grid across runs).
    """
    locations = np.asarray(locations, dtype=float)
    if locations.ndim != 2 or locations.shape[1] != 2 or locations.shape[0] < 2:
        raise ValueError("locations must be an (n, 2) array with n >= 2")
    if n_east_inner < 4:
        raise ValueError("n_east_inner must be at least 4")
    if bounds is None:
        e_min, e_max = locations[:, 0].min(), locations[:, 0].max()
        n_min, n_max = locations[:, 1].min(), locations[:, 1].max()
    else:
        e_min, e_max, n_min, n_max = map(float, bounds)
        if (
            np.any(locations[:, 0] < e_min)
            or np.any(locations[:, 0] > e_max)
            or np.any(locations[:, 1] < n_min)
            or np.any(locations[:, 1] > n_max)
        ):
            raise ValueError("locations fall outside the supplied bounds")
    if e_max <= e_min or n_max <= n_min:
        raise ValueError("degenerate extent: locations are collinear or coincident")

    x0 = (e_max - e_min) / (n_east_inner + 1)
    east_knots = np.linspace(e_min, e_max, n_east_inner + 2)
    gaps = int(np.ceil((n_max - n_min) / x0 - 1e-12))
    while n_min + gaps * x0 < n_max:
        gaps += 1
    north_knots = n_min + x0 * np.arange(gaps + 1)

    grid = KnotGrid(east_knots, north_knots, frozenset())
    ce, cn = grid.cell_of(locations[:, 0], locations[:, 1])
    occupied = set(zip(ce.tolist(), cn.tolist()))
    active = _fill_hull(occupied)
    return KnotGrid(east_knots, north_knots, frozenset(active))


# ---------------------------------------------------------------------------
# Tensor-product basis system


def _support_range(i: int, n_cells: int) -> tuple[int, int]:
    """Inclusive cell range covered by full-index basis function ``i``."""
    return max(i - _DEGREE, 0), min(i, n_cells - 1)


@dataclass(frozen=True)
class BasisSystem:
    """Pruned tensor-product basis evaluated at a fixed set of locations.

    ``basis_matrix`` (values) and ``laplacian_matrix`` (analytic Laplacians,
    multiplied by ``laplacian_scale``) are CSR with one column per retained
    product function; ``column_pairs[l] = (east_fn, north_fn)`` gives the
    per-axis full indices of column ``l``.
    """

    grid: KnotGrid
    locations: np.ndarray
    basis_matrix: sp.csr_matrix
    laplacian_matrix: sp.csr_matrix
    column_pairs: tuple
    laplacian_scale: float

    @property
    def n_basis(self) -> int:
        return len(self.column_pairs)

    def rows_for(self, points) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        """Basis and Laplacian rows at new points, with this system's columns."""
        return _tensor_rows(self.grid, points, self.column_pairs, self.laplacian_scale)


def _column_lookup(grid: KnotGrid, column_pairs) -> np.ndarray:
    n_e = grid.east_knots.size + 2
    n_n = grid.north_knots.size + 2
    lookup = np.full((n_e, n_n), -1, dtype=int)
    for col, (a, b) in enumerate(column_pairs):
        lookup[a, b] = col
    return lookup


def _tensor_rows(
    grid: KnotGrid, points, column_pairs, laplacian_scale: float
) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError("points must be an (n, 2) array of (east, north)")
    east, north = points[:, 0], points[:, 1]
    for vals, knots, name in (
        (east, grid.east_knots, "east"),
        (north, grid.north_knots, "north"),
    ):
        if np.any(vals < knots[0]) or np.any(vals > knots[-1]):
            raise OutOfDomainError(f"{name} coordinate outside the knot span")

    ce, ve0 = _nonzero_cubic(grid.east_knots, east, 0)
    _, ve2 = _nonzero_cubic(grid.east_knots, east, 2)
    cn, vn0 = _nonzero_cubic(grid.north_knots, north, 0)
    _, vn2 = _nonzero_cubic(grid.north_knots, north, 2)

    lookup = _column_lookup(grid, column_pairs)
    n = points.shape[0]
    rows_idx: list[np.ndarray] = []
    cols_idx: list[np.ndarray] = []
    b_data: list[np.ndarray] = []
    lap_data: list[np.ndarray] = []
    point_ids = np.arange(n)
    for ra in range(_DEGREE + 1):
        fa = ce + ra  # full east function index
        for rb in range(_DEGREE + 1):
            fb = cn + rb
            cols = lookup[fa, fb]
            keep = cols >= 0
            if not np.any(keep):
                continue
            rows_idx.append(point_ids[keep])
            cols_idx.append(cols[keep])
            b_data.append(ve0[keep, ra] * vn0[keep, rb])
            lap_data.append(
                (ve2[keep, ra] * vn0[keep, rb] + vn2[keep, rb] * ve0[keep, ra])
                * laplacian_scale
            )
    rows = np.concatenate(rows_idx) if rows_idx else np.array([], dtype=int)
    cols = np.concatenate(cols_idx) if cols_idx else np.array([], dtype=int)
    shape = (n, len(column_pairs))
    basis = sp.csr_matrix((np.concatenate(b_data) if b_data else [], (rows, cols)), shape=shape)
    lap = sp.csr_matrix((np.concatenate(lap_data) if lap_data else [], (rows, cols)), shape=shape)
    return basis, lap


def build_basis_system(grid: KnotGrid, locations, laplacian_scale: float = 1.0) -> BasisSystem:
    """Retain product functions whose support meets an active cell, then
    evaluate basis values and analytic Laplacians at ``locations``.

    A dropped function is identically zero on every active cell, so pruning
    never changes fitted surfaces at observed wells.
    """
    if not grid.active_cells:
        raise ValueError("grid has no active cells")
    locations = np.asarray(locations, dtype=float)

    nce, ncn = grid.n_cells
    active = np.zeros((nce, ncn), dtype=bool)
    for e, n in grid.active_cells:
        active[e, n] = True
    # Prefix sums let us test "any active cell in a rectangle" in O(1).
    table = np.zeros((nce + 1, ncn + 1), dtype=np.int64)
    table[1:, 1:] = np.cumsum(np.cumsum(active, axis=0), axis=1)

    def any_active(e0: int, e1: int, n0: int, n1: int) -> bool:
        s = table[e1 + 1, n1 + 1] - table[e0, n1 + 1] - table[e1 + 1, n0] + table[e0, n0]
        return s > 0

    pairs: list[tuple[int, int]] = []
    n_fns_e = grid.east_knots.size + 1  # retained per-axis count is K + 1
    n_fns_n = grid.north_knots.size + 1
    for b in range(1, n_fns_n + 1):
        n0, n1 = _support_range(b, ncn)
        for a in range(1, n_fns_e + 1):
            e0, e1 = _support_range(a, nce)
            if any_active(e0, e1, n0, n1):
                pairs.append((a, b))
    column_pairs = tuple(pairs)
    basis, lap = _tensor_rows(grid, locations, column_pairs, laplacian_scale)
    return BasisSystem(
        grid=grid,
        locations=locations,
        basis_matrix=basis,
        laplacian_matrix=lap,
        column_pairs=column_pairs,
        laplacian_scale=float(laplacian_scale),
    )


# ---------------------------------------------------------------------------
# Gaussian-process kernel


@dataclass(frozen=True)
class GpKernelParams:
    """Squared-exponential kernel: ``amplitude * exp(-||dx||^2 / length_scale^2)``."""

    amplitude: float
    length_scale: float

    def __post_init__(self):
        if not (self.amplitude > 0 and self.length_scale > 0):
            raise ValueError("amplitude and length_scale must be positive")


def gp_covariance(params: GpKernelParams, locations) -> np.ndarray:
    """Dense covariance matrix between all pairs of locations.

    Duplicated locations make the result singular; callers that factorize add
    a relative jitter of ``1e-8 * amplitude`` to the diagonal first.
    """
    locations = np.asarray(locations, dtype=float)
    if locations.ndim != 2 or locations.shape[1] != 2:
        raise ValueError("locations must be an (n, 2) array")
    diff = locations[:, None, :] - locations[None, :, :]
    sqdist = np.einsum("ijk,ijk->ij", diff, diff)
    return params.amplitude * np.exp(-sqdist / params.length_scale**2)


# ---------------------------------------------------------------------------
# Sparse matrix export


def export_sparse_triplets(matrix, path) -> None:
    """Write a sparse matrix as ``row,col,value`` CSV triplets."""
    coo = sp.coo_matrix(matrix)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "value"])
        for r, c, v in zip(coo.row, coo.col, coo.data):
            writer.writerow([int(r), int(c), format(float(v), ".17g")])


def read_sparse_triplets(path, shape: tuple[int, int]) -> sp.csr_matrix:
    rows, cols, data = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(int(rec["row"]))
            cols.append(int(rec["col"]))
            data.append(float(rec["value"]))
    return sp.csr_matrix((data, (rows, cols)), shape=shape)
