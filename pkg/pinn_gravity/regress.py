"""
Linear regressions for the classical models.

Spherical harmonics use Kaula-regularized recursive least squares in batches of 100 samples, regressing at most
5,000 coefficients at a time against the residual of the lower-degree groups. Mascons are fit 500 at a time by linear
least squares on residual accelerations. Extreme learning machines regress their output layer by ridge RLS.

All three work in non-dimensional units: positions over ``R``, accelerations over ``mu / R**2``.
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Optional

import numpy as np
import numpy.typing as npt
from scipy.linalg import LinAlgError, cho_factor, cho_solve, lstsq, solve
from scipy.special import expit

from pinn_gravity._types import Dataset, FloatArray, GravityEval, as_points
from pinn_gravity.analytic import MasconModel, SphericalHarmonicModel, mascon_basis, sh_basis, sh_index
from pinn_gravity.errors import OnSurfaceError, RegressionError
from pinn_gravity.geometry import ShapeModel, interior_mask

logger = logging.getLogger(__name__)

RLS_BATCH = 100
COEFFICIENT_GROUP = 5000
MASCON_BATCH = 500
ALPHA_GRID = tuple(10.0**e for e in range(-10, -1))

BatchFn = Callable[[slice], tuple[FloatArray, FloatArray]]


@dataclass(frozen=True, eq=False)
class RlsState:
    """
    Recursive least squares state.

    Attributes:
        K_inv: Inverse information matrix, symmetric positive definite
        c: Coefficients, a vector or one column per target
    """

    K_inv: FloatArray
    c: FloatArray


def _cholesky(matrix: FloatArray, what: str) -> tuple[FloatArray, bool]:
    try:
        return cho_factor(matrix)
    except LinAlgError as e:
        raise RegressionError(f"{what} is not positive definite: numerical breakdown") from e


def rls_init(H0: FloatArray, y0: FloatArray, gamma: FloatArray) -> RlsState:
    """Initial state ``K0^-1 = (H0^T H0 + diag(gamma))^-1`` and ``c0 = K0^-1 H0^T y0``."""
    information = H0.T @ H0 + np.diag(gamma)
    factor = _cholesky(information, "Initial information matrix")
    K_inv = cho_solve(factor, np.eye(len(gamma)))
    return RlsState(K_inv=0.5 * (K_inv + K_inv.T), c=K_inv @ (H0.T @ y0))


def rls_update(state: RlsState, H_batch: FloatArray, a_batch: FloatArray) -> RlsState:
    """
    One recursive least squares update.

    ``K^-1 <- K^-1 - K^-1 H^T (I + H K^-1 H^T)^-1 H K^-1`` and ``c <- c + K^-1 H^T (a - H c)``.

    Raises:
        RegressionError: If the inner matrix cannot be factored or ``K^-1`` stops being positive definite
    """
    if len(H_batch) == 0:
        return state
    KH = state.K_inv @ H_batch.T
    inner = np.eye(len(H_batch)) + H_batch @ KH
    factor = _cholesky(inner, "RLS inner matrix")
    K_inv = state.K_inv - KH @ cho_solve(factor, KH.T)
    K_inv = 0.5 * (K_inv + K_inv.T)
    if np.any(np.diag(K_inv) <= 0.0):
        raise RegressionError("Inverse information matrix lost positive definiteness")
    c = state.c + K_inv @ (H_batch.T @ (a_batch - H_batch @ state.c))
    return RlsState(K_inv=K_inv, c=c)


def kaula_gamma(l_max: int, alpha: float) -> FloatArray:
    """Diagonal of the Kaula prior, ``alpha`` at degree 0 and ``alpha / l**2`` for every coefficient of degree ``l``."""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    degrees = np.array([n for _, n, _ in sh_index(l_max)], dtype=np.float64)
    return alpha / np.maximum(degrees, 1.0) ** 2


def coefficient_groups(l_max: int, group_size: int = COEFFICIENT_GROUP) -> list[slice]:
    """Contiguous coefficient slices of at most ``group_size``, lowest degree first."""
    total = (l_max + 1) ** 2
    return [slice(start, min(start + group_size, total)) for start in range(0, total, group_size)]


def _stack_rows(acc_basis: FloatArray) -> FloatArray:
    """``(N, 3, K)`` acceleration basis to ``(3N, K)`` design rows."""
    return acc_basis.reshape(-1, acc_basis.shape[-1])


def _exterior(data: Dataset, R: float) -> tuple[FloatArray, FloatArray]:
    r = np.linalg.norm(data.positions, axis=1)
    keep = r >= R
    dropped = int((~keep).sum())
    if dropped:
        logger.info(f"Dropped {dropped} of {len(data)} samples beneath the Brillouin sphere")
    if not keep.any():
        raise RegressionError("Every sample lies beneath the Brillouin sphere")
    return data.positions[keep], data.accelerations[keep]


def _rls_stream(batch: BatchFn, gamma: FloatArray, n_samples: int, batch_size: int) -> FloatArray:
    """
    Coefficients from streaming every batch through recursive least squares.

    Leading batches are stacked until they hold at least as many rows as unknowns and their information matrix
    factors. If the whole dataset never gets there, the regularized least squares solution of all rows is returned.
    """
    # Fewer rows than unregularized unknowns always leaves the information matrix singular.
    unconstrained = int(np.count_nonzero(gamma == 0.0))
    state: Optional[RlsState] = None
    pending_H: list[FloatArray] = []
    pending_y: list[FloatArray] = []
    for start in range(0, n_samples, batch_size):
        H, y = batch(slice(start, start + batch_size))
        if state is not None:
            state = rls_update(state, H, y)
            continue
        pending_H.append(H)
        pending_y.append(y)
        H0, y0 = np.concatenate(pending_H), np.concatenate(pending_y)
        last = start + batch_size >= n_samples
        if (len(H0) < len(gamma) and not last) or len(H0) < unconstrained:
            continue
        try:
            state = rls_init(H0, y0, gamma)
        except RegressionError:
            logger.debug(f"Information matrix of the first {len(H0)} rows does not factor yet")
    if state is not None:
        return state.c
    if not pending_H:
        raise RegressionError("No samples to regress")
    H0, y0 = np.concatenate(pending_H), np.concatenate(pending_y)
    logger.warning(
        f"Information matrix of {len(H0)} rows and {len(gamma)} unknowns is singular; using a least squares solution"
    )
    prior = np.diag(np.sqrt(gamma))
    solution, _, rank, _ = lstsq(np.vstack([H0, prior]), np.concatenate([y0, np.zeros((len(gamma), *y0.shape[1:]))]))
    logger.info(f"Least squares rank {rank} of {len(gamma)}")
    return solution


def regress_sh(
    data: Dataset,
    l_max: int,
    alpha: float,
    mu: float,
    R: float,
    batch_size: int = RLS_BATCH,
    group_size: int = COEFFICIENT_GROUP,
) -> SphericalHarmonicModel:
    """
    Regress fully normalized Stokes coefficients from acceleration data.

    Samples beneath the Brillouin sphere are omitted. Coefficient groups are regressed one after another, each
    against the accelerations the previous groups leave unexplained.

    Raises:
        RegressionError: If no sample lies on or above the Brillouin sphere, or the recursion breaks down
    """
    positions, accelerations = _exterior(data, R)
    x_nd = positions / R
    residual = accelerations / (mu / R**2)
    gamma = kaula_gamma(l_max, alpha)
    coefficients = np.zeros((l_max + 1) ** 2)
    for group in coefficient_groups(l_max, group_size):

        def design(index: slice, group: slice = group) -> FloatArray:
            return _stack_rows(sh_basis(x_nd[index], 1.0, 1.0, l_max)[1][:, :, group])

        def batch(index: slice, design: Callable[[slice], FloatArray] = design) -> tuple[FloatArray, FloatArray]:
            return design(index), residual[index].reshape(-1)

        coefficients[group] = _rls_stream(batch, gamma[group], len(x_nd), batch_size)
        for start in range(0, len(x_nd), batch_size):
            index = slice(start, start + batch_size)
            residual[index] -= (design(index) @ coefficients[group]).reshape(-1, 3)
        logger.info(
            f"Regressed coefficients {group.start}..{group.stop - 1} of degree {l_max}; "
            f"residual RMS {math.sqrt(np.mean(residual**2)):.3g}"
        )
    return SphericalHarmonicModel.from_vector(mu, R, l_max, coefficients)


def cross_validate_alpha(
    data: Dataset,
    l_max: int,
    mu: float,
    R: float,
    grid: Sequence[float] = ALPHA_GRID,
    folds: int = 3,
    seed: int = 0,
) -> float:
    """
    Kaula ``alpha`` with the lowest mean held-out percent error under ``folds``-fold cross-validation.

    Each fold is solved in closed form, which equals the streamed RLS solution.
    """
    positions, accelerations = _exterior(data, R)
    if len(positions) < folds:
        raise RegressionError(f"Cross-validation needs at least {folds} exterior samples")
    _, acc_basis = sh_basis(positions / R, 1.0, 1.0, l_max)
    targets = accelerations / (mu / R**2)
    fold_of = np.random.default_rng(seed).permutation(len(positions)) % folds
    best_alpha, best_error = grid[0], math.inf
    for alpha in grid:
        gamma = kaula_gamma(l_max, alpha)
        errors = []
        for fold in range(folds):
            train, test = fold_of != fold, fold_of == fold
            H = _stack_rows(acc_basis[train])
            c = solve(H.T @ H + np.diag(gamma), H.T @ targets[train].reshape(-1), assume_a="pos")
            predicted = acc_basis[test] @ c
            truth = targets[test]
            errors.append(np.mean(np.linalg.norm(predicted - truth, axis=1) / np.linalg.norm(truth, axis=1)))
        error = float(np.mean(errors))
        logger.debug(f"alpha={alpha:.1e}: held-out error {100 * error:.4g}%")
        if error < best_error:
            best_alpha, best_error = alpha, error
    logger.info(f"Cross-validated alpha={best_alpha:.1e} ({100 * best_error:.4g}% held-out error)")
    return best_alpha


# ---------------------------------------------------------------------------
# Mascons
# ---------------------------------------------------------------------------


def sample_interior(shape: ShapeModel, n: int, seed: int) -> FloatArray:
    """Rejection-sample ``n`` points uniformly inside the shape from its bounding box."""
    rng = np.random.default_rng(seed)
    low, high = shape.vertices.min(axis=0), shape.vertices.max(axis=0)
    accepted: list[FloatArray] = []
    count = 0
    while count < n:
        candidates = rng.uniform(low, high, size=(max(2 * (n - count), 64), 3))
        try:
            inside = candidates[interior_mask(shape, candidates)]
        except OnSurfaceError:
            continue
        accepted.append(inside)
        count += len(inside)
    return np.concatenate(accepted)[:n]


def _batch_lstsq(H: FloatArray, y: FloatArray) -> FloatArray:
    solution, _, rank, _ = lstsq(H, y)
    if rank < H.shape[1]:
        normal = H.T @ H
        ridge = 1e-10 * np.trace(normal) / H.shape[1]
        logger.warning(f"Rank-deficient mascon batch (rank {rank} of {H.shape[1]}); falling back to ridge {ridge:.3g}")
        solution = solve(normal + ridge * np.eye(H.shape[1]), H.T @ y, assume_a="pos")
    return solution


def regress_mascons(
    data: Dataset,
    shape: ShapeModel,
    n_total: int,
    mu: float,
    seed: int = 0,
    batch_size: int = MASCON_BATCH,
    positions: Optional[npt.ArrayLike] = None,
) -> MasconModel:
    """
    Place mascons uniformly inside the shape and fit their masses in batches.

    Each batch is solved by least squares on the residual accelerations and its contribution subtracted before the
    next batch. Masses are unconstrained in sign.

    Args:
        data: Position and acceleration samples
        shape: Body shape used to place the mascons
        n_total: Number of mascons
        mu: Body gravitational parameter
        seed: Placement seed
        batch_size: Mascons regressed per batch
        positions: Explicit mascon positions overriding random placement
    """
    if n_total < 1:
        raise ValueError(f"n_total must be at least 1, got {n_total}")
    R = shape.radius
    if positions is None:
        placed = sample_interior(shape, n_total, seed)
    else:
        placed = as_points(positions)
        if len(placed) != n_total:
            raise ValueError(f"Got {len(placed)} mascon positions for n_total={n_total}")
    x_nd = data.positions / R
    p_nd = placed / R
    residual = (data.accelerations / (mu / R**2)).reshape(-1)
    mus = np.zeros(n_total)
    for start in range(0, n_total, batch_size):
        index = slice(start, start + batch_size)
        H = _stack_rows(mascon_basis(x_nd, p_nd[index])[1])
        mus[index] = _batch_lstsq(H, residual)
        residual = residual - H @ mus[index]
        logger.info(f"Mascons {start}..{min(start + batch_size, n_total) - 1}: residual norm {np.linalg.norm(residual):.6g}")
    mus = mus * mu
    logger.info(f"Mascon total mu {mus.sum():.6g} against body mu {mu:.6g}")
    return MasconModel(positions=placed, mus=mus, seed=seed if positions is None else None)


# ---------------------------------------------------------------------------
# Extreme learning machine
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ElmModel:
    """
    Single hidden layer of frozen random sigmoid features with a regressed linear output.

    Inputs and outputs are min-max scaled to ``[0, 1]``. Predicts accelerations only.
    """

    input_weights: FloatArray
    hidden_bias: FloatArray
    output_weights: FloatArray
    x_low: FloatArray
    x_span: FloatArray
    a_low: FloatArray
    a_span: FloatArray
    seed: int = 0

    @property
    def n_hidden(self) -> int:
        return len(self.hidden_bias)

    @property
    def param_count(self) -> int:
        return self.input_weights.size + self.hidden_bias.size + self.output_weights.size

    def hidden(self, points: FloatArray) -> FloatArray:
        """Hidden activations with a trailing column of ones for the output bias."""
        scaled = (points - self.x_low) / self.x_span
        activations = expit(scaled @ self.input_weights.T + self.hidden_bias)
        return np.hstack([activations, np.ones((len(points), 1))])

    def evaluate(self, points: npt.ArrayLike) -> GravityEval:
        pts = as_points(points)
        return GravityEval(potential=None, acceleration=self.hidden(pts) @ self.output_weights * self.a_span + self.a_low)


def _minmax(values: FloatArray) -> tuple[FloatArray, FloatArray]:
    low, high = values.min(axis=0), values.max(axis=0)
    return low, np.where(high > low, high - low, 1.0)


def regress_elm(
    data: Dataset,
    n_hidden: int,
    alpha: float = 1e-8,
    seed: int = 0,
    batch_size: int = RLS_BATCH,
) -> ElmModel:
    """Draw uniform ``[-1, 1]`` hidden weights from ``seed`` and fit the output layer by ridge RLS with ``alpha I``."""
    if n_hidden < 1:
        raise ValueError(f"n_hidden must be at least 1, got {n_hidden}")
    rng = np.random.default_rng(seed)
    x_low, x_span = _minmax(data.positions)
    a_low, a_span = _minmax(data.accelerations)
    model = ElmModel(
        input_weights=rng.uniform(-1.0, 1.0, size=(n_hidden, 3)),
        hidden_bias=rng.uniform(-1.0, 1.0, size=n_hidden),
        output_weights=np.zeros((n_hidden + 1, 3)),
        x_low=x_low,
        x_span=x_span,
        a_low=a_low,
        a_span=a_span,
        seed=seed,
    )
    Phi = model.hidden(data.positions)
    targets = (data.accelerations - a_low) / a_span
    gamma = np.full(n_hidden + 1, alpha)
    output_weights = _rls_stream(lambda index: (Phi[index], targets[index]), gamma, len(Phi), batch_size)
    logger.info(f"Regressed ELM with {n_hidden} hidden nodes ({model.param_count} parameters)")
    return ElmModel(
        input_weights=model.input_weights,
        hidden_bias=model.hidden_bias,
        output_weights=output_weights,
        x_low=x_low,
        x_span=x_span,
        a_low=a_low,
        a_span=a_span,
        seed=seed,
    )
