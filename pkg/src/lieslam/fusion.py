"""Factor graph over planar robot states and its MAP solver.

Every node holds an 8-vector ``(x, y, theta, vx, vy, bg, bax, bay)``; all
Jacobians are taken with respect to an additive perturbation of that vector.
The solver is Levenberg-Marquardt over a sparse normal system. Repeated calls
warm-start from the previous estimate and only relinearize factors whose
variables have moved, then finish with fully refreshed linearizations so the
answer matches a cold batch solve.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import STATE_DIM, RobotState
from .encoder import SlipReport, WheelOdomDelta
from .imu import ImuNoiseParams, PreintegratedImu
from .lidar import DegradationReport, ScanMatchResult
from .weights import WeightParams, weight_from_deviation

__all__ = [
    "FactorKind",
    "Factor",
    "FactorGraph",
    "OptimizerConfig",
    "SingularSystemError",
    "WeightParams",
    "weight_from_deviation",
    "prior_factor",
    "imu_factor",
    "encoder_factor",
    "lidar_factor",
    "bias_walk_factor",
    "linearize",
    "optimize",
    "batch_solve",
    "total_cost",
]


class FactorKind(enum.Enum):
    PRIOR = "prior"
    IMU = "imu"
    ENCODER = "encoder"
    LIDAR = "lidar"
    BIAS_WALK = "bias_walk"


RESIDUAL_DIM = {
    FactorKind.PRIOR: STATE_DIM,
    FactorKind.IMU: 5,
    FactorKind.ENCODER: 3,
    FactorKind.LIDAR: 3,
    FactorKind.BIAS_WALK: 3,
}


class SingularSystemError(RuntimeError):
    """The normal equations have no unique solution (under-constrained graph)."""


@dataclass
class Factor:
    kind: FactorKind
    endpoints: tuple[int, ...]
    measurement: object
    information: np.ndarray
    weight: float = 1.0
    degraded: bool = False
    excluded: bool = False

    def __post_init__(self):
        self.endpoints = tuple(int(e) for e in self.endpoints)
        self.information = np.asarray(self.information, dtype=float)
        dim = RESIDUAL_DIM[self.kind]
        if self.information.shape != (dim, dim):
            raise ValueError(f"{self.kind.value} factor needs a {dim}x{dim} information matrix")
        if not 0 < self.weight <= 1:
            raise ValueError(f"weight must lie in (0, 1], got {self.weight}")
        expected = 1 if self.kind is FactorKind.PRIOR else 2
        if len(self.endpoints) != expected:
            raise ValueError(f"{self.kind.value} factor takes {expected} endpoint(s)")

    @property
    def effective_information(self) -> np.ndarray:
        return self.weight * self.information


# --- factor constructors -------------------------------------------------------


def _inverse_psd(cov: np.ndarray, floor: float) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    info = np.linalg.inv(cov + floor * np.eye(len(cov)))
    return 0.5 * (info + info.T)


def prior_factor(node: int, mean: RobotState, information=None) -> Factor:
    if information is None:
        information = 1e6 * np.eye(STATE_DIM)
    return Factor(FactorKind.PRIOR, (node,), mean.to_vector(), information)


def imu_factor(i: int, j: int, pre: PreintegratedImu, cov_floor: float = 1e-12) -> Factor:
    return Factor(FactorKind.IMU, (i, j), pre, _inverse_psd(pre.covariance, cov_floor))


def bias_walk_factor(i: int, j: int, dt: float, noise: ImuNoiseParams) -> Factor:
    info = _inverse_psd(noise.bias_walk_covariance(dt), 1e-18)
    return Factor(FactorKind.BIAS_WALK, (i, j), np.zeros(3), info)


def encoder_factor(
    i: int,
    j: int,
    odom: WheelOdomDelta,
    slip: SlipReport | None = None,
    weight: float = 1.0,
    cov_floor: float = 1e-8,
) -> Factor:
    return Factor(
        FactorKind.ENCODER,
        (i, j),
        odom.delta.as_array()[[2, 0, 1]],
        _inverse_psd(odom.covariance, cov_floor),
        weight=weight,
        excluded=bool(slip.excluded) if slip is not None else False,
    )


def lidar_factor(
    i: int, j: int, match: ScanMatchResult, report: DegradationReport | None = None
) -> Factor:
    weight = report.weight if report is not None else 1.0
    info = 0.5 * (match.information + match.information.T) + 1e-9 * np.eye(3)
    return Factor(
        FactorKind.LIDAR,
        (i, j),
        match.relative_pose.as_array()[[2, 0, 1]],
        info,
        weight=weight,
        degraded=bool(report.degraded) if report is not None else False,
    )


# --- residuals and Jacobians -----------------------------------------------------
#
# Factors of one kind are evaluated together: each evaluator takes the packed
# measurements of K factors plus their endpoint states and returns residuals
# (K, d) and, on request, Jacobians (K, d, 8 * endpoints) with the endpoint
# blocks side by side.


def _wrap(a: np.ndarray) -> np.ndarray:
    w = np.remainder(a + math.pi, 2 * math.pi) - math.pi
    return np.where(w == -math.pi, math.pi, w)


def _rt_apply(c, s, u):
    """R(theta)^T u for stacked angles (as cos, sin) and 2-vectors."""
    return np.stack([c * u[:, 0] + s * u[:, 1], -s * u[:, 0] + c * u[:, 1]], axis=1)


def _rt_stack(c, s):
    return np.stack([np.stack([c, s], axis=-1), np.stack([-s, c], axis=-1)], axis=1)


def _pack_prior(fs):
    return {"m": np.array([f.measurement for f in fs], dtype=float)}


def _pack_vector(fs):
    return {"m": np.array([np.asarray(f.measurement, dtype=float) for f in fs])}


def _pack_imu(fs):
    pres = [f.measurement for f in fs]
    return {
        "dr": np.array([p.delta_r for p in pres]),
        "dp": np.array([p.delta_p for p in pres]),
        "dv": np.array([p.delta_v for p in pres]),
        "blin": np.array([p.bias_lin for p in pres]),
        "jb": np.array([p.bias_jacobian for p in pres]),
        "T": np.array([p.dt_total for p in pres]),
    }


def _prior(d, xs, jac: bool):
    (x,) = xs
    r = x - d["m"]
    r[:, 2] = _wrap(r[:, 2])
    if not jac:
        return r, None
    return r, np.tile(np.eye(STATE_DIM), (len(r), 1, 1))


def _bias_walk(d, xs, jac: bool):
    xi, xj = xs
    r = xj[:, 5:8] - xi[:, 5:8] - d["m"]
    if not jac:
        return r, None
    J = np.zeros((len(r), 3, 2 * STATE_DIM))
    J[:, :, 5:8] = -np.eye(3)
    J[:, :, 13:16] = np.eye(3)
    return r, J


def _relative_pose(d, xs, jac: bool):
    xi, xj = xs
    m = d["m"]
    c, s = np.cos(xi[:, 2]), np.sin(xi[:, 2])
    a = _rt_apply(c, s, xj[:, 0:2] - xi[:, 0:2])
    r = np.empty((len(m), 3))
    r[:, 0] = _wrap(xj[:, 2] - xi[:, 2] - m[:, 0])
    r[:, 1:3] = a - m[:, 1:3]
    if not jac:
        return r, None
    Rt = _rt_stack(c, s)
    J = np.zeros((len(m), 3, 2 * STATE_DIM))
    J[:, 0, 2] = -1.0
    J[:, 1:3, 0:2] = -Rt
    # d(R^T u)/dtheta = -S R^T u
    J[:, 1, 2] = a[:, 1]
    J[:, 2, 2] = -a[:, 0]
    J[:, 0, 10] = 1.0
    J[:, 1:3, 8:10] = Rt
    return r, J


def _imu(d, xs, jac: bool):
    xi, xj = xs
    T = d["T"]
    jb = d["jb"]
    corr = (jb @ (xi[:, 5:8] - d["blin"])[:, :, None])[:, :, 0]
    c, s = np.cos(xi[:, 2]), np.sin(xi[:, 2])
    a = _rt_apply(c, s, xj[:, 0:2] - xi[:, 0:2] - xi[:, 3:5] * T[:, None])
    b = _rt_apply(c, s, xj[:, 3:5] - xi[:, 3:5])
    r = np.empty((len(T), 5))
    r[:, 0] = _wrap(xj[:, 2] - xi[:, 2] - (d["dr"] + corr[:, 0]))
    r[:, 1:3] = a - (d["dp"] + corr[:, 1:3])
    r[:, 3:5] = b - (d["dv"] + corr[:, 3:5])
    if not jac:
        return r, None
    Rt = _rt_stack(c, s)
    J = np.zeros((len(T), 5, 2 * STATE_DIM))
    J[:, 0, 2] = -1.0
    J[:, 1:3, 0:2] = -Rt
    J[:, 1, 2] = a[:, 1]
    J[:, 2, 2] = -a[:, 0]
    J[:, 1:3, 3:5] = -Rt * T[:, None, None]
    J[:, 3, 2] = b[:, 1]
    J[:, 4, 2] = -b[:, 0]
    J[:, 3:5, 3:5] = -Rt
    J[:, :, 5:8] = -jb
    J[:, 0, 10] = 1.0
    J[:, 1:3, 8:10] = Rt
    J[:, 3:5, 11:13] = Rt
    return r, J


_EVAL = {
    FactorKind.PRIOR: (_pack_prior, _prior),
    FactorKind.IMU: (_pack_imu, _imu),
    FactorKind.ENCODER: (_pack_vector, _relative_pose),
    FactorKind.LIDAR: (_pack_vector, _relative_pose),
    FactorKind.BIAS_WALK: (_pack_vector, _bias_walk),
}


class _Batch:
    """All factors of one kind, packed for vectorized evaluation."""

    def __init__(self, kind: FactorKind, index: np.ndarray, factors: Sequence[Factor]):
        self.kind = kind
        self.index = index
        self.nodes = np.array([f.endpoints for f in factors], dtype=np.int64)
        self.info = np.array([f.effective_information for f in factors])
        pack, self._fn = _EVAL[kind]
        self.data = pack(factors)
        self.dofs = (self.nodes[:, :, None] * STATE_DIM + np.arange(STATE_DIM)).reshape(len(index), -1)

    def __len__(self):
        return len(self.index)

    def stacked(self, X: np.ndarray) -> np.ndarray:
        return X[self.nodes].reshape(len(self), -1)

    def evaluate(self, X: np.ndarray, jac: bool):
        xs = [X[self.nodes[:, e]] for e in range(self.nodes.shape[1])]
        return self._fn(self.data, xs, jac)

    def cost(self, r: np.ndarray) -> float:
        return 0.5 * float(np.sum(r * (self.info @ r[:, :, None])[:, :, 0]))


def _batches(factors: Sequence[Factor]) -> list[_Batch]:
    groups: dict[FactorKind, list[int]] = {}
    for k, f in enumerate(factors):
        groups.setdefault(f.kind, []).append(k)
    return [
        _Batch(kind, np.array(idx), [factors[k] for k in idx]) for kind, idx in groups.items()
    ]


def _as_vector(s) -> np.ndarray:
    if isinstance(s, RobotState):
        return s.to_vector()
    return np.asarray(s, dtype=float)


def _single(factor: Factor, states, jac: bool):
    X = np.array([_as_vector(states[e]) for e in factor.endpoints])
    batch = _Batch(factor.kind, np.array([0]), [factor])
    batch.nodes = np.arange(len(factor.endpoints))[None, :]
    r, J = batch.evaluate(X, jac)
    return r[0], J


def linearize(factor: Factor, states) -> tuple[np.ndarray, list[np.ndarray]]:
    """Residual and per-endpoint Jacobians at ``states``.

    ``states`` is indexed by node id and may hold RobotState objects or raw
    8-vectors.
    """
    r, J = _single(factor, states, True)
    return r, [J[0, :, k * STATE_DIM : (k + 1) * STATE_DIM].copy() for k in range(len(factor.endpoints))]


def factor_residual(factor: Factor, states) -> np.ndarray:
    return _single(factor, states, False)[0]


# --- graph ----------------------------------------------------------------------


class FactorGraph:
    """States as nodes, sensor constraints as weighted factors."""

    def __init__(self):
        self.timestamps: list[float] = []
        self._values = np.zeros((0, STATE_DIM))
        self._initial = np.zeros((0, STATE_DIM))
        self.factors: list[Factor] = []
        self.rejected: list[Factor] = []
        self._cache: dict[int, tuple[np.ndarray, list[np.ndarray]]] = {}

    def __len__(self):
        return len(self.timestamps)

    @property
    def values(self) -> np.ndarray:
        return self._values.copy()

    @property
    def initial_values(self) -> np.ndarray:
        return self._initial.copy()

    def state(self, node: int) -> RobotState:
        return RobotState.from_vector(self._values[node])

    def states(self) -> list[RobotState]:
        return [RobotState.from_vector(v) for v in self._values]

    def set_values(self, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.shape != self._values.shape:
            raise ValueError("value array does not match graph size")
        self._values = values.copy()

    def add_state(self, timestamp: float, initial_guess: RobotState) -> int:
        if self.timestamps and not timestamp > self.timestamps[-1]:
            raise ValueError(
                f"state timestamp {timestamp} does not follow {self.timestamps[-1]}"
            )
        v = initial_guess.to_vector()[None, :]
        self._values = np.vstack([self._values, v])
        self._initial = np.vstack([self._initial, v])
        self.timestamps.append(float(timestamp))
        return len(self.timestamps) - 1

    def add_factor(self, factor: Factor) -> bool:
        """Insert ``factor`` unless its sensor was flagged unreliable."""
        for e in factor.endpoints:
            if not 0 <= e < len(self):
                raise ValueError(f"factor endpoint {e} is not a node of the graph")
        if (factor.kind is FactorKind.LIDAR and factor.degraded) or (
            factor.kind is FactorKind.ENCODER and factor.excluded
        ):
            self.rejected.append(factor)
            return False
        self.factors.append(factor)
        return True

    def replace_factor(self, index: int, factor: Factor):
        old = self.factors[index]
        if old.kind is not factor.kind or old.endpoints != factor.endpoints:
            raise ValueError("replacement must keep the factor kind and endpoints")
        self._cache.pop(id(old), None)
        self.factors[index] = factor

    def count(self, kind: FactorKind) -> int:
        return sum(1 for f in self.factors if f.kind is kind)

    def check_connected(self):
        """Raise if some node cannot be reached from node 0 through factors."""
        n = len(self)
        parent = list(range(n))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for f in self.factors:
            if len(f.endpoints) == 2:
                a, b = find(f.endpoints[0]), find(f.endpoints[1])
                if a != b:
                    parent[b] = a
        root = find(0) if n else 0
        orphans = [k for k in range(n) if find(k) != root]
        if orphans:
            raise ValueError(f"nodes {orphans[:5]} are not connected to node 0")


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 50
    lambda_init: float = 1e-4
    update_tolerance: float = 1e-8
    relin_threshold: float = 1e-3

    def __post_init__(self):
        for name in ("max_iterations", "lambda_init", "update_tolerance", "relin_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class OptimizeStats:
    iterations: int = 0
    relinearized: int = 0
    reused: int = 0
    costs: list = field(default_factory=list)


def _retract(X: np.ndarray, dx: np.ndarray) -> np.ndarray:
    Y = X + dx.reshape(X.shape)
    Y[:, 2] = np.remainder(Y[:, 2] + math.pi, 2 * math.pi) - math.pi
    # keep the (-pi, pi] convention used by wrap_angle
    Y[:, 2] = np.where(Y[:, 2] == -math.pi, math.pi, Y[:, 2])
    return Y


def _cost(batches: Sequence[_Batch], X: np.ndarray) -> tuple[float, list[np.ndarray]]:
    residuals = [b.evaluate(X, False)[0] for b in batches]
    return sum(b.cost(r) for b, r in zip(batches, residuals)), residuals


def total_cost(graph: FactorGraph, values: np.ndarray | None = None) -> float:
    X = graph._values if values is None else np.asarray(values, dtype=float)
    return _cost(_batches(graph.factors), X)[0]


class _Pattern:
    """Fixed CSC sparsity of the normal matrix for one set of factors.

    Built once per solve so that each iteration only scatters block values.
    """

    def __init__(self, n_nodes: int, batches: Sequence[_Batch]):
        self.size = size = n_nodes * STATE_DIM
        rows, cols = [], []
        for b in batches:
            w = b.dofs.shape[1]
            rows.append(np.broadcast_to(b.dofs[:, :, None], (len(b), w, w)).ravel())
            cols.append(np.broadcast_to(b.dofs[:, None, :], (len(b), w, w)).ravel())
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        keys, self.slot = np.unique(cols * size + rows, return_inverse=True)
        self.indices = (keys % size).astype(np.int32)
        kc = keys // size
        self.indptr = np.searchsorted(kc, np.arange(size + 1)).astype(np.int32)
        self.diag = np.searchsorted(keys, np.arange(size) * (size + 1))
        if not np.array_equal(keys[np.minimum(self.diag, len(keys) - 1)], np.arange(size) * (size + 1)):
            raise SingularSystemError("some state has no factor attached")

    def matrix(self, data: np.ndarray) -> sp.csc_matrix:
        return sp.csc_matrix((data, self.indices, self.indptr), shape=(self.size, self.size))


def _assemble(pattern: _Pattern, batches, residuals, jacobians):
    g = np.zeros(pattern.size)
    vals = []
    for b, r, J in zip(batches, residuals, jacobians):
        WJ = b.info @ J
        Jt = J.transpose(0, 2, 1)
        vals.append((Jt @ WJ).ravel())
        g += np.bincount(b.dofs.ravel(), weights=(Jt @ (b.info @ r[:, :, None])).ravel(), minlength=pattern.size)
    data = np.bincount(pattern.slot, weights=np.concatenate(vals), minlength=len(pattern.indices))
    return data, g


def _check_singular(H: sp.csc_matrix):
    try:
        lu = spla.splu(H)
    except RuntimeError as exc:
        raise SingularSystemError(f"normal equations are singular: {exc}") from None
    d = np.abs(lu.U.diagonal())
    if not np.all(np.isfinite(d)) or d.min() <= 1e-13 * d.max():
        raise SingularSystemError(
            "normal equations are numerically singular; the graph is under-constrained"
        )


def _solve(factors, X0, n_nodes, config: OptimizerConfig, cache, incremental, stats):
    batches = _batches(factors)
    # per batch: linearization points (nan = none yet) and cached Jacobians
    lin = []
    for b in batches:
        w = b.dofs.shape[1]
        L = np.full((len(b), w), np.nan)
        Jc = np.zeros((len(b), RESIDUAL_DIM[b.kind], w))
        if incremental:
            for row, k in enumerate(b.index):
                entry = cache.get(id(factors[k]))
                if entry is not None:
                    L[row], Jc[row] = entry
        lin.append((L, Jc))

    pattern = _Pattern(n_nodes, batches)
    X = X0.copy()
    lam = config.lambda_init
    cost, residuals = _cost(batches, X)
    stats.costs.append(cost)
    polish = not incremental
    checked = False
    for it in range(config.max_iterations):
        stats.iterations = it + 1
        all_fresh = True
        for b, (L, Jc) in zip(batches, lin):
            xs = b.stacked(X)
            if polish:
                stale = np.ones(len(b), dtype=bool)
            else:
                with np.errstate(invalid="ignore"):
                    stale = ~(np.max(np.abs(xs - L), axis=1) <= config.relin_threshold)
            if stale.any():
                _, J = b.evaluate(X, True)
                Jc[stale] = J[stale]
                L[stale] = xs[stale]
            n_stale = int(stale.sum())
            stats.relinearized += n_stale
            stats.reused += len(b) - n_stale
            all_fresh = all_fresh and np.array_equal(xs[~stale], L[~stale])
        data, g = _assemble(pattern, batches, residuals, [Jc for _, Jc in lin])
        if not checked:
            _check_singular(pattern.matrix(data))
            checked = True
        damped = data.copy()
        damped[pattern.diag] += lam * np.maximum(data[pattern.diag], 1e-12)
        A = pattern.matrix(damped)
        try:
            dx = -spla.splu(A).solve(g)
        except RuntimeError as exc:
            raise SingularSystemError(str(exc)) from None
        step = float(np.max(np.abs(dx))) if len(dx) else 0.0
        Xn = _retract(X, dx)
        cost_n, res_n = _cost(batches, Xn)
        if cost_n <= cost:
            X, cost, residuals = Xn, cost_n, res_n
            stats.costs.append(cost)
            lam = max(lam / 10.0, 1e-12)
        else:
            lam *= 10.0
        if step < config.update_tolerance:
            if all_fresh or polish:
                break
            polish = True

    if incremental:
        for b, (L, Jc) in zip(batches, lin):
            for row, k in enumerate(b.index):
                cache[id(factors[k])] = (L[row], Jc[row])
    return X


def optimize(graph: FactorGraph, config: OptimizerConfig | None = None, stats=None) -> list[RobotState]:
    """Warm-started MAP estimate; updates ``graph`` in place and returns the states."""
    config = config or OptimizerConfig()
    stats = stats if stats is not None else OptimizeStats()
    if not len(graph):
        return []
    graph.check_connected()
    live = {id(f) for f in graph.factors}
    for key in list(graph._cache):
        if key not in live:
            del graph._cache[key]
    X = _solve(graph.factors, graph._values, len(graph), config, graph._cache, True, stats)
    graph._values = X
    return graph.states()


def batch_solve(graph: FactorGraph, config: OptimizerConfig | None = None, stats=None) -> np.ndarray:
    """Cold full-relinearization solve from the stored initial guesses.

    The graph is left untouched; the solution is returned as an (N, 8) array.
    """
    config = config or OptimizerConfig()
    stats = stats if stats is not None else OptimizeStats()
    if not len(graph):
        return np.zeros((0, STATE_DIM))
    graph.check_connected()
    return _solve(graph.factors, graph._initial, len(graph), config, {}, False, stats)


def encoder_weight(slip: SlipReport, params: WeightParams) -> float:
    return weight_from_deviation(slip.discrepancy, params)
