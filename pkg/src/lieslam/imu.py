"""IMU measurement model, preintegration and the relative-motion constraint.

Preintegrated quantities live in the frame of the first state of the interval.
Accelerometer readings are treated as already gravity compensated, in-plane.
Residuals and covariances are ordered (rotation, position x2, velocity x2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import SKEW, Pose2, RobotState, rot, wrap_angle


@dataclass(frozen=True)
class ImuSample:
    t: float
    omega: float
    accel: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "accel", (float(self.accel[0]), float(self.accel[1])))
        if not all(math.isfinite(v) for v in (self.t, self.omega, *self.accel)):
            raise ValueError(f"non-finite IMU sample at t={self.t}")


@dataclass(frozen=True)
class ImuNoiseParams:
    """Continuous-time noise densities."""

    sigma_gyro: float = 1e-3  # rad/s/sqrt(Hz)
    sigma_accel: float = 1e-2  # m/s^2/sqrt(Hz)
    sigma_gyro_walk: float = 2e-5  # rad/s^2/sqrt(Hz)
    sigma_accel_walk: float = 5e-4  # m/s^3/sqrt(Hz)

    def __post_init__(self):
        for name in ("sigma_gyro", "sigma_accel", "sigma_gyro_walk", "sigma_accel_walk"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    def bias_walk_covariance(self, dt: float) -> np.ndarray:
        """Covariance of (gyro, accel x, accel y) bias change over ``dt``."""
        g, a = self.sigma_gyro_walk**2, self.sigma_accel_walk**2
        return np.diag([g, a, a]) * dt


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PreintegratedImu:
    """Relative rotation/velocity/position accumulated between two states.

    ``bias_jacobian`` holds d(delta)/d(bias) (5x3) so that factors can respond
    to bias estimates away from ``bias_lin`` without reintegrating.
    """

    dt_total: float = 0.0
    delta_r: float = 0.0
    delta_v: np.ndarray = field(default_factory=lambda: np.zeros(2))
    delta_p: np.ndarray = field(default_factory=lambda: np.zeros(2))
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((5, 5)))
    bias_lin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_jacobian: np.ndarray = field(default_factory=lambda: np.zeros((5, 3)))

    def __post_init__(self):
        for name in ("delta_v", "delta_p", "covariance", "bias_lin", "bias_jacobian"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @classmethod
    def empty(cls, bias=(0.0, 0.0, 0.0)) -> "PreintegratedImu":
        return cls(bias_lin=np.asarray(bias, dtype=float).reshape(3))

    def deltas(self, bias=None) -> tuple[float, np.ndarray, np.ndarray]:
        """Return (dtheta, dp, dv), first-order corrected to ``bias`` if given."""
        if bias is None:
            return self.delta_r, np.array(self.delta_p), np.array(self.delta_v)
        db = np.asarray(bias, dtype=float) - self.bias_lin
        corr = self.bias_jacobian @ db
        return (
            self.delta_r + corr[0],
            self.delta_p + corr[1:3],
            self.delta_v + corr[3:5],
        )

    def __eq__(self, other):
        if not isinstance(other, PreintegratedImu):
            return NotImplemented
        return (
            self.dt_total == other.dt_total
            and self.delta_r == other.delta_r
            and all(
                np.array_equal(getattr(self, n), getattr(other, n))
                for n in ("delta_v", "delta_p", "covariance", "bias_lin", "bias_jacobian")
            )
        )

    __hash__ = None


def _advance(dr, dp, dv, cov, J, bias, omega, accel, dt, q):
    """One Euler step on raw arrays; shared by the single- and multi-sample paths."""
    w = omega - bias[0]
    a = np.array(accel, dtype=float) - bias[1:]
    R = rot(dr)
    Ra = R @ a
    dRa = R @ SKEW @ a  # derivative of R(dtheta) a wrt dtheta
    dt2 = dt * dt

    dp = dp + dv * dt + 0.5 * Ra * dt2
    dv = dv + Ra * dt
    dr = dr + w * dt

    # state transition over (dtheta, dp, dv)
    A = np.eye(5)
    A[1:3, 0] = 0.5 * dRa * dt2
    A[1:3, 3] = (dt, 0.0)
    A[1:3, 4] = (0.0, dt)
    A[3:5, 0] = dRa * dt
    # noise input over (n_gyro, n_accel x2)
    B = np.zeros((5, 3))
    B[0, 0] = dt
    B[1:3, 1:3] = 0.5 * R * dt2
    B[3:5, 1:3] = R * dt
    cov = A @ cov @ A.T + (B * (q / dt)) @ B.T
    cov = 0.5 * (cov + cov.T)
    # bias sensitivity; the bias enters with the same input matrix as the noise
    J = A @ J - B
    return dr, dp, dv, cov, J


def _check_piece(sample: ImuSample, dt: float):
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not (math.isfinite(sample.omega) and all(math.isfinite(a) for a in sample.accel)):
        raise ValueError("non-finite IMU sample")


def integrate(
    pre: PreintegratedImu, sample: ImuSample, dt: float, noise: ImuNoiseParams
) -> PreintegratedImu:
    """Advance the preintegration by one sample held constant for ``dt``."""
    return integrate_many(pre, [(sample, dt)], noise)


def integrate_many(
    pre: PreintegratedImu,
    pieces: Iterable[tuple[ImuSample, float]],
    noise: ImuNoiseParams,
) -> PreintegratedImu:
    q = np.array([noise.sigma_gyro**2, noise.sigma_accel**2, noise.sigma_accel**2])
    bias = pre.bias_lin
    dr, dp, dv, cov, J = pre.delta_r, pre.delta_p, pre.delta_v, pre.covariance, pre.bias_jacobian
    total = pre.dt_total
    n = 0
    for sample, dt in pieces:
        _check_piece(sample, dt)
        dr, dp, dv, cov, J = _advance(dr, dp, dv, cov, J, bias, sample.omega, sample.accel, dt, q)
        total += dt
        n += 1
    if n == 0:
        return pre
    return PreintegratedImu(
        dt_total=total,
        delta_r=dr,
        delta_v=dv,
        delta_p=dp,
        covariance=cov,
        bias_lin=bias,
        bias_jacobian=J,
    )


def knots(
    pieces: Sequence[tuple[ImuSample, float]], bias=(0.0, 0.0, 0.0)
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Preintegrated motion at every piece boundary.

    Returns (t, dtheta, dp) with t[0] = 0 and the last row equal to the
    deltas of ``integrate_many`` over the same pieces; dp excludes the
    initial-velocity term.
    """
    bias = np.asarray(bias, dtype=float)
    n = len(pieces)
    t = np.zeros(n + 1)
    th = np.zeros(n + 1)
    p = np.zeros((n + 1, 2))
    v = np.zeros(2)
    for k, (sample, dt) in enumerate(pieces):
        _check_piece(sample, dt)
        a = rot(th[k]) @ (np.array(sample.accel, dtype=float) - bias[1:])
        p[k + 1] = p[k] + v * dt + 0.5 * a * dt * dt
        v = v + a * dt
        th[k + 1] = th[k] + (sample.omega - bias[0]) * dt
        t[k + 1] = t[k] + dt
    return t, th, p


def predict(state_i: RobotState, pre: PreintegratedImu) -> RobotState:
    """Propagate ``state_i`` through the preintegrated motion."""
    dth, dp, dv = pre.deltas(state_i.bias)
    R = state_i.pose.rotation()
    T = pre.dt_total
    p = state_i.pose.t + state_i.velocity * T + R @ dp
    v = state_i.velocity + R @ dv
    return RobotState(
        Pose2(p[0], p[1], state_i.pose.theta + dth),
        v,
        state_i.gyro_bias,
        state_i.accel_bias,
    )


def residual(state_i: RobotState, state_j: RobotState, pre: PreintegratedImu) -> np.ndarray:
    """Actual-minus-predicted relative motion, expressed in the frame of ``state_i``."""
    dth, dp, dv = pre.deltas(state_i.bias)
    Rt = state_i.pose.rotation().T
    T = pre.dt_total
    pi, pj = state_i.pose.t, state_j.pose.t
    r = np.empty(5)
    r[0] = wrap_angle(state_j.pose.theta - state_i.pose.theta - dth)
    r[1:3] = Rt @ (pj - pi - state_i.velocity * T) - dp
    r[3:5] = Rt @ (state_j.velocity - state_i.velocity) - dv
    return r


def reset_with_bias(
    pre: PreintegratedImu,
    raw: Sequence[tuple[ImuSample, float]],
    new_bias,
    noise: ImuNoiseParams,
) -> PreintegratedImu:
    """Reintegrate the buffered ``(sample, dt)`` pieces from scratch at ``new_bias``."""
    total = 0.0
    for _, dt in raw:
        total += dt
    if abs(total - pre.dt_total) > 1e-9:
        raise ValueError(
            f"buffer spans {total} s but preintegration spans {pre.dt_total} s"
        )
    return integrate_many(PreintegratedImu.empty(new_bias), raw, noise)


def slice_pieces(
    times: np.ndarray, values: np.ndarray, t0: float, t1: float
) -> list[tuple[ImuSample, float]]:
    """Zero-order-hold pieces covering [t0, t1].

    Sample k is held over [t_k, t_{k+1}); the first sample also covers any gap
    before it. ``values`` rows are (omega, ax, ay).
    """
    if t1 < t0:
        raise ValueError("reversed interval")
    if t1 == t0 or len(times) == 0:
        return []
    n = len(times)
    k = max(int(np.searchsorted(times, t0, side="right")) - 1, 0)
    out = []
    start = t0
    while start < t1:
        end = min(times[k + 1], t1) if k + 1 < n else t1
        if end > start:
            w, ax, ay = values[k]
            out.append((ImuSample(start, w, (ax, ay)), end - start))
            start = end
        k += 1
    return out
