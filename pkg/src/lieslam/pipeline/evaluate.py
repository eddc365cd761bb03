"""Trajectory error against ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import Trajectory, fmt

MATCH_WINDOW = 0.05


class EvaluationError(ValueError):
    pass


@dataclass
class ErrorReport:
    rmse_pos: float
    rmse_ang: float  # degrees
    n_pairs: int
    t: np.ndarray
    err_pos: np.ndarray
    err_ang: np.ndarray  # degrees

    def summary(self) -> str:
        return (
            f"rmse_pos {fmt(self.rmse_pos)}\n"
            f"rmse_ang {fmt(self.rmse_ang)}\n"
        )

    def errors_csv(self) -> str:
        rows = ["t,err_pos,err_ang"]
        rows += [f"{fmt(t)},{fmt(p)},{fmt(a)}" for t, p, a in zip(self.t, self.err_pos, self.err_ang)]
        return "\n".join(rows) + "\n"


def associate(est_t: np.ndarray, gt_t: np.ndarray, window: float = MATCH_WINDOW):
    """Index pairs (estimate, truth) with the nearest truth stamp within ``window``."""
    if len(gt_t) == 0 or len(est_t) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    k = np.clip(np.searchsorted(gt_t, est_t), 1, len(gt_t) - 1) if len(gt_t) > 1 else np.zeros(len(est_t), int)
    if len(gt_t) > 1:
        left = k - 1
        k = np.where(np.abs(gt_t[left] - est_t) <= np.abs(gt_t[k] - est_t), left, k)
    ok = np.abs(gt_t[k] - est_t) <= window + 1e-9
    return np.nonzero(ok)[0], k[ok]


def evaluate(est: Trajectory, truth: Trajectory, window: float = MATCH_WINDOW) -> ErrorReport:
    ie, ig = associate(est.t, truth.t, window)
    if len(ie) == 0:
        raise EvaluationError("no estimate lies within the matching window of a ground-truth pose")
    d = est.poses[ie] - truth.poses[ig]
    err_pos = np.hypot(d[:, 0], d[:, 1])
    err_ang = np.degrees(np.abs(np.remainder(d[:, 2] + math.pi, 2 * math.pi) - math.pi))
    return ErrorReport(
        rmse_pos=float(np.sqrt(np.mean(err_pos**2))),
        rmse_ang=float(np.sqrt(np.mean(err_ang**2))),
        n_pairs=len(ie),
        t=est.t[ie],
        err_pos=err_pos,
        err_ang=err_ang,
    )
