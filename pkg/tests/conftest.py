"""Shared builders for the test suite."""

import math
import sys

import numpy as np
import pytest

from lieslam.core import Pose2, RobotState
from lieslam.encoder import WheelOdomDelta
from lieslam.fusion import (
    FactorGraph,
    bias_walk_factor,
    encoder_factor,
    imu_factor,
    lidar_factor,
    optimize,
    prior_factor,
)
from lieslam.imu import ImuNoiseParams, ImuSample, PreintegratedImu, integrate_many, predict
from lieslam.lidar import ScanMatchResult

NOISE = ImuNoiseParams()


def random_state(rng, scale=1.0) -> RobotState:
    return RobotState(
        Pose2(*rng.normal(0, 2 * scale, 2), rng.uniform(-math.pi, math.pi)),
        rng.normal(0, 0.5 * scale, 2),
        rng.normal(0, 0.01),
        rng.normal(0, 0.05, 2),
    )


def random_pre(rng, n=10, bias=None) -> PreintegratedImu:
    bias = rng.normal(0, 0.01, 3) if bias is None else bias
    pieces = [(ImuSample(0.01 * k, rng.normal(0, 0.4), rng.normal(0, 0.5, 2)), 0.01) for k in range(n)]
    return integrate_many(PreintegratedImu.empty(bias), pieces, NOISE)


def random_info(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T + d * np.eye(d)


def odom_factor(kind, i, j, rel: Pose2, info):
    if kind == "encoder":
        cov = np.linalg.inv(info)
        return encoder_factor(i, j, WheelOdomDelta(rel, 0.5 * (cov + cov.T), 1.0), cov_floor=0.0)
    match = ScanMatchResult(rel, info, 5, True, 0.01)
    return lidar_factor(i, j, match)


def chain_steps(seed, n_nodes, noise=0.02):
    """Truth, initial guesses and per-node factor lists for a mixed random chain.

    Returns (truth, guesses, steps) where ``steps[k]`` lists the factors that
    become available when node ``k`` is added.
    """
    rng = np.random.default_rng(seed)
    truth = [RobotState(Pose2(), (0.3, 0.0))]
    steps = [[prior_factor(0, truth[0])]]
    for j in range(1, n_nodes):
        si = truth[-1]
        pre = random_pre(rng, 10, bias=si.bias)
        sj = predict(si, pre)
        sj = sj.retract(np.r_[rng.normal(0, noise, 5), rng.normal(0, 1e-4, 3)])
        truth.append(sj)
        fs = [imu_factor(j - 1, j, pre), bias_walk_factor(j - 1, j, pre.dt_total, NOISE)]
        rel = si.pose.between(sj.pose)
        for kind in ("encoder", "lidar"):
            if rng.random() < 0.7:
                noisy = Pose2(*(rel.as_array() + rng.normal(0, noise, 3)))
                fs.append(odom_factor(kind, j - 1, j, noisy, random_info(rng, 3) * 100))
        if j >= 3 and rng.random() < 0.2:
            k = j - 3
            rel2 = truth[k].pose.between(sj.pose)
            fs.append(odom_factor("lidar", k, j, Pose2(*(rel2.as_array() + rng.normal(0, noise, 3))), 100 * np.eye(3)))
        steps.append(fs)
    guesses = [s.retract(rng.normal(0, 0.05, 8) * [1, 1, 1, 1, 1, 0.01, 0.01, 0.01]) for s in truth]
    guesses[0] = truth[0]
    return truth, guesses, steps


def build_incremental(seed, n_nodes):
    _, guesses, steps = chain_steps(seed, n_nodes)
    g = FactorGraph()
    for k, (guess, fs) in enumerate(zip(guesses, steps)):
        g.add_state(0.1 * k, guess)
        for f in fs:
            g.add_factor(f)
        optimize(g)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
