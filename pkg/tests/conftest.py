import time

import numpy as np
import pytest

from reskd.artifact import StageArtifact
from reskd.data_io import gen_spirals
from reskd.net import Mlp, init_mlp
from reskd.pipeline import DistillConfig, run_reskd

REFERENCE_SEEDS = (0, 1, 2, 3, 4)

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE = {}
TIMINGS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def scaled_net(rng, widths, scale, activation="tanh"):
    net = init_mlp(widths, activation, rng)
    return Mlp(net.widths, activation, [w * scale for w in net.weights])


def make_fixture_artifact(seed=7):
    """Three res-students with random weights; logits are large enough that
    energies spread over most of [1/3, 1]."""
    rng = np.random.default_rng(seed)
    widths = [4, 6, 3]
    teacher = scaled_net(rng, [4, 8, 3], 3.0)
    s0 = scaled_net(rng, widths, 2.0)
    res = [scaled_net(rng, widths, 1.5) for _ in range(3)]
    return StageArtifact(teacher, s0, res, th_energy=0.6)


@pytest.fixture
def fixture_artifact():
    return make_fixture_artifact()


def reference_config(seed, **changes):
    # reference hyper-parameters; energy_fraction 1.0 keeps the stage cap
    # in charge so that R_2 always exists (S0 and S1 are unaffected)
    base = DistillConfig(seed=seed, max_stages=2, res_widths=[[4], [4]], energy_fraction=1.0)
    return base.replace(**changes)


def spirals_split():
    train = gen_spirals(100, 1000, turns=1.0, noise=0.05)
    test = gen_spirals(200, 250, turns=1.0, noise=0.05)
    return train, test


@pytest.fixture(scope="session")
def spirals_runs():
    """Reference runs on two-spirals (2000 train / 500 test), one per seed."""
    start = time.perf_counter()
    train, test = spirals_split()
    runs = [run_reskd(train, reference_config(seed)) for seed in REFERENCE_SEEDS]
    TIMINGS["spirals_runs"] = time.perf_counter() - start
    return train, test, runs


@pytest.fixture(scope="session")
def capacity_runs(spirals_runs):
    """R_1 widths [2] / [4] / [16] on the first three reference seeds, sharing
    each seed's teacher (and hence its S0)."""
    train, _, runs = spirals_runs
    out = {}
    for seed, ref in zip(REFERENCE_SEEDS[:3], runs):
        for w in (2, 16):
            cfg = reference_config(seed, max_stages=1, res_widths=[[w]])
            out[seed, w] = run_reskd(train, cfg, teacher=ref.teacher)
    return out
