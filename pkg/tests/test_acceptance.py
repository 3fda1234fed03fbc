"""Acceptance criteria 1-11 at their stated tolerances and time limits.

One PASS/FAIL line per criterion is printed in the terminal summary.
"""

import functools
import math
import statistics
import time

import numpy as np
import pytest

from rasda.cluster import ConservationError
from rasda.core import TrialResult, compute_ladder, sample_configuration
from rasda.dynamics import curve_params, doubling_schedule, equal_wallclock_losses, scaled_lr
from rasda.harness import cli
from rasda.harness.config import load_preset
from rasda.harness.report import ComparisonReport
from rasda.schedulers import Policy, Scheduler, SchedulerConfig, simulate_synchronous_sh
from rasda.simulator import run_simulation
from rasda.toy import (
    ToyProblemConfig,
    ToyTrainer,
    allreduce_average,
    estimate_gns,
    gns_from_grads,
    make_problem,
    mse_grad,
)

SEEDS = (0, 1, 2)
SIM_PRESETS = ("cv64", "am128", "cfd128")
CONSERVATION_FAILURES = []
RUNS = []


@functools.lru_cache(maxsize=None)
def simulate(preset, seed, policy):
    try:
        log, summary = run_simulation(load_preset(preset), seed, Policy(policy))
    except ConservationError as exc:
        CONSERVATION_FAILURES.append((preset, seed, policy, str(exc)))
        raise
    RUNS.append((preset, seed, policy))
    return log.to_jsonl(), summary


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


@pytest.mark.criterion(1, "ladder exactness")
def test_criterion_1_ladder_exactness():
    with Timer() as t:
        a = compute_ladder(5, 40, 2).milestones
        b = compute_ladder(5, 20, 2).milestones
    assert a == (5, 10, 20, 40)
    assert b == (5, 10, 20)
    assert t.elapsed < 1e-3


@pytest.mark.criterion(2, "resource trajectory [2,4,8,16] / [256,...,2048] in cv64")
def test_criterion_2_resource_trajectory():
    cfg = load_preset("cv64")
    with Timer() as t:
        _, summary = simulate("cv64", 0, "rasda")
    assert cfg.local_batch_size == 128
    assert summary.completed
    for tid in summary.completed:
        assert summary.workers_per_rung(tid, cfg.ladder.milestones) == [2, 4, 8, 16]
        assert summary.batch_per_rung(tid, cfg.ladder.milestones) == [256, 512, 1024, 2048]
    assert t.elapsed < 1.0


BANDS = {"cv64": (1.3, 2.0), "am128": (1.2, 1.9), "cfd128": (1.4, 2.1)}


@pytest.mark.criterion(3, "speed-up bands over 3 seeds")
@pytest.mark.parametrize("preset", SIM_PRESETS)
def test_criterion_3_speed_up_band(preset):
    lo, hi = BANDS[preset]
    with Timer() as t:
        summaries = [simulate(preset, s, p)[1] for s in SEEDS for p in ("asha", "rasda")]
    report = ComparisonReport(preset, summaries)
    report.check_complete()
    per_seed = report.seed_speed_ups()
    assert all(lo <= v <= hi for v in per_seed.values()), per_seed
    assert lo <= report.speed_up <= hi
    assert t.elapsed < 30.0


def _round_robin_survivors(metrics, ladder):
    s = Scheduler(SchedulerConfig("asha", ladder, 1))
    for i in range(len(metrics)):
        s.add_trial(i)
    alive = list(range(len(metrics)))
    reached = []
    for k, m in enumerate(ladder.milestones):
        reached.append(frozenset(alive))
        alive = [i for i in alive if not s.on_result(TrialResult(i, m, metrics[i][k], 0.0, 1)).stops]
    if ladder.milestones[-1] < ladder.max_t:
        reached.append(frozenset(alive))
    return reached


@pytest.mark.criterion(4, "round-robin on_result equals synchronous SH on 200 instances")
def test_criterion_4_scheduler_oracle_equivalence():
    rng = np.random.default_rng(2024)
    mismatches = []
    with Timer() as t:
        for instance in range(200):
            n = int(rng.integers(1, 17))
            rungs = int(rng.integers(1, 5))
            ladder = compute_ladder(1, 2 ** (rungs - 1), 2, 2)
            metrics = rng.uniform(size=(n, rungs)).tolist()
            if simulate_synchronous_sh(metrics, ladder) != _round_robin_survivors(metrics, ladder):
                mismatches.append(instance)
    assert t.elapsed < 5.0
    assert not mismatches, f"{len(mismatches)}/200 instances differ, first: {mismatches[:5]}"


@pytest.mark.criterion(5, "allreduce equals the union-batch gradient")
def test_criterion_5_gradient_averaging():
    worst = 0.0
    with Timer() as t:
        for n in (1, 2, 4, 8):
            for seed in range(100):
                rng = np.random.default_rng([seed, n])
                lb = 32
                x = rng.normal(size=(n * lb, 16))
                y = rng.normal(size=n * lb)
                w = rng.normal(size=16)
                local = [mse_grad(w, x[i * lb:(i + 1) * lb], y[i * lb:(i + 1) * lb]) for i in range(n)]
                full = mse_grad(w, x, y)
                rel = np.linalg.norm(allreduce_average(local) - full) / np.linalg.norm(full)
                worst = max(worst, float(rel))
    assert worst <= 1e-6
    assert t.elapsed < 10.0


@pytest.mark.criterion(6, "same global batch, same trajectory for N in {1,2,4}")
def test_criterion_6_same_global_batch():
    problem = make_problem(ToyProblemConfig(), 0)
    curves = {}
    with Timer() as t:
        for n in (1, 2, 4):
            for opt in ("sgd", "adam"):
                trainer = ToyTrainer({"lr": 0.01, "optimizer": opt}, problem, workers=n, global_batch_size=64, seed=0)
                curves[(n, opt)] = np.array([trainer.run_epoch() for _ in range(10)])
    for opt in ("sgd", "adam"):
        ref = curves[(1, opt)]
        for n in (2, 4):
            assert np.all(np.abs(curves[(n, opt)] - ref) <= 1e-5 * np.abs(ref))
    assert t.elapsed < 30.0


@pytest.mark.criterion(7, "GNS: zero, scale invariance, growth over training")
def test_criterion_7_gns():
    with Timer() as t:
        assert gns_from_grads(np.tile([0.5, -1.0, 2.0], (8, 1))).gns == 0.0
        problem = make_problem(ToyProblemConfig(), 0)
        w = np.random.default_rng(0).normal(size=problem.train.inputs.shape[1])
        for c in (1e-3, 0.5, 7.0, 1e3):
            a = estimate_gns(w, problem.train, seed=1).gns
            b = estimate_gns(w, problem.train, seed=1, loss_scale=c).gns
            assert abs(a - b) <= 1e-12 * abs(a)
        first, last = [], []
        for seed in range(20):
            p = make_problem(ToyProblemConfig(), seed)
            trainer = ToyTrainer({"lr": 0.01, "optimizer": "sgd"}, p, local_batch_size=32, seed=seed)
            trainer.run_epoch()
            first.append(estimate_gns(trainer.state.w, p.train, seed=1).gns)
            for _ in range(19):
                trainer.run_epoch()
            last.append(estimate_gns(trainer.state.w, p.train, seed=20).gns)
    assert statistics.median(last) > statistics.median(first)
    assert t.elapsed < 60.0


@pytest.mark.criterion(8, "LR scaling rules and warm-up continuity")
def test_criterion_8_lr_scaling():
    with Timer() as t:
        for n in (1, 2, 4, 8):
            for warm in (1, 2):
                assert scaled_lr(0.01, n, "sgd", warm, warm) == 0.01 * n
                assert scaled_lr(0.01, n, "adam", warm, warm + 0.5) == 0.01 * math.sqrt(n)
        prev, target = 0.01, 0.08
        steps = [i / 50 for i in range(101)]
        vals = [scaled_lr(0.01, 8, "sgd", 2, s, prev) for s in steps]
    assert vals[0] == prev and vals[-1] == target
    increment = (target - prev) / 100
    assert all(abs(b - a) <= increment * (1 + 1e-9) for a, b in zip(vals, vals[1:]))
    assert t.elapsed < 1e-3


def _schedule_quality_wins(preset, draws=100):
    cfg = load_preset(preset)
    lad = cfg.ladder
    ref = cfg.reference_batch
    sched = doubling_schedule(lad.milestones, lad.max_t, ref, lad.sf)
    secs, prev = [], None
    for bs in sched:
        n = bs // cfg.local_batch_size
        s = cfg.runtime.epoch_time(n)
        if prev is not None and n != prev:
            s += cfg.checkpoint.relaunch_cost
        secs.append(s)
        prev = n
    rng = np.random.default_rng(99)
    wins = 0
    for i in range(draws):
        curve = curve_params(sample_configuration(cfg.space, rng), cfg.space, i, cfg.curve)
        schedule_loss, constant_loss = equal_wallclock_losses(
            curve, sched, secs, cfg.runtime.epoch_time(cfg.base_resources), cfg.noise, ref
        )
        wins += schedule_loss <= constant_loss
    return wins


@pytest.mark.criterion(9, "quality non-degradation (simulator and toy)")
def test_criterion_9_quality():
    assert _schedule_quality_wins("cv64") >= 90
    with Timer() as t:
        ratios = []
        for seed in SEEDS:
            asha = simulate("toy", seed, "asha")[1]
            rasda = simulate("toy", seed, "rasda")[1]
            ratios.append(rasda.best_metric / asha.best_metric)
    assert statistics.median(ratios) <= 1.1, ratios
    assert t.elapsed < 300.0


@pytest.mark.criterion(10, "deterministic logs and replay verdicts")
def test_criterion_10_determinism_and_replay(tmp_path):
    with Timer() as t:
        paths = []
        for preset in SIM_PRESETS + ("toy",):
            for policy in ("asha", "rasda"):
                text = simulate(preset, 0, policy)[0]
                again = run_simulation(load_preset(preset), 0, Policy(policy))[0].to_jsonl()
                assert text == again
                path = tmp_path / f"{preset}_{policy}.jsonl"
                path.write_text(text)
                paths.append(str(path))
        assert cli.main(["replay", *paths]) == 0
        lines = (tmp_path / "cv64_rasda.jsonl").read_text().splitlines()
        idx = next(i for i, l in enumerate(lines) if '"ResourcesChanged"' in l)
        lines[idx] = lines[idx].replace('"new":4', '"new":5')
        bad = tmp_path / "mutated.jsonl"
        bad.write_text("\n".join(lines) + "\n")
        assert cli.main(["replay", str(bad)]) == 3
    assert t.elapsed < 10.0


@pytest.mark.criterion(11, "resource conservation never fires")
def test_criterion_11_conservation():
    for preset in SIM_PRESETS + ("toy",):
        for seed in SEEDS:
            for policy in ("asha", "rasda"):
                try:
                    simulate(preset, seed, policy)
                except ConservationError:
                    pass
    assert not CONSERVATION_FAILURES, CONSERVATION_FAILURES
    assert len(RUNS) == 4 * len(SEEDS) * 2
