"""Frozen parameters of the acceptance suite.

The sweeps are expensive, so they run through the resumable sweep engine
into a hash-keyed cache directory; a second pytest session reuses finished
cells byte-for-byte.  Set GRIDCHARGE_ACCEPTANCE_CACHE to relocate the
cache.
"""
import os
import tempfile

from gridcharge.cli import ExperimentPlan

from conftest import data_path

NETWORK12 = data_path("synthetic_tree12.csv")

# main desk-scale sweep (criteria 2, 3, 4, 6, 8, 9c)
GRID = tuple(round(0.05 * k, 10) for k in range(2, 9))      # 0.10 .. 0.40
RUNS_PER_CELL = 5
HORIZON = 5000.0
TRIM = 1000.0
WINDOW = 100.0
BASE_SEED = 2025

# algorithm-dependent critical point (criterion 7 analogue)
RATE_BETWEEN = 0.26          # between the two calibrated critical rates
TREND_HORIZON = 10_000.0
TREND_SEEDS = 5
TREND_BASE_SEED = 7000

# step-size robustness (criterion 9b)
SUBCRITICAL_RATE = 0.15
STEP_SEEDS = 5
STEP_BASE_SEED = 9100
STEP_HORIZON = 5000.0

# congested-regime Gini comparison (criterion 8), a grid point of the sweep
GINI_RATE = 0.35

CERT_SAMPLE_TARGET = 10_000   # criterion 2: sampled solved states
PF_ALT_COUNT = 100            # criterion 3: random feasible allocations each


def cache_root() -> str:
    root = os.environ.get("GRIDCHARGE_ACCEPTANCE_CACHE")
    if not root:
        root = os.path.join(tempfile.gettempdir(), "gridcharge-acceptance")
    os.makedirs(root, exist_ok=True)
    return root


def main_plan() -> ExperimentPlan:
    plan = ExperimentPlan(
        network=os.path.abspath(NETWORK12),
        algorithms=("mf", "pf"),
        rates=GRID,
        runs=RUNS_PER_CELL,
        horizon=HORIZON,
        out="",
        seed=BASE_SEED,
        window=WINDOW,
        trim=TRIM,
        jobs=0,
    )
    out = os.path.join(cache_root(), f"sweep-{plan.plan_hash()}")
    return ExperimentPlan(**{**plan.__dict__, "out": out})


def trend_plan(step: float = 1.0) -> ExperimentPlan:
    plan = ExperimentPlan(
        network=os.path.abspath(NETWORK12),
        algorithms=("mf", "pf"),
        rates=(RATE_BETWEEN,),
        runs=TREND_SEEDS,
        horizon=TREND_HORIZON,
        out="",
        seed=TREND_BASE_SEED,
        window=WINDOW,
        trim=TRIM,
        step=step,
        jobs=0,
    )
    out = os.path.join(cache_root(), f"trend-{plan.plan_hash()}")
    return ExperimentPlan(**{**plan.__dict__, "out": out})


def step_plan(step: float) -> ExperimentPlan:
    plan = ExperimentPlan(
        network=os.path.abspath(NETWORK12),
        algorithms=("pf",),
        rates=(SUBCRITICAL_RATE,),
        runs=STEP_SEEDS,
        horizon=STEP_HORIZON,
        out="",
        seed=STEP_BASE_SEED,
        window=WINDOW,
        trim=TRIM,
        step=step,
        jobs=0,
    )
    out = os.path.join(cache_root(), f"step{step}-{plan.plan_hash()}")
    return ExperimentPlan(**{**plan.__dict__, "out": out})
