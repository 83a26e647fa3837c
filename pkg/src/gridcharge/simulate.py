"""Discrete-time charging dynamics on a distribution tree.

Vehicles arrive in continuous time as a Poisson process, pick a non-root
node uniformly, and charge until full.  Whenever the set of charging
vehicles changes, the configured allocation problem is re-solved; the
allocation then holds for the step.  Battery levels integrate the allocated
per-vehicle power over each step with a clamp at capacity, and full
vehicles depart at the step boundary.

Randomness enters only through the arrival stream.  Its draws are one
inverse-CDF exponential gap plus one node pick per arrival, in that order,
from a seeded PCG64 generator; the realized arrival sequence therefore does
not depend on the step size, and raising the rate with the same seed only
adds arrivals earlier (prefix counts are monotone in the rate).

A single run is strictly sequential.  Distinct runs share no mutable state
and may execute in parallel processes (the sweep runner does).
"""
from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import allocation, conic
from .netmodel import RootedTree, SubtreeIndex, subtree_index

__all__ = [
    "SimulationConfig",
    "VehicleRecord",
    "SystemState",
    "RunOutput",
    "ArrivalStream",
    "sample_arrivals",
    "step",
    "run",
    "write_series_csv",
    "write_vehicles_csv",
    "read_series_csv",
    "read_vehicles_csv",
]


class ArrivalStream:
    """Poisson arrival times with i.i.d. uniform node choices.

    Draw order per arrival: one uniform for the exponential gap, then the
    node pick.  State advances lazily; `take_until(t)` returns every arrival
    with time <= t exactly once.
    """

    def __init__(self, seed_or_rng, rate: float, nodes: Iterable[int]):
        if isinstance(seed_or_rng, np.random.Generator):
            self._rng = seed_or_rng
        else:
            self._rng = np.random.Generator(np.random.PCG64(seed_or_rng))
        self.rate = float(rate)
        self.nodes = tuple(sorted(nodes))
        if self.rate < 0:
            raise ValueError("arrival rate must be non-negative")
        if self.rate > 0 and not self.nodes:
            raise ValueError("need at least one non-root node for arrivals")
        self._next: tuple | None = None
        self._clock = 0.0

    def _draw(self):
        gap = -math.log(1.0 - self._rng.random()) / self.rate
        node = self.nodes[int(self._rng.integers(0, len(self.nodes)))]
        self._clock += gap
        self._next = (self._clock, node)

    def peek(self):
        if self.rate == 0:
            return None
        if self._next is None:
            self._draw()
        return self._next

    def take_until(self, t: float) -> list:
        out = []
        if self.rate == 0:
            return out
        while True:
            nxt = self.peek()
            if nxt[0] > t:
                break
            out.append(nxt)
            self._draw()
        return out


def sample_arrivals(rng, rate: float, t_start: float, t_end: float, nodes) -> list:
    """Arrivals of a Poisson process with the given rate in (t_start, t_end].

    Deterministic given the generator state.  Stand-alone form of the
    stream used by the simulator; times are offsets from t_start plus the
    accumulated gaps.
    """
    if t_end < t_start:
        raise ValueError("interval end precedes start")
    stream = ArrivalStream(rng, rate, nodes)
    stream._clock = t_start
    return stream.take_until(t_end)


@dataclass(frozen=True)
class SimulationConfig:
    network: RootedTree
    arrival_rate: float
    horizon: float
    seed: int
    algorithm: str = "pf"                 # "mf" | "pf"
    step: float = 1.0
    battery_capacity: float = 1.0
    alpha: float = 0.1
    v_nominal: float | None = None        # default: the network's header value
    pin_root: bool = False
    solver: conic.SolverConfig | None = None

    def __post_init__(self):
        if self.arrival_rate < 0:
            raise ValueError("arrival rate must be non-negative")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.battery_capacity <= 0:
            raise ValueError("battery capacity must be positive")
        if self.algorithm not in ("mf", "pf"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")

    @property
    def nominal_voltage(self) -> float:
        return self.network.nominal_voltage if self.v_nominal is None else self.v_nominal


@dataclass
class VehicleRecord:
    id: int
    node: int
    arrival_time: float
    charge: float = 0.0
    departure_time: float | None = None

    @property
    def charging_time(self) -> float | None:
        if self.departure_time is None:
            return None
        return self.departure_time - self.arrival_time


@dataclass
class SystemState:
    clock: float
    arrivals: ArrivalStream
    active: list = field(default_factory=list)
    completed: list = field(default_factory=list)
    allocation: allocation.AllocationResult | None = None
    changed_since_solve: bool = True
    next_id: int = 0
    solve_count: int = 0
    certificate_retries: int = 0
    max_certificate_gap: float = 0.0

    @property
    def n_active(self) -> int:
        return len(self.active)

    def occupancy(self) -> allocation.Occupancy:
        return allocation.Occupancy.from_nodes(v.node for v in self.active)


@dataclass
class RunOutput:
    config: SimulationConfig
    times: np.ndarray            # sample times, 0, step, 2*step, ...
    n_vehicles: np.ndarray       # N(t) at each sample time
    aggregate_power: np.ndarray
    objective: np.ndarray
    completed: list              # VehicleRecord, departed within horizon
    active_at_end: list          # still charging at the horizon
    solve_count: int
    certificate_retries: int
    max_certificate_gap: float

    @property
    def vehicles(self) -> list:
        return self.completed + self.active_at_end


def initial_state(config: SimulationConfig) -> SystemState:
    stream = ArrivalStream(
        config.seed, config.arrival_rate, config.network.non_root_nodes
    )
    return SystemState(clock=0.0, arrivals=stream)


def _solve_state(state: SystemState, config: SimulationConfig, index: SubtreeIndex):
    occ = state.occupancy()
    dump_path = os.path.join(
        tempfile.gettempdir(), f"gridcharge-dump-{os.getpid()}-t{state.clock:g}.txt"
    )
    result = allocation.solve_allocation(
        config.network, index, occ, config.algorithm,
        alpha=config.alpha, v_nominal=config.nominal_voltage,
        config=config.solver, pin_root=config.pin_root, dump_path=dump_path,
    )
    state.allocation = result
    state.solve_count += 1
    if result.retried:
        state.certificate_retries += 1
    state.max_certificate_gap = max(
        state.max_certificate_gap, result.certificate.max_relative_gap
    )
    state.changed_since_solve = False
    return result


def step(state: SystemState, config: SimulationConfig,
         index: SubtreeIndex | None = None) -> SystemState:
    """Advance the state by one time step.

    Arrivals within [clock, clock+step) are admitted at the step start; the
    allocation is re-solved only if the vehicle set changed; charges then
    integrate allocated power over the step, clamped at capacity, and full
    vehicles depart at the step end.
    """
    if index is None:
        index = subtree_index(config.network)
    t0 = state.clock
    t1 = t0 + config.step

    for (at, node) in state.arrivals.take_until(np.nextafter(t1, -math.inf)):
        state.active.append(VehicleRecord(id=state.next_id, node=node, arrival_time=at))
        state.next_id += 1
        state.changed_since_solve = True

    if state.active and state.changed_since_solve:
        _solve_state(state, config, index)

    if state.active:
        per_vehicle = state.allocation.vehicle_power
        finished = []
        for v in state.active:
            v.charge = min(v.charge + per_vehicle[v.node] * config.step, config.battery_capacity)
            if v.charge >= config.battery_capacity:
                v.departure_time = t1
                finished.append(v)
        if finished:
            done = {v.id for v in finished}
            state.active = [v for v in state.active if v.id not in done]
            state.completed.extend(finished)
            state.changed_since_solve = True

    state.clock = t1
    return state


def run(config: SimulationConfig) -> RunOutput:
    """Run the dynamics from an empty network until the horizon."""
    index = subtree_index(config.network)
    state = initial_state(config)
    n_steps = int(round(config.horizon / config.step))
    times = np.empty(n_steps + 1)
    n_vehicles = np.empty(n_steps + 1)
    power = np.empty(n_steps + 1)
    objective = np.empty(n_steps + 1)
    times[0], n_vehicles[0], power[0], objective[0] = 0.0, 0, 0.0, 0.0
    for k in range(1, n_steps + 1):
        state.clock = (k - 1) * config.step  # exact grid, no accumulation drift
        step(state, config, index)
        times[k] = k * config.step
        n_vehicles[k] = len(state.active)
        if state.active:
            power[k] = state.allocation.aggregate_power
            objective[k] = state.allocation.objective
        else:
            power[k] = 0.0
            objective[k] = 0.0
    return RunOutput(
        config=config,
        times=times,
        n_vehicles=n_vehicles,
        aggregate_power=power,
        objective=objective,
        completed=state.completed,
        active_at_end=state.active,
        solve_count=state.solve_count,
        certificate_retries=state.certificate_retries,
        max_certificate_gap=state.max_certificate_gap,
    )


# ----------------------------------------------------------------------------
# CSV serialization (schemas shared with the CLI)


def write_series_csv(output: RunOutput, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "N", "aggregate_power", "objective"])
        for i in range(len(output.times)):
            writer.writerow([
                repr(float(output.times[i])),
                int(output.n_vehicles[i]),
                repr(float(output.aggregate_power[i])),
                repr(float(output.objective[i])),
            ])


def write_vehicles_csv(output: RunOutput, path) -> None:
    """All vehicles; pending ones have empty departure and charging_time."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "node", "arrival", "departure", "charging_time"])
        for v in sorted(output.vehicles, key=lambda v: v.id):
            if v.departure_time is None:
                writer.writerow([v.id, v.node, repr(v.arrival_time), "", ""])
            else:
                writer.writerow([
                    v.id, v.node, repr(v.arrival_time),
                    repr(v.departure_time), repr(v.charging_time),
                ])


def read_series_csv(path):
    times, n, power, objective = [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            times.append(float(row["time"]))
            n.append(float(row["N"]))
            power.append(float(row["aggregate_power"]))
            objective.append(float(row["objective"]))
    return (np.asarray(times), np.asarray(n), np.asarray(power), np.asarray(objective))


def read_vehicles_csv(path) -> list:
    vehicles = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            departed = row["departure"] != ""
            vehicles.append(VehicleRecord(
                id=int(row["id"]),
                node=int(row["node"]),
                arrival_time=float(row["arrival"]),
                charge=math.nan,
                departure_time=float(row["departure"]) if departed else None,
            ))
    return vehicles
