"""Desk-scale federated simulators over synthetic quadratic clients.

Each client owns the loss 0.5*||x - c_i||^2 and trains with exact gradients,
so every protocol identity is checkable in closed form. Two server protocols:

* fedopt — clients send deltas x_{i,K} - x_{t-1}; the server averages them and
  descends along the negated average with its own optimizer.
* fedsoup — client results are souped first (linearly, or by a nested engine
  run), and the server "stews": it keeps one optimizer state across rounds and
  descends along (x_{t-1} - w_t), the pull toward the round's soup.

A GD server with lr 1 collapses both to FedAvg: x_t = mean of client results.
Client training within a round is independent; the server step is a
sequential barrier between rounds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .engine import EnsembleConfig, Ingredient, run_ensemble
from .optim import OptimizerSpec, OptimizerState, optimizer_step
from .pseudograd import Pseudogradient, soup
from .weightstore import WeightMap, l2_distance, validate_compatible

__all__ = [
    "ClientSpec",
    "FedConfig",
    "RoundLog",
    "FedResult",
    "client_train",
    "simulate_fedopt",
    "simulate_fedsoup",
]


@dataclass(frozen=True)
class ClientSpec:
    """One synthetic client: quadratic optimum, local optimizer, K local steps."""

    id: str
    objective_center: WeightMap
    local_optimizer: OptimizerSpec
    local_steps: int = 1

    def __post_init__(self) -> None:
        if self.local_steps < 1:
            raise ValueError(f"local_steps must be >= 1, got {self.local_steps}")


@dataclass(frozen=True)
class FedConfig:
    """A federated run: clients, per-round participation, and the server side.

    For fedopt, `server` drives the global update. For fedsoup, `client_soup`
    aggregates the round's client results ("linear" or a nested EnsembleConfig)
    and `server_stew` is the persistent server optimizer.
    """

    clients: tuple[ClientSpec, ...]
    init: WeightMap
    rounds: int
    sample_size: int
    seed: int = 0
    server: OptimizerSpec | None = None
    client_soup: str | EnsembleConfig = "linear"
    server_stew: OptimizerSpec | None = None

    def __post_init__(self) -> None:
        if not self.clients:
            raise ValueError("need at least one client")
        ids = [c.id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ValueError("client ids must be unique")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if not (1 <= self.sample_size <= len(self.clients)):
            raise ValueError(
                f"sample_size must lie in [1, {len(self.clients)}], got {self.sample_size}"
            )
        if isinstance(self.client_soup, str) and self.client_soup != "linear":
            raise ValueError(f"client_soup must be 'linear' or an EnsembleConfig, got {self.client_soup!r}")


@dataclass(frozen=True)
class RoundLog:
    round: int
    participants: tuple[str, ...]
    delta_norm: float
    distance_to_center_mean: float


@dataclass
class FedResult:
    rounds: list[RoundLog]
    final: WeightMap
    iterates: list[WeightMap] = field(default_factory=list)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "participants", "delta_norm", "distance_to_center_mean"])
            for r in self.rounds:
                writer.writerow(
                    [r.round, "|".join(r.participants), repr(r.delta_norm), repr(r.distance_to_center_mean)]
                )


def client_train(start: WeightMap, spec: ClientSpec) -> WeightMap:
    """K local optimizer steps on the exact quadratic gradient (x - center)."""
    validate_compatible([start, spec.objective_center])
    state = OptimizerState()
    w = start
    center = spec.objective_center
    for step in range(1, spec.local_steps + 1):
        out: dict[str, np.ndarray] = {}
        for name, arr in w.arrays().items():
            res = arr - center.array(name)
            res.setflags(write=False)
            out[name] = res
        g = Pseudogradient(WeightMap._wrap(out), step=step, ingredient_ids=(spec.id,))
        w = optimizer_step(w, g, state, spec.local_optimizer)
    return w


def _sample_participants(cfg: FedConfig, round_idx: int) -> list[ClientSpec]:
    # Uniform without replacement; keyed per round so any seed reproduces the
    # same participation stream in fedopt and fedsoup alike.
    rng = rng_mod.stream(cfg.seed, rng_mod.DOMAIN_PARTICIPATION, round_idx)
    chosen = rng.choice(len(cfg.clients), size=cfg.sample_size, replace=False)
    chosen.sort()
    return [cfg.clients[i] for i in chosen]


def _center_mean(cfg: FedConfig) -> WeightMap:
    return soup([c.objective_center for c in cfg.clients])


def _round_ingredients(participants: list[ClientSpec], start: WeightMap) -> list[WeightMap]:
    return [client_train(start, client) for client in participants]


def _descend(
    x: WeightMap, target: WeightMap, state: OptimizerState, server: OptimizerSpec, round_idx: int
) -> WeightMap:
    # Server pseudogradient: the pull away from the aggregated client signal.
    out: dict[str, np.ndarray] = {}
    for name, arr in x.arrays().items():
        res = arr - target.array(name)
        res.setflags(write=False)
        out[name] = res
    g = Pseudogradient(WeightMap._wrap(out), step=round_idx)
    return optimizer_step(x, g, state, server)


def simulate_fedopt(cfg: FedConfig) -> FedResult:
    """Adaptive federated optimization: server optimizer over averaged deltas."""
    if cfg.server is None:
        raise ValueError("fedopt requires a server optimizer")
    validate_compatible([cfg.init, *(c.objective_center for c in cfg.clients)])
    center_mean = _center_mean(cfg)
    state = OptimizerState()
    x = cfg.init
    logs: list[RoundLog] = []
    iterates: list[WeightMap] = []
    for t in range(1, cfg.rounds + 1):
        participants = _sample_participants(cfg, t)
        results = _round_ingredients(participants, x)
        client_mean = soup(results)
        x_prev = x
        # delta_t = mean_i(x_{i,K} - x_{t-1}) = client_mean - x_{t-1}; the
        # server descends along its negation, moving toward the client mean.
        x = _descend(x, client_mean, state, cfg.server, t)
        logs.append(
            RoundLog(
                round=t,
                participants=tuple(c.id for c in participants),
                delta_norm=l2_distance(client_mean, x_prev),
                distance_to_center_mean=l2_distance(x, center_mean),
            )
        )
        iterates.append(x)
    return FedResult(rounds=logs, final=x, iterates=iterates)


def simulate_fedsoup(cfg: FedConfig) -> FedResult:
    """Nested ensembling: soup the round's clients, then stew on the server.

    The stew's pseudogradient is x_{t-1} - w_t, the closed form whose GD lr-1
    step reproduces FedAvg; the server optimizer state persists across rounds.
    """
    if cfg.server_stew is None:
        raise ValueError("fedsoup requires a server_stew optimizer")
    validate_compatible([cfg.init, *(c.objective_center for c in cfg.clients)])
    center_mean = _center_mean(cfg)
    state = OptimizerState()
    x = cfg.init
    logs: list[RoundLog] = []
    iterates: list[WeightMap] = []
    for t in range(1, cfg.rounds + 1):
        participants = _sample_participants(cfg, t)
        results = _round_ingredients(participants, x)
        if isinstance(cfg.client_soup, EnsembleConfig):
            ingredients = [
                Ingredient(id=c.id, weights=w) for c, w in zip(participants, results)
            ]
            w_t, _ = run_ensemble(cfg.client_soup, ingredients)
        else:
            w_t = soup(results)
        x_prev = x
        x = _descend(x, w_t, state, cfg.server_stew, t)
        logs.append(
            RoundLog(
                round=t,
                participants=tuple(c.id for c in participants),
                delta_norm=l2_distance(w_t, x_prev),
                distance_to_center_mean=l2_distance(x, center_mean),
            )
        )
        iterates.append(x)
    return FedResult(rounds=logs, final=x, iterates=iterates)
