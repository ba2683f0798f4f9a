"""Action selection: non-learned baselines and the trained-actor wrapper.

Every planner returns an action that passes the environment mask. The
random and greedy planners are stateless; the coverage planner keeps a
per-agent sweep cursor; the learned planner wraps a frozen actor network.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .environment import (
    ACTION_DELTAS,
    Action,
    AgentLocalState,
    EnvConfig,
    NUM_ACTIONS,
)
from .errors import ConfigurationError, ContractViolation
from .gridmap import ImportanceWeights, footprint, weighted_cell_entropy
from .policy import FeatureConfig, PolicyNet, actor_forward, build_actor_features, load_network


class RandomPlanner:
    """Uniform draw over the valid actions."""

    def act(self, local: AgentLocalState, mask: np.ndarray, cfg: EnvConfig,
            step_index: int, rng: np.random.Generator) -> int:
        valid = np.flatnonzero(mask)
        if valid.size == 0:
            raise ContractViolation("random planner needs at least one valid action")
        return int(rng.choice(valid))


def expected_entropy_reduction(probs: np.ndarray, accuracy: float,
                               weights: ImportanceWeights) -> float:
    """Expected weighted-entropy drop of cells after one noisy observation.

    The expectation decomposes over cells because per-cell posteriors are
    independent: each cell sees label 1 with probability p*acc +
    (1-p)*(1-acc) and is updated by Bayes either way.
    """
    p = np.asarray(probs, dtype=np.float64)
    q1 = p * accuracy + (1.0 - p) * (1.0 - accuracy)
    post1 = p * accuracy / q1
    post0 = p * (1.0 - accuracy) / (1.0 - q1)
    expected = q1 * weighted_cell_entropy(post1, weights) + (1.0 - q1) * weighted_cell_entropy(
        post0, weights
    )
    return float((weighted_cell_entropy(p, weights) - expected).sum())


class GreedyInfoGainPlanner:
    """Pick the move whose footprint promises the largest expected
    entropy reduction of the agent's local map; ties break in the fixed
    action order (up, north, east, south, west, down)."""

    def act(self, local: AgentLocalState, mask: np.ndarray, cfg: EnvConfig,
            step_index: int, rng: np.random.Generator) -> int:
        if not mask.any():
            raise ContractViolation("greedy planner needs at least one valid action")
        grid = local.local_map
        best_action = -1
        best_gain = -np.inf
        for a in range(NUM_ACTIONS):
            if not mask[a]:
                continue
            target = local.position + ACTION_DELTAS[a]
            pos_m = cfg.position_m(target)
            rect = footprint(pos_m, cfg.footprint_factor, cfg.map_cells, cfg.map_cells,
                             cfg.map_resolution)
            acc = cfg.sensor.accuracy_at(pos_m[2])
            gain = expected_entropy_reduction(grid.probs_slice(rect.slices), acc, cfg.weights)
            if gain > best_gain:
                best_gain = gain
                best_action = a
        return best_action


class CoveragePlanner:
    """Non-adaptive boustrophedon sweep of per-agent vertical stripes.

    The terrain is split into N near-equal-width column stripes; agent k
    first climbs/descends to the coverage altitude, walks to its stripe's
    south-west corner, then serpentines. When the sweep finishes early it
    runs backwards. A masked move (another agent crossing a stripe
    boundary during the approach) is dodged with a vertical move.
    """

    def __init__(self) -> None:
        self._plans: dict[int, list[tuple[int, int]]] = {}
        self._cursors: dict[int, int] = {}
        self._direction: dict[int, int] = {}

    def act(self, local: AgentLocalState, mask: np.ndarray, cfg: EnvConfig,
            step_index: int, rng: np.random.Generator) -> int:
        aid = local.agent_id
        target_level = cfg.level_of_altitude(cfg.coverage_altitude)
        level = int(local.position[2])
        if level < target_level and mask[Action.UP]:
            return int(Action.UP)
        if level > target_level and mask[Action.DOWN]:
            return int(Action.DOWN)

        if aid not in self._plans:
            self._plans[aid] = self._build_plan(local, cfg)
            self._cursors[aid] = 0
            self._direction[aid] = 1
        plan = self._plans[aid]
        cur = (int(local.position[0]), int(local.position[1]))
        cursor = self._cursors[aid]
        if plan[cursor] == cur:
            cursor = self._advance(aid, cursor, len(plan))
        self._cursors[aid] = cursor
        nxt = plan[cursor]
        action = self._step_toward(cur, nxt)
        if mask[action]:
            return action
        for dodge in (Action.UP, Action.DOWN):
            if mask[dodge]:
                return int(dodge)
        return int(np.flatnonzero(mask)[0])

    def _advance(self, aid: int, cursor: int, length: int) -> int:
        nxt = cursor + self._direction[aid]
        if nxt < 0 or nxt >= length:
            self._direction[aid] *= -1  # bounce and re-sweep
            nxt = cursor + self._direction[aid]
        return nxt

    @staticmethod
    def _step_toward(cur: tuple[int, int], nxt: tuple[int, int]) -> int:
        dx, dy = nxt[0] - cur[0], nxt[1] - cur[1]
        if dx > 0:
            return int(Action.EAST)
        if dx < 0:
            return int(Action.WEST)
        if dy > 0:
            return int(Action.NORTH)
        if dy < 0:
            return int(Action.SOUTH)
        return int(Action.UP)  # already there; should not happen

    @staticmethod
    def stripe_bounds(agent_id: int, cols: int, n_agents: int) -> tuple[int, int]:
        lo = agent_id * cols // n_agents
        hi = (agent_id + 1) * cols // n_agents - 1
        return lo, hi

    def _build_plan(self, local: AgentLocalState, cfg: EnvConfig) -> list[tuple[int, int]]:
        cols, rows = cfg.lattice_cols, cfg.lattice_rows
        west, east = self.stripe_bounds(local.agent_id, cols, cfg.num_agents)
        plan: list[tuple[int, int]] = []
        col = int(local.position[0])
        row = int(local.position[1])
        # approach: walk within the current row to the stripe's west column,
        # then south to the sweep origin (agents normally start at row 0)
        plan.append((col, row))
        while col != west:
            col += 1 if col < west else -1
            plan.append((col, row))
        while row != 0:
            row -= 1
            plan.append((col, row))
        # serpentine: row 0 eastbound, alternating
        for r in range(rows):
            span = range(west, east + 1) if r % 2 == 0 else range(east, west - 1, -1)
            for c in span:
                if (c, r) != plan[-1]:
                    plan.append((c, r))
        return plan


class LearnedPlanner:
    """Frozen actor network driven by the agent's local features."""

    def __init__(self, actor: PolicyNet, fcfg: FeatureConfig, mode: str = "sample",
                 epsilon: float = 0.0):
        if mode not in ("sample", "argmax"):
            raise ConfigurationError(f"unknown learned-planner mode '{mode}'")
        self.actor = actor
        self.fcfg = fcfg
        self.mode = mode
        self.epsilon = epsilon

    def act(self, local: AgentLocalState, mask: np.ndarray, cfg: EnvConfig,
            step_index: int, rng: np.random.Generator) -> int:
        stack = build_actor_features(local, cfg, self.fcfg)
        probs = actor_forward(self.actor, stack, mask, self.epsilon)
        if self.mode == "argmax":
            return int(np.argmax(probs))
        return int(rng.choice(NUM_ACTIONS, p=probs))


PLANNER_NAMES = ("random", "coverage", "greedy-ig", "learned")


def make_planner(name: str, *, actor_path=None, actor: Optional[PolicyNet] = None,
                 fcfg: Optional[FeatureConfig] = None, mode: str = "sample"):
    """Fresh planner instance for one mission."""
    if name == "random":
        return RandomPlanner()
    if name == "coverage":
        return CoveragePlanner()
    if name == "greedy-ig":
        return GreedyInfoGainPlanner()
    if name == "learned":
        if actor is None:
            if actor_path is None:
                raise ConfigurationError("learned planner needs actor weights")
            actor, meta = load_network(actor_path)
            if fcfg is None and "feature_config" in meta:
                fcfg = FeatureConfig(**meta["feature_config"])
        return LearnedPlanner(actor, fcfg or FeatureConfig(), mode=mode)
    raise ConfigurationError(f"unknown planner '{name}'")
