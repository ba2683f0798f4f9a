"""Spatial feature planes and the actor/critic networks consuming them.

All planes live on the coarse planning grid (G x G, G = terrain side /
r_P). Map-resolution quantities are mean-pooled down by the factor
r_P / r_M; belief and entropy are pooled separately because the entropy of
a mean is not the mean of entropies.

Actor input:  (a) agent-centred position plane, (b) local belief,
(c) weighted local entropy, (d) weighted entropy of the latest own
measurement, (e) in-range footprint map, plus constant agent-id and
remaining-budget planes.

Critic input: the same, followed by (f) global position plane, (g) global
belief, (h) its weighted entropy, (i) all agents' footprints, and (j) one
one-hot plane per (other agent, action) marking who chose what where.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Optional, Sequence

import numpy as np

from .environment import Action, AgentLocalState, EnvConfig, GlobalState, NUM_ACTIONS
from .errors import ConfigurationError, ContractViolation
from .gridmap import footprint, weighted_cell_entropy
from . import nn
from .nn import Conv2d, Linear, Tensor

OUT_OF_MAP = -1.0

ACTOR_PLANES = (
    "position_map",
    "belief_map",
    "entropy_map",
    "measurement_entropy",
    "footprint_map",
    "agent_id",
    "budget",
)
CRITIC_GLOBAL_PLANES = (
    "global_position_map",
    "global_belief_map",
    "global_entropy_map",
    "global_footprint_map",
)

# critic input restrictions used by the credit-assignment ablations
CRITIC_MODE_FULL = "full"  # planes a-j
CRITIC_MODE_NO_ACTIONS = "no_actions"  # a-i, blind to other agents' actions
CRITIC_MODE_LOCAL = "local"  # actor planes only (decentralised critic)


@dataclass(frozen=True)
class FeatureConfig:
    """Per-plane toggles; switching one off shrinks the network inputs."""

    position_map: bool = True
    belief_map: bool = True
    entropy_map: bool = True
    measurement_entropy: bool = True
    footprint_map: bool = True
    agent_id: bool = True
    budget: bool = True
    global_position_map: bool = True
    global_belief_map: bool = True
    global_entropy_map: bool = True
    global_footprint_map: bool = True
    action_maps: bool = True

    def with_toggle(self, name: str, enabled: bool) -> "FeatureConfig":
        if name not in {f.name for f in fields(self)}:
            raise ConfigurationError(f"unknown feature plane toggle '{name}'")
        return replace(self, **{name: enabled})


@dataclass
class FeatureStack:
    planes: np.ndarray  # (K, G, G) float64
    manifest: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.planes.shape[0] != len(self.manifest):
            raise ContractViolation("feature manifest does not match plane count")


def actor_manifest(fcfg: FeatureConfig) -> tuple[str, ...]:
    return tuple(name for name in ACTOR_PLANES if getattr(fcfg, name))


def critic_manifest(fcfg: FeatureConfig, num_agents: int,
                    mode: str = CRITIC_MODE_FULL) -> tuple[str, ...]:
    names = list(actor_manifest(fcfg))
    if mode == CRITIC_MODE_LOCAL:
        return tuple(names)
    names += [name for name in CRITIC_GLOBAL_PLANES if getattr(fcfg, name)]
    if mode == CRITIC_MODE_FULL and fcfg.action_maps:
        for k in range(num_agents - 1):
            for action in Action:
                names.append(f"other{k}_action_{action.name.lower()}")
    return tuple(names)


def _pool(fine: np.ndarray, factor: int) -> np.ndarray:
    h, w = fine.shape
    if h % factor or w % factor:
        raise ConfigurationError("map size is not divisible by the pooling factor")
    return fine.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def _footprint_rects(positions, cfg: EnvConfig):
    rects = []
    for pos in positions:
        pos_m = cfg.position_m(pos)
        rects.append(
            footprint(pos_m, cfg.footprint_factor, cfg.map_cells, cfg.map_cells,
                      cfg.map_resolution)
        )
    return rects


def _footprint_plane(rects, cfg: EnvConfig) -> np.ndarray:
    fine = np.zeros((cfg.map_cells, cfg.map_cells))
    for rect in rects:
        fine[rect.slices] = 1.0
    return (_pool(fine, cfg.pool_factor) > 0.0).astype(np.float64)


def _centred_position_plane(local: AgentLocalState, cfg: EnvConfig) -> np.ndarray:
    """Window of the lattice centred on the agent; out-of-map cells are -1.

    Cell values are normalized altitudes of the agents believed to sit
    there (teammate entries may be stale); empty in-map cells are 0.
    """
    g = cfg.lattice_cols
    centre = g // 2
    plane = np.full((g, g), OUT_OF_MAP)
    row0 = int(local.position[1]) - centre  # real lattice row of output row 0
    col0 = int(local.position[0]) - centre
    r_lo, r_hi = max(0, -row0), min(g, cfg.lattice_rows - row0)
    c_lo, c_hi = max(0, -col0), min(g, cfg.lattice_cols - col0)
    plane[r_lo:r_hi, c_lo:c_hi] = 0.0
    for j, pos in enumerate(local.known_positions):
        rr = int(pos[1]) - row0
        cc = int(pos[0]) - col0
        if 0 <= rr < g and 0 <= cc < g:
            plane[rr, cc] = cfg.altitude_of_level(int(pos[2])) / cfg.max_altitude
    return plane


def _global_position_plane(positions, cfg: EnvConfig) -> np.ndarray:
    g = cfg.lattice_cols
    plane = np.zeros((g, g))
    for pos in positions:
        plane[int(pos[1]), int(pos[0])] = cfg.altitude_of_level(int(pos[2])) / cfg.max_altitude
    return plane


def _measurement_entropy_plane(local: AgentLocalState, cfg: EnvConfig) -> np.ndarray:
    fine = np.zeros((cfg.map_cells, cfg.map_cells))
    m = local.last_measurement
    if m is not None:
        p_obs = np.where(m.values == 1, m.accuracy, 1.0 - m.accuracy)
        fine[m.rect.slices] = weighted_cell_entropy(p_obs, cfg.weights)
    return _pool(fine, cfg.pool_factor)


def build_actor_features(local: AgentLocalState, cfg: EnvConfig,
                         fcfg: FeatureConfig = FeatureConfig()) -> FeatureStack:
    """Local planes (a)-(e) plus the constant id and budget planes."""
    g = cfg.lattice_cols
    factor = cfg.pool_factor
    planes: list[np.ndarray] = []
    if fcfg.position_map:
        planes.append(_centred_position_plane(local, cfg))
    if fcfg.belief_map:
        planes.append(_pool(local.local_map.probs(), factor))
    if fcfg.entropy_map:
        planes.append(_pool(weighted_cell_entropy(local.local_map.probs(), cfg.weights), factor))
    if fcfg.measurement_entropy:
        planes.append(_measurement_entropy_plane(local, cfg))
    if fcfg.footprint_map:
        rects = []
        if local.last_measurement is not None:
            rects.append(local.last_measurement.rect)
        rects += [msg.measurement.rect for msg in local.inbox]
        planes.append(_footprint_plane(rects, cfg))
    if fcfg.agent_id:
        planes.append(np.full((g, g), (local.agent_id + 1) / cfg.num_agents))
    if fcfg.budget:
        planes.append(np.full((g, g), local.remaining_budget / cfg.budget))
    stack = FeatureStack(np.stack(planes), actor_manifest(fcfg))
    assert np.isfinite(stack.planes).all()
    return stack


def build_critic_features(
    state: GlobalState,
    local: AgentLocalState,
    other_actions: Sequence[int],
    cfg: EnvConfig,
    fcfg: FeatureConfig = FeatureConfig(),
    mode: str = CRITIC_MODE_FULL,
) -> FeatureStack:
    """Actor planes plus centralised planes (f)-(j).

    ``other_actions`` lists the actions of the N-1 teammates ordered by
    agent id (skipping this agent); each marks a one-hot plane at that
    teammate's current cell.
    """
    base = build_actor_features(local, cfg, fcfg)
    if mode == CRITIC_MODE_LOCAL:
        return FeatureStack(base.planes, critic_manifest(fcfg, cfg.num_agents, mode))
    planes = [base.planes]
    factor = cfg.pool_factor
    if fcfg.global_position_map:
        planes.append(_global_position_plane(state.positions, cfg)[None])
    if fcfg.global_belief_map:
        planes.append(_pool(state.global_map.probs(), factor)[None])
    if fcfg.global_entropy_map:
        planes.append(
            _pool(weighted_cell_entropy(state.global_map.probs(), cfg.weights), factor)[None]
        )
    if fcfg.global_footprint_map:
        planes.append(_footprint_plane(_footprint_rects(state.positions, cfg), cfg)[None])
    if mode == CRITIC_MODE_FULL and fcfg.action_maps:
        others = [j for j in range(cfg.num_agents) if j != local.agent_id]
        if len(other_actions) != len(others):
            raise ContractViolation(
                f"expected {len(others)} teammate actions, got {len(other_actions)}"
            )
        g = cfg.lattice_cols
        onehots = np.zeros((len(others) * NUM_ACTIONS, g, g))
        for k, (j, act) in enumerate(zip(others, other_actions)):
            pos = state.positions[j]
            onehots[k * NUM_ACTIONS + int(act), int(pos[1]), int(pos[0])] = 1.0
        planes.append(onehots)
    stack = FeatureStack(np.concatenate(planes), critic_manifest(fcfg, cfg.num_agents, mode))
    assert np.isfinite(stack.planes).all()
    return stack


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NetArch:
    conv_channels: tuple = (16, 32, 32)
    conv_strides: tuple = (1, 1, 2)
    kernel_size: int = 3
    padding: int = 1
    mlp_sizes: tuple = (128, 64)

    def to_metadata(self) -> dict:
        return {
            "conv_channels": list(self.conv_channels),
            "conv_strides": list(self.conv_strides),
            "kernel_size": self.kernel_size,
            "padding": self.padding,
            "mlp_sizes": list(self.mlp_sizes),
        }

    @classmethod
    def from_metadata(cls, meta: dict) -> "NetArch":
        return cls(
            conv_channels=tuple(meta["conv_channels"]),
            conv_strides=tuple(meta["conv_strides"]),
            kernel_size=int(meta["kernel_size"]),
            padding=int(meta["padding"]),
            mlp_sizes=tuple(meta["mlp_sizes"]),
        )


class PolicyNet:
    """Conv encoder + MLP head over a stack of G x G feature planes."""

    def __init__(self, in_channels: int, grid_size: int, out_dim: int,
                 rng: np.random.Generator, arch: NetArch = NetArch()):
        self.in_channels = in_channels
        self.grid_size = grid_size
        self.out_dim = out_dim
        self.arch = arch
        self.convs: list[Conv2d] = []
        ch = in_channels
        side = grid_size
        for out_ch, stride in zip(arch.conv_channels, arch.conv_strides):
            self.convs.append(Conv2d(ch, out_ch, arch.kernel_size, stride, arch.padding, rng))
            side = (side + 2 * arch.padding - arch.kernel_size) // stride + 1
            if side < 1:
                raise ConfigurationError("encoder strides collapse the grid below 1x1")
            ch = out_ch
        self.flat_dim = ch * side * side
        self.fcs: list[Linear] = []
        dim = self.flat_dim
        for width in arch.mlp_sizes:
            self.fcs.append(Linear(dim, width, rng))
            dim = width
        self.head = Linear(dim, out_dim, rng)

    def forward(self, x) -> Tensor:
        """x: (B, C, G, G) array or Tensor -> (B, out_dim) Tensor."""
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if t.data.ndim != 4 or t.data.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"network expects (B, {self.in_channels}, {self.grid_size}, "
                f"{self.grid_size}) inputs, got {t.data.shape}"
            )
        h = t
        for conv in self.convs:
            h = nn.relu(conv(h))
        h = nn.reshape(h, (t.data.shape[0], self.flat_dim))
        for fc in self.fcs:
            h = nn.relu(fc(h))
        return self.head(h)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, conv in enumerate(self.convs):
            out.append((f"conv{i}.weight", conv.weight))
            out.append((f"conv{i}.bias", conv.bias))
        for i, fc in enumerate(self.fcs):
            out.append((f"fc{i}.weight", fc.weight))
            out.append((f"fc{i}.bias", fc.bias))
        out.append(("head.weight", self.head.weight))
        out.append(("head.bias", self.head.bias))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(name, p.data) for name, p in self.named_parameters()]

    def load_state(self, params: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in params:
                raise ConfigurationError(f"checkpoint is missing parameter '{name}'")
            if params[name].shape != p.data.shape:
                raise ConfigurationError(f"checkpoint shape mismatch for '{name}'")
            p.data = params[name].astype(np.float64).copy()

    def copy_from(self, other: "PolicyNet") -> None:
        self.load_state(dict(other.state_arrays()))


def make_actor(cfg: EnvConfig, fcfg: FeatureConfig, rng: np.random.Generator,
               arch: NetArch = NetArch()) -> PolicyNet:
    return PolicyNet(len(actor_manifest(fcfg)), cfg.lattice_cols, NUM_ACTIONS, rng, arch)


def make_critic(cfg: EnvConfig, fcfg: FeatureConfig, rng: np.random.Generator,
                arch: NetArch = NetArch(), mode: str = CRITIC_MODE_FULL) -> PolicyNet:
    channels = len(critic_manifest(fcfg, cfg.num_agents, mode))
    return PolicyNet(channels, cfg.lattice_cols, NUM_ACTIONS, rng, arch)


def make_value_net(cfg: EnvConfig, fcfg: FeatureConfig, rng: np.random.Generator,
                   arch: NetArch = NetArch()) -> PolicyNet:
    """State-value network: critic inputs minus action planes, scalar output."""
    channels = len(critic_manifest(fcfg, cfg.num_agents, CRITIC_MODE_NO_ACTIONS))
    return PolicyNet(channels, cfg.lattice_cols, 1, rng, arch)


def actor_forward(net: PolicyNet, features: FeatureStack, mask: np.ndarray,
                  epsilon: float) -> np.ndarray:
    """Masked bounded-softmax policy vector for one agent (no grad kept)."""
    logits = net.forward(features.planes[None])
    probs = nn.masked_bounded_softmax(logits, np.asarray(mask, dtype=bool)[None], epsilon)
    return probs.data[0]


def critic_forward(net: PolicyNet, features: FeatureStack) -> np.ndarray:
    """Raw Q (or V) values for one state; length equals the net's out_dim."""
    return net.forward(features.planes[None]).data[0]


# ---------------------------------------------------------------------------
# network checkpoints with feature metadata
# ---------------------------------------------------------------------------


def save_network(path, net: PolicyNet, *, kind: str, manifest: Sequence[str],
                 extra: Optional[dict] = None) -> None:
    metadata = {
        "kind": kind,
        "manifest": list(manifest),
        "in_channels": net.in_channels,
        "grid_size": net.grid_size,
        "out_dim": net.out_dim,
        "arch": net.arch.to_metadata(),
    }
    if extra:
        metadata.update(extra)
    nn.save_checkpoint(path, net.state_arrays(), metadata)


def load_network(path) -> tuple[PolicyNet, dict]:
    params, meta = nn.load_checkpoint(path)
    arch = NetArch.from_metadata(meta["arch"])
    net = PolicyNet(
        int(meta["in_channels"]),
        int(meta["grid_size"]),
        int(meta["out_dim"]),
        np.random.default_rng(0),
        arch,
    )
    net.load_state(params)
    return net, meta
