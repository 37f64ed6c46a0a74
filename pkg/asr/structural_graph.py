"""Binary structural masks, the ASR index set and d-separation on the unrolled DBN."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Set

import networkx as nx
import numpy as np
from loguru import logger

from .errors import ModelValidationError


class NodeKind(str, Enum):
    STATE = "s"
    OBSERVATION = "o"
    REWARD = "r"
    ACTION = "a"
    CUMULATIVE = "R"


@dataclass(frozen=True, order=True)
class Node:
    """Node of the unrolled network; `index` is the 0-based dimension, `time` is 1-based"""
    kind: NodeKind
    index: int
    time: int

    def __str__(self) -> str:
        return f"{self.kind.value}[{self.index + 1},{self.time}]"


def state(i: int, t: int) -> Node:
    return Node(NodeKind.STATE, i, t)


def action(k: int, t: int) -> Node:
    return Node(NodeKind.ACTION, k, t)


def observation(t: int) -> Node:
    return Node(NodeKind.OBSERVATION, 0, t)


def reward(t: int) -> Node:
    return Node(NodeKind.REWARD, 0, t)


def cumulative_reward(t: int) -> Node:
    return Node(NodeKind.CUMULATIVE, 0, t)


def _binary(name: str, value: Any, shape: tuple) -> np.ndarray:
    arr = np.asarray(value)
    if arr.shape != shape:
        raise ModelValidationError(f"{name} has shape {arr.shape}, expected {shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ModelValidationError(f"{name} must contain only 0/1 entries")
    arr = arr.astype(np.int8)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class StructuralGraph:
    """Causal skeleton of the environment.

    mask_s_to_s[j, i] = 1 iff s_{j,t-1} -> s_{i,t}; mask_a_to_s[k, i] = 1 iff
    a_{k,t-1} -> s_{i,t}; the reward masks describe edges into r_t from time t-1.
    """
    d_s: int
    d_a: int
    mask_s_to_s: np.ndarray
    mask_a_to_s: np.ndarray
    mask_s_to_r: np.ndarray
    mask_a_to_r: np.ndarray
    mask_s_to_o: np.ndarray

    def __post_init__(self):
        if self.d_s < 1 or self.d_a < 1:
            raise ModelValidationError("d_s and d_a must be positive")
        object.__setattr__(self, "mask_s_to_s", _binary("mask_s_to_s", self.mask_s_to_s, (self.d_s, self.d_s)))
        object.__setattr__(self, "mask_a_to_s", _binary("mask_a_to_s", self.mask_a_to_s, (self.d_a, self.d_s)))
        object.__setattr__(self, "mask_s_to_r", _binary("mask_s_to_r", self.mask_s_to_r, (self.d_s,)))
        object.__setattr__(self, "mask_a_to_r", _binary("mask_a_to_r", self.mask_a_to_r, (self.d_a,)))
        object.__setattr__(self, "mask_s_to_o", _binary("mask_s_to_o", self.mask_s_to_o, (self.d_s,)))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, StructuralGraph):
            return NotImplemented
        return (self.d_s, self.d_a) == (other.d_s, other.d_a) and all(
            np.array_equal(getattr(self, name), getattr(other, name)) for name in _MASKS
        )

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"d_s": self.d_s, "d_a": self.d_a}
        for name in _MASKS:
            out[name] = getattr(self, name).tolist()
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "StructuralGraph":
        return cls(d_s=int(data["d_s"]), d_a=int(data["d_a"]), **{name: data[name] for name in _MASKS})

    @classmethod
    def from_supports(cls, C_s_to_o: np.ndarray, C_s_to_r: np.ndarray, C_a_to_r: np.ndarray,
                      C_s: np.ndarray, C_a_to_s: np.ndarray, threshold: float = 0.1) -> "StructuralGraph":
        """Masks of the entries whose magnitude exceeds `threshold`"""
        def support(x):
            return (np.abs(np.asarray(x)) > threshold).astype(np.int8)

        C_s = np.asarray(C_s)
        C_a_to_s = np.asarray(C_a_to_s)
        return cls(
            d_s=C_s.shape[0],
            d_a=C_a_to_s.shape[0],
            mask_s_to_s=support(C_s),
            mask_a_to_s=support(C_a_to_s),
            mask_s_to_r=support(C_s_to_r),
            mask_a_to_r=support(C_a_to_r),
            mask_s_to_o=support(np.abs(np.asarray(C_s_to_o)).max(axis=1)),
        )


_MASKS = ("mask_s_to_s", "mask_a_to_s", "mask_s_to_r", "mask_a_to_r", "mask_s_to_o")


def figure1_graph() -> StructuralGraph:
    """Three latent dims, one action; s3 feeds s2, only s2 and s3 reach the reward"""
    s_to_s = np.eye(3, dtype=np.int8)
    s_to_s[2, 1] = 1
    return StructuralGraph(
        d_s=3,
        d_a=1,
        mask_s_to_s=s_to_s,
        mask_a_to_s=[[1, 1, 0]],
        mask_s_to_r=[0, 1, 1],
        mask_a_to_r=[1],
        mask_s_to_o=[1, 1, 1],
    )


def random_structural_graph(d_s: int, d_a: int, rng: np.random.Generator,
                            edge_prob: float = 0.35, reward_prob: float = 0.3) -> StructuralGraph:
    """Random masks whose cross-state edges only run from higher to lower index"""
    s_to_s = np.tril((rng.random((d_s, d_s)) < edge_prob).astype(np.int8), k=-1)
    s_to_s[np.diag_indices(d_s)] = (rng.random(d_s) < 0.8).astype(np.int8)
    return StructuralGraph(
        d_s=d_s,
        d_a=d_a,
        mask_s_to_s=s_to_s,
        mask_a_to_s=(rng.random((d_a, d_s)) < 0.5).astype(np.int8),
        mask_s_to_r=(rng.random(d_s) < reward_prob).astype(np.int8),
        mask_a_to_r=(rng.random(d_a) < 0.5).astype(np.int8),
        mask_s_to_o=np.ones(d_s, dtype=np.int8),
    )


def asr_indices(g: StructuralGraph) -> FrozenSet[int]:
    """Least fixpoint of: i is in the ASR if it parents the reward or any ASR dimension"""
    members = {i for i in range(g.d_s) if g.mask_s_to_r[i]}
    frontier = list(members)
    while frontier:
        j = frontier.pop()
        for i in np.flatnonzero(g.mask_s_to_s[:, j]):
            if int(i) not in members:
                members.add(int(i))
                frontier.append(int(i))
    return frozenset(members)


@dataclass(frozen=True)
class UnrolledDBN:
    graph: nx.DiGraph = field(repr=False)
    horizon: int
    reward_from: int

    @property
    def nodes(self) -> Set[Node]:
        return set(self.graph.nodes)

    @property
    def edges(self) -> List[tuple]:
        return list(self.graph.edges)

    def __contains__(self, node: object) -> bool:
        return node in self.graph


def unroll(g: StructuralGraph, T: int, gamma: float, reward_from: int = 2) -> UnrolledDBN:
    """Materialize the masks for T steps plus one cumulative-reward node R_{reward_from}"""
    if T < 2:
        raise ModelValidationError(f"horizon T must be at least 2, got {T}")
    if not 0.0 <= gamma <= 1.0:
        raise ModelValidationError(f"gamma must lie in [0, 1], got {gamma}")
    if not 2 <= reward_from <= T:
        raise ModelValidationError(f"reward_from must lie in [2, {T}], got {reward_from}")

    G = nx.DiGraph()
    for t in range(1, T + 1):
        G.add_node(observation(t))
        for i in range(g.d_s):
            G.add_node(state(i, t))
            if g.mask_s_to_o[i]:
                G.add_edge(state(i, t), observation(t))
    for t in range(2, T + 1):
        G.add_node(reward(t))
        for k in range(g.d_a):
            G.add_node(action(k, t - 1))
            if g.mask_a_to_r[k]:
                G.add_edge(action(k, t - 1), reward(t))
            for i in np.flatnonzero(g.mask_a_to_s[k]):
                G.add_edge(action(k, t - 1), state(int(i), t))
        for j in range(g.d_s):
            if g.mask_s_to_r[j]:
                G.add_edge(state(j, t - 1), reward(t))
            for i in np.flatnonzero(g.mask_s_to_s[j]):
                G.add_edge(state(j, t - 1), state(int(i), t))

    R = cumulative_reward(reward_from)
    G.add_node(R)
    last = reward_from if gamma == 0.0 else T
    for tau in range(reward_from, last + 1):
        G.add_edge(reward(tau), R)

    if not nx.is_directed_acyclic_graph(G):
        raise ModelValidationError("unrolled network is not acyclic")
    logger.debug(f"Unrolled DBN: T={T}, {G.number_of_nodes()} nodes, {G.number_of_edges()} edges")
    return UnrolledDBN(graph=nx.freeze(G), horizon=T, reward_from=reward_from)


def _reachable(G: nx.DiGraph, sources: Set[Node], Z: Set[Node]) -> Set[Node]:
    """Nodes connected to `sources` by an active trail given Z (Bayes-ball)"""
    opens_collider = set(Z)
    for z in Z:
        opens_collider |= nx.ancestors(G, z)

    # "up": ball arrived from a child, "down": ball arrived from a parent
    stack = [(x, "up") for x in sources]
    visited = set()
    reached = set()
    while stack:
        node, direction = stack.pop()
        if (node, direction) in visited:
            continue
        visited.add((node, direction))
        if node not in Z:
            reached.add(node)
        if direction == "up":
            if node in Z:
                continue
            stack.extend((p, "up") for p in G.predecessors(node))
            stack.extend((c, "down") for c in G.successors(node))
        else:
            if node not in Z:
                stack.extend((c, "down") for c in G.successors(node))
            if node in opens_collider:
                stack.extend((p, "up") for p in G.predecessors(node))
    return reached


def d_separated(dbn: UnrolledDBN, X: Iterable[Node], Y: Iterable[Node], Z: Iterable[Node]) -> bool:
    X, Y, Z = set(X), set(Y), set(Z)
    unknown = [n for n in X | Y | Z if n not in dbn]
    if unknown:
        raise ModelValidationError(f"unknown nodes: {sorted(str(n) for n in unknown)}")
    if X & Y or X & Z or Y & Z:
        raise ModelValidationError("X, Y and Z must be disjoint")
    return not (_reachable(dbn.graph, X, Z) & Y)


def asr_by_dsep(g: StructuralGraph, horizon: int, gamma: float = 0.99) -> FrozenSet[int]:
    """Dimensions whose state stays dependent on future cumulative reward given
    the action pair and the previous-step ASR.

    gamma must be positive: with gamma = 0 the return is a single reward and the
    test no longer characterizes the ASR.
    """
    if horizon < 2:
        raise ModelValidationError(f"horizon must be at least 2, got {horizon}")
    if not 0.0 < gamma <= 1.0:
        raise ModelValidationError(f"d-separation ASR needs gamma in (0, 1], got {gamma}")
    t = 2 if horizon >= 3 else 1
    dbn = unroll(g, horizon, gamma=gamma, reward_from=t + 1)
    prev_asr = asr_indices(g)

    Z: Set[Node] = {action(k, t) for k in range(g.d_a) if t <= horizon - 1}
    if t >= 2:
        Z |= {action(k, t - 1) for k in range(g.d_a)}
        Z |= {state(j, t - 1) for j in prev_asr}
    Y = {cumulative_reward(t + 1)}
    return frozenset(
        i for i in range(g.d_s) if not d_separated(dbn, {state(i, t)}, Y, Z)
    )


def indices_to_text(indices: Iterable[int]) -> str:
    """0-based index set to the 1-based comma list used on the CLI"""
    return ",".join(str(i + 1) for i in sorted(indices))


def indices_from_text(text: Optional[str], d_s: Optional[int] = None) -> FrozenSet[int]:
    if text is None or not text.strip():
        return frozenset()
    try:
        out = frozenset(int(part) - 1 for part in text.split(",") if part.strip())
    except ValueError as e:
        raise ModelValidationError(f"cannot parse index set '{text}': {e}") from e
    if any(i < 0 or (d_s is not None and i >= d_s) for i in out):
        raise ModelValidationError(f"index set '{text}' out of range 1..{d_s}")
    return out
