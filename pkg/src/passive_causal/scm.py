"""Constrained causal DAG sampling, propagation under interventions, and the
optimal-intervention oracle."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import kernels

MAX_ATTEMPTS = 10_000


class ConstraintError(RuntimeError):
    """Rejection sampling could not satisfy a constraint."""

    def __init__(self, kind: str, attempts: int):
        super().__init__(f"could not satisfy constraint {kind} after {attempts} attempts")
        self.kind = kind
        self.attempts = attempts


class ConstraintKind(str, enum.Enum):
    TRAIN_STANDARD = "TrainStandard"
    EVAL_TARGET = "EvalTarget"
    EVAL_PATH = "EvalPath"
    ADAPTIVE_TRAIN = "AdaptiveTrain"
    ADAPTIVE_EVAL = "AdaptiveEval"
    UNCONSTRAINED = "Unconstrained"

    @property
    def is_eval(self) -> bool:
        return self in (ConstraintKind.EVAL_TARGET, ConstraintKind.EVAL_PATH)

    @property
    def is_adaptive(self) -> bool:
        return self in (ConstraintKind.ADAPTIVE_TRAIN, ConstraintKind.ADAPTIVE_EVAL)


@dataclass(frozen=True)
class DagConfig:
    n: int = 5
    num_relevant: int | None = None
    nonlinear: bool = True
    leak: float = 0.2
    weight_low: float = -2.0
    weight_high: float = 2.0
    noise_mean: float = 0.5
    noise_std: float = 0.25
    intervention_magnitude: float = 4.0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"n must be >= 2, got {self.n}")
        if not self.weight_low < self.weight_high:
            raise ValueError("weight_low must be < weight_high")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.intervention_magnitude <= 0:
            raise ValueError("intervention_magnitude must be > 0")
        if self.num_relevant is not None and not 0 < self.num_relevant <= self.n:
            raise ValueError(f"num_relevant must be in (0, n], got {self.num_relevant}")


@dataclass(frozen=True)
class ConstraintSpec:
    """Which DAG family to sample from.

    ``test_intervention_node`` and ``test_goal_node`` default to D and E of the
    five-variable setup (indices 3 and 4). ``heldout_subsets`` holds relevance
    masks encoded as integer bitmasks (bit ``i`` set when node ``i`` is relevant).
    """

    kind: ConstraintKind = ConstraintKind.TRAIN_STANDARD
    test_intervention_node: int = 3
    test_goal_node: int = 4
    heldout_subsets: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "kind", ConstraintKind(self.kind))
        object.__setattr__(self, "heldout_subsets", frozenset(int(m) for m in self.heldout_subsets))
        if self.test_intervention_node == self.test_goal_node:
            raise ValueError("test_intervention_node and test_goal_node must differ")

    def validate_for(self, n: int) -> None:
        for name in ("test_intervention_node", "test_goal_node"):
            v = getattr(self, name)
            if not 0 <= v < n:
                raise ValueError(f"{name}={v} out of range for n={n}")
        if self.kind is ConstraintKind.ADAPTIVE_EVAL and not self.heldout_subsets:
            raise ValueError("AdaptiveEval needs a non-empty heldout_subsets")


@dataclass(frozen=True)
class Intervention:
    node: int
    value: float


def mask_to_int(mask: Iterable[bool]) -> int:
    return sum(1 << i for i, b in enumerate(mask) if b)


def int_to_mask(bits: int, n: int) -> np.ndarray:
    return np.array([(bits >> i) & 1 == 1 for i in range(n)], dtype=bool)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class CausalDag:
    """An immutable sampled graph.

    Parent lists, weights and noise variances are stored in the padded array
    layout the kernels consume; :meth:`parents` and :meth:`weight` give the
    list view.
    """

    __slots__ = ("order", "par_idx", "par_w", "noise_var", "noise_sd", "relevant",
                 "nonlinear", "leak", "magnitude")

    def __init__(self, order, parents, weights, noise_var, relevant=None, *,
                 nonlinear: bool = True, leak: float = 0.2, magnitude: float = 4.0):
        n = len(order)
        if sorted(int(v) for v in order) != list(range(n)):
            raise ValueError("order must be a permutation of range(n)")
        if len(parents) != n or len(weights) != n:
            raise ValueError("parents and weights need one entry per node")
        par_idx = np.full((n, kernels.MAX_PARENTS), -1, dtype=np.int64)
        par_w = np.zeros((n, kernels.MAX_PARENTS))
        position = {int(v): i for i, v in enumerate(order)}
        for child, (ps, ws) in enumerate(zip(parents, weights)):
            if len(ps) != len(ws):
                raise ValueError(f"node {child}: parents/weights length mismatch")
            if len(ps) > kernels.MAX_PARENTS:
                raise ValueError(f"node {child} has more than {kernels.MAX_PARENTS} parents")
            if len(set(ps)) != len(ps):
                raise ValueError(f"node {child} has duplicate parents")
            for k, (p, w) in enumerate(zip(ps, ws)):
                if position[int(p)] >= position[child]:
                    raise ValueError(f"parent {p} does not precede child {child} in order")
                par_idx[child, k] = int(p)
                par_w[child, k] = float(w)
        noise_var = np.asarray(noise_var, dtype=float)
        if noise_var.shape != (n,) or np.any(noise_var < 0) or not np.all(np.isfinite(noise_var)):
            raise ValueError("noise_var must be n finite non-negative values")
        relevant = np.ones(n, dtype=bool) if relevant is None else np.asarray(relevant, dtype=bool)
        for child in range(n):
            if not relevant[child] and np.any(par_idx[child] >= 0):
                raise ValueError(f"irrelevant node {child} has parents")
            for p in par_idx[child]:
                if p >= 0 and not relevant[p]:
                    raise ValueError(f"irrelevant node {p} is a parent of {child}")
        self.order = _frozen(np.asarray(order, dtype=np.int64))
        self.par_idx = _frozen(par_idx)
        self.par_w = _frozen(par_w)
        self.noise_var = _frozen(noise_var)
        self.noise_sd = _frozen(np.sqrt(noise_var))
        self.relevant = _frozen(relevant)
        self.nonlinear = bool(nonlinear)
        self.leak = float(leak)
        self.magnitude = float(magnitude)

    @property
    def n(self) -> int:
        return int(self.order.shape[0])

    def parents(self, node: int) -> list[int]:
        return [int(p) for p in self.par_idx[node] if p >= 0]

    def weight(self, child: int, parent: int) -> float:
        for k in range(kernels.MAX_PARENTS):
            if self.par_idx[child, k] == parent:
                return float(self.par_w[child, k])
        raise KeyError(f"{parent} is not a parent of {child}")

    def edges(self) -> list[tuple[int, int, float]]:
        """``(parent, child, weight)`` triples."""
        return [(p, c, self.weight(c, p)) for c in range(self.n) for p in self.parents(c)]

    @property
    def relevance_bits(self) -> int:
        return mask_to_int(self.relevant)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "order": [int(v) for v in self.order],
            "parents": [self.parents(c) for c in range(self.n)],
            "weights": [[float(self.par_w[c, k]) for k in range(len(self.parents(c)))] for c in range(self.n)],
            "noise_var": [float(v) for v in self.noise_var],
            "relevant": [bool(v) for v in self.relevant],
            "nonlinear": self.nonlinear,
            "leak": self.leak,
            "magnitude": self.magnitude,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CausalDag":
        dag = cls(d["order"], d["parents"], d["weights"], d["noise_var"], d["relevant"],
                  nonlinear=d["nonlinear"], leak=d["leak"], magnitude=d["magnitude"])
        if dag.n != d["n"]:
            raise ValueError("declared n does not match order length")
        return dag

    def __eq__(self, other):
        if not isinstance(other, CausalDag):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(repr(self.to_dict()))

    def __repr__(self):
        return f"CausalDag(order={list(self.order)}, edges={self.edges()})"


# ---------------------------------------------------------------- queries


def is_ancestor(dag: CausalDag, a: int, b: int) -> bool:
    """True iff a directed path ``a -> ... -> b`` exists (never for ``a == b``)."""
    stack = dag.parents(b)
    seen = set()
    while stack:
        v = stack.pop()
        if v == a:
            return True
        if v not in seen:
            seen.add(v)
            stack.extend(dag.parents(v))
    return False


def descendants(dag: CausalDag, a: int) -> set[int]:
    out: set[int] = set()
    for v in dag.order:
        v = int(v)
        if any(p == a or p in out for p in dag.parents(v)):
            out.add(v)
    return out


def propagate(dag: CausalDag, interventions: Iterable[Intervention] = (), noise=None) -> np.ndarray:
    """Values of every node under ``interventions``.

    ``noise`` is ``None`` for the zero-noise mode, a ``numpy.random.Generator``
    to draw Gaussian noise with each node's variance, or an explicit length-n
    vector of noise terms.
    """
    n = dag.n
    mask = np.zeros((1, n), dtype=np.bool_)
    val = np.zeros((1, n))
    for iv in interventions:
        if not 0 <= iv.node < n:
            raise ValueError(f"intervention node {iv.node} out of range")
        if mask[0, iv.node]:
            raise ValueError(f"duplicate intervention on node {iv.node}")
        mask[0, iv.node] = True
        val[0, iv.node] = iv.value
    return _propagate_eps(dag, mask, val, sample_noise(dag, noise))[0]


def sample_noise(dag: CausalDag, noise) -> np.ndarray:
    if noise is None:
        return np.zeros((1, dag.n))
    if isinstance(noise, np.random.Generator):
        return (noise.standard_normal(dag.n) * dag.noise_sd)[None, :]
    eps = np.asarray(noise, dtype=float).reshape(1, dag.n)
    return eps


def _propagate_eps(dag, mask, val, eps):
    return kernels.propagate_batch(dag.order, dag.par_idx, dag.par_w, mask, val,
                                   np.ascontiguousarray(eps, dtype=float), dag.nonlinear, dag.leak)


def action_to_intervention(action: int, magnitude: float) -> Intervention:
    return Intervention(int(action) // 2, magnitude if action % 2 == 0 else -magnitude)


def intervention_to_action(iv: Intervention) -> int:
    return 2 * iv.node + (0 if iv.value >= 0 else 1)


def candidate_values(dag: CausalDag, goal: int) -> np.ndarray:
    """Zero-noise goal value for each of the 2n actions (``-inf`` where the
    node is not relevant). Index ``2*i`` is ``do(X_i=+m)``, ``2*i+1`` is ``-m``."""
    if not 0 <= goal < dag.n:
        raise ValueError(f"goal {goal} out of range")
    return kernels.candidate_values(dag.order, dag.par_idx, dag.par_w, dag.relevant,
                                    dag.magnitude, dag.nonlinear, dag.leak, int(goal))


def optimal_action(dag: CausalDag, goal: int) -> int:
    # np.argmax returns the first maximum: lowest node, then the positive sign.
    return int(np.argmax(candidate_values(dag, goal)))


def optimal_intervention(dag: CausalDag, goal: int) -> Intervention:
    """The intervention that maximises the noise-free goal value."""
    return action_to_intervention(optimal_action(dag, goal), dag.magnitude)


def monte_carlo_candidate_means(dag: CausalDag, goal: int, samples: int, rng: np.random.Generator) -> np.ndarray:
    """Sampled-noise estimate of the expected goal value for each action."""
    eps = rng.standard_normal((samples, dag.n)) * dag.noise_sd
    return kernels.mc_candidate_means(dag.order, dag.par_idx, dag.par_w, dag.relevant,
                                      dag.magnitude, dag.nonlinear, dag.leak, int(goal), eps)


# ---------------------------------------------------------------- sampling


def _sample_mask(config: DagConfig, constraint: ConstraintSpec, rng) -> np.ndarray:
    n = config.n
    if config.num_relevant is None:
        if constraint.kind.is_adaptive:
            raise ValueError(f"{constraint.kind.value} needs num_relevant")
        return np.ones(n, dtype=bool)
    k = config.num_relevant
    if constraint.kind is ConstraintKind.ADAPTIVE_EVAL:
        pool = sorted(constraint.heldout_subsets)
        return int_to_mask(pool[int(rng.integers(len(pool)))], n)
    for _ in range(MAX_ATTEMPTS):
        mask = np.zeros(n, dtype=bool)
        mask[rng.choice(n, size=k, replace=False)] = True
        if constraint.kind is ConstraintKind.ADAPTIVE_TRAIN and mask_to_int(mask) in constraint.heldout_subsets:
            continue
        return mask
    raise ConstraintError(constraint.kind.value, MAX_ATTEMPTS)


def _boost_path(parents, weights, d, e, shrink_target_inputs, config, rng):
    """Rescale weights so the D -> E paths dominate E's inputs."""
    n = len(parents)
    # nodes strictly below D that still reach E
    below_d = set()
    changed = True
    while changed:
        changed = False
        for v in range(n):
            if v not in below_d and any(p == d or p in below_d for p in parents[v]):
                below_d.add(v)
                changed = True
    reaches_e = {e}
    changed = True
    while changed:
        changed = False
        for v in range(n):
            if v in reaches_e:
                for p in parents[v]:
                    if p not in reaches_e:
                        reaches_e.add(p)
                        changed = True
    path = below_d & reaches_e
    on_path = path | {d}
    hi = config.weight_high
    for v in sorted(path | ({d} if shrink_target_inputs else set())):
        for k, p in enumerate(parents[v]):
            sign = -1.0 if weights[v][k] < 0 else 1.0
            if v in path and p in on_path:
                weights[v][k] = sign * (hi - (hi - 1.0) * rng.random())  # (1, hi]
            else:
                weights[v][k] = sign * rng.uniform(np.finfo(float).tiny, 1.0)  # (0, 1)


def _sample_once(config: DagConfig, constraint: ConstraintSpec, rng) -> CausalDag | None:
    n = config.n
    kind = constraint.kind
    d, e = constraint.test_intervention_node, constraint.test_goal_node
    relevant = _sample_mask(config, constraint, rng)

    order = rng.permutation(n)
    if kind.is_eval:
        order = np.concatenate([order[order != e], [e]])
    noise_var = np.clip(rng.normal(config.noise_mean, config.noise_std, size=n), 0.0, None)

    rel_order = [int(v) for v in order if relevant[v]]
    m = len(rel_order)
    num_independent = int(rng.integers(1, max(1, m // 2) + 1))

    guard_train = (kind is ConstraintKind.TRAIN_STANDARD
                   or (kind is ConstraintKind.ADAPTIVE_TRAIN and relevant[d] and relevant[e]))
    parents: list[list[int]] = [[] for _ in range(n)]
    weights: list[list[float]] = [[] for _ in range(n)]
    below_d: set[int] = set()  # descendants of D among nodes placed so far
    for pos in range(num_independent, m):
        node = rel_order[pos]
        eligible = rel_order[:pos]
        if node == e and guard_train:
            eligible = [p for p in eligible if p != d and p not in below_d]
        elif node == e and kind.is_eval:
            eligible = [p for p in eligible if p == d or p in below_d]
        if not eligible:
            return None
        k = int(rng.integers(1, min(2, len(eligible)) + 1))
        chosen = sorted(int(p) for p in rng.choice(eligible, size=k, replace=False))
        parents[node] = chosen
        weights[node] = [float(w) for w in rng.uniform(config.weight_low, config.weight_high, size=k)]
        if any(p == d or p in below_d for p in chosen):
            below_d.add(node)

    if kind.is_eval:
        _boost_path(parents, weights, d, e, kind is ConstraintKind.EVAL_TARGET, config, rng)

    dag = CausalDag(order, parents, weights, noise_var, relevant, nonlinear=config.nonlinear,
                    leak=config.leak, magnitude=config.intervention_magnitude)
    if kind is ConstraintKind.EVAL_TARGET:
        if optimal_intervention(dag, e).node != d:
            return None
    elif kind is ConstraintKind.EVAL_PATH:
        best = optimal_intervention(dag, e).node
        if best != d and not is_ancestor(dag, best, d):
            return None
    return dag


def sample_dag(config: DagConfig, constraint: ConstraintSpec | None = None,
               rng: np.random.Generator | None = None) -> CausalDag:
    """Rejection-sample a DAG from the family described by ``constraint``.

    Raises:
        ConstraintError: if :data:`MAX_ATTEMPTS` draws all fail.
    """
    constraint = constraint or ConstraintSpec()
    rng = rng if rng is not None else np.random.default_rng()
    constraint.validate_for(config.n)
    if constraint.kind.is_adaptive and config.num_relevant is None:
        raise ValueError(f"{constraint.kind.value} needs config.num_relevant")
    for _ in range(MAX_ATTEMPTS):
        dag = _sample_once(config, constraint, rng)
        if dag is not None:
            return dag
    raise ConstraintError(constraint.kind.value, MAX_ATTEMPTS)


def satisfies(dag: CausalDag, constraint: ConstraintSpec) -> bool:
    """Audit a DAG against a constraint's post-conditions."""
    d, e = constraint.test_intervention_node, constraint.test_goal_node
    kind = constraint.kind
    bits = dag.relevance_bits
    if kind is ConstraintKind.TRAIN_STANDARD:
        return not is_ancestor(dag, d, e)
    if kind is ConstraintKind.ADAPTIVE_TRAIN:
        if bits in constraint.heldout_subsets:
            return False
        if dag.relevant[d] and dag.relevant[e]:
            return not is_ancestor(dag, d, e)
        return True
    if kind is ConstraintKind.ADAPTIVE_EVAL:
        return bits in constraint.heldout_subsets
    if kind.is_eval:
        if int(dag.order[-1]) != e or not is_ancestor(dag, d, e):
            return False
        best = optimal_intervention(dag, e).node
        if kind is ConstraintKind.EVAL_TARGET:
            return best == d
        return best == d or is_ancestor(dag, best, d)
    return True


def eval_path_nodes(dag: CausalDag, d: int, e: int) -> set[int]:
    """Nodes strictly below ``d`` that are ancestors of (or equal to) ``e``."""
    below = descendants(dag, d)
    return {v for v in below if v == e or is_ancestor(dag, v, e)}


def sample_goal(dag: CausalDag, constraint: ConstraintSpec, rng: np.random.Generator) -> int:
    """Goal node for an episode: E in the eval splits, else a uniform relevant node."""
    if constraint.kind.is_eval:
        return constraint.test_goal_node
    choices = np.flatnonzero(dag.relevant)
    return int(choices[rng.integers(len(choices))])


__all__ = [
    "ConstraintError", "ConstraintKind", "DagConfig", "ConstraintSpec", "Intervention", "CausalDag",
    "sample_dag", "propagate", "is_ancestor", "descendants", "optimal_intervention", "optimal_action",
    "candidate_values", "monte_carlo_candidate_means", "satisfies", "sample_goal", "mask_to_int",
    "int_to_mask", "action_to_intervention", "intervention_to_action", "eval_path_nodes",
]
