"""Expert demonstrator and heuristic comparison policies.

All policies share one protocol:

* ``begin_episode(dag, goal, rng)`` resets per-episode memory. Only the expert
  looks at ``dag``; baselines get the goal from the observation cue.
* ``observe(obs)`` appends the outcome reported by ``obs`` to the episode log.
* ``decide(obs)`` picks an action from the log and ``obs``.
* ``act(obs)`` is ``observe`` followed by ``decide``.

During exploration every built-in policy runs the expert's sweep: a random
starting variable, then the following (relevant) variables in index order,
wrapping around, each with a random sign. The heuristics only differ in how
they exploit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import Observation
from .scm import CausalDag, optimal_action

RIDGE = 1e-6


def encode_action(node: int, positive: bool) -> int:
    return 2 * int(node) + (0 if positive else 1)


def decode_action(action: int) -> tuple[int, bool]:
    return int(action) // 2, action % 2 == 0


@dataclass(frozen=True)
class LogEntry:
    node: int
    value: float
    pre: np.ndarray
    post: np.ndarray
    explore: bool

    @property
    def action(self) -> int:
        return encode_action(self.node, self.value >= 0)


# ---------------------------------------------------------------- heuristics


def value_choice(log: list[LogEntry], goal: int) -> int:
    """Repeat the logged intervention that left the goal highest."""
    if not log:
        raise ValueError("value baseline needs a non-empty exploration log")
    best = max(range(len(log)), key=lambda i: (log[i].post[goal], -i))
    return log[best].action


def change_choice(log: list[LogEntry], goal: int) -> int:
    """Take the intervention that moved the goal most, flipping its sign if
    the move was downward."""
    if not log:
        raise ValueError("change baseline needs a non-empty exploration log")
    deltas = [e.post[goal] - e.pre[goal] for e in log]
    best = max(range(len(log)), key=lambda i: (abs(deltas[i]), -i))
    entry = log[best]
    positive = entry.value >= 0
    if deltas[best] < 0:
        positive = not positive
    return encode_action(entry.node, positive)


def regression_samples(log: list[LogEntry]) -> np.ndarray:
    """Pre- and post-intervention value vectors of every logged step."""
    rows = []
    for e in log:
        rows.append(e.pre)
        rows.append(e.post)
    return np.asarray(rows, dtype=float)


def _pick_by_coefficient(coefs: np.ndarray, predictors: np.ndarray) -> int:
    best = int(np.argmax(np.abs(coefs)))  # first maximum -> lowest index
    return encode_action(predictors[best], coefs[best] >= 0)


def _predictors(n: int, goal: int, candidates) -> np.ndarray:
    pool = range(n) if candidates is None else (int(j) for j in candidates)
    return np.array(sorted(j for j in pool if j != goal), dtype=int)


def total_correlation_choice(samples: np.ndarray, goal: int, candidates=None) -> int:
    """Univariate least-squares slope of the goal on each other node.

    ``candidates`` limits the predictors (and hence the chosen action) to the
    given nodes; by default every non-goal node is a predictor.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] < 2:
        raise ValueError("need at least two samples")
    predictors = _predictors(samples.shape[1], goal, candidates)
    y = samples[:, goal] - samples[:, goal].mean()
    slopes = np.zeros(predictors.size)
    for k, j in enumerate(predictors):
        x = samples[:, j] - samples[:, j].mean()
        sxx = float(x @ x)
        if sxx > 1e-12:
            slopes[k] = float(x @ y) / sxx
    return _pick_by_coefficient(slopes, predictors)


def partial_correlation_choice(samples: np.ndarray, goal: int, candidates=None) -> int:
    """Multivariate least-squares regression of the goal on the other nodes
    (restricted to ``candidates`` when given)."""
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] < 2:
        raise ValueError("need at least two samples")
    predictors = _predictors(samples.shape[1], goal, candidates)
    X = samples[:, predictors]
    X = X - X.mean(axis=0)
    y = samples[:, goal] - samples[:, goal].mean()
    gram = X.T @ X
    rhs = X.T @ y
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        gram = gram + RIDGE * np.eye(gram.shape[0])
    coefs = np.linalg.solve(gram, rhs)
    return _pick_by_coefficient(coefs, predictors)


# ---------------------------------------------------------------- policies


class Policy:
    name = "policy"

    def begin_episode(self, dag: CausalDag | None = None, goal: int | None = None,
                      rng: np.random.Generator | None = None) -> None:
        self.rng = rng if rng is not None else np.random.default_rng()
        self.log: list[LogEntry] = []
        self._last_was_explore = True
        self._explore_acts = 0

    def observe(self, obs: Observation) -> None:
        last = obs.last_intervention()
        if last is not None:
            node, value = last
            self.log.append(LogEntry(node, value, obs.prev_values.copy(), obs.post_values.copy(),
                                     self._last_was_explore))
        self._last_was_explore = obs.exploring

    @property
    def exploration_log(self) -> list[LogEntry]:
        return [e for e in self.log if e.explore]

    def decide(self, obs: Observation) -> int:
        if obs.exploring:
            return self.explore(obs)
        return self.exploit(obs)

    def act(self, obs: Observation) -> int:
        self.observe(obs)
        action = self.decide(obs)
        if obs.exploring:
            self._explore_acts += 1
        return action

    def explore(self, obs: Observation) -> int:
        nodes = obs.relevant_nodes()
        if self._explore_acts == 0:
            self._start = int(self.rng.integers(nodes.size))
        node = nodes[(self._start + self._explore_acts) % nodes.size]
        return encode_action(node, self.rng.integers(2) == 0)

    def exploit(self, obs: Observation) -> int:
        raise NotImplementedError


class ExpertPolicy(Policy):
    """Sweeps every relevant variable, then takes the oracle action on the true DAG."""

    name = "expert"

    def begin_episode(self, dag=None, goal=None, rng=None):
        if dag is None:
            raise ValueError("the expert needs the true DAG")
        super().begin_episode(dag, goal, rng)
        self.dag = dag
        self._cache: dict[int, int] = {}

    def exploit(self, obs):
        goal = obs.goal
        if goal not in self._cache:
            self._cache[goal] = optimal_action(self.dag, goal)
        return self._cache[goal]


class ValueBaseline(Policy):
    name = "value"

    def exploit(self, obs):
        return value_choice(self.exploration_log, obs.goal)


class ChangeBaseline(Policy):
    name = "change"

    def exploit(self, obs):
        return change_choice(self.exploration_log, obs.goal)


class TotalCorrelationBaseline(Policy):
    name = "total_corr"

    def exploit(self, obs):
        return total_correlation_choice(regression_samples(self.exploration_log), obs.goal,
                                        obs.relevant_nodes())


class PartialCorrelationBaseline(Policy):
    name = "partial_corr"

    def exploit(self, obs):
        return partial_correlation_choice(regression_samples(self.exploration_log), obs.goal,
                                          obs.relevant_nodes())


class RandomPolicy(Policy):
    """Uniform over all 2n actions in both phases."""

    name = "random"

    def decide(self, obs):
        return int(self.rng.integers(2 * obs.n))


BASELINES = {cls.name: cls for cls in
             (ValueBaseline, ChangeBaseline, TotalCorrelationBaseline, PartialCorrelationBaseline)}
BUILTIN = {"expert": ExpertPolicy, "random": RandomPolicy, **BASELINES}


def make_policy(name: str) -> Policy:
    try:
        return BUILTIN[name]()
    except KeyError:
        raise ValueError(f"unknown policy {name!r}; choose from {sorted(BUILTIN)}") from None
