"""Two-phase intervention episodes over a sampled causal DAG."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .scm import CausalDag, action_to_intervention, candidate_values, optimal_action, propagate


class Phase(str, enum.Enum):
    EXPLORE = "Explore"
    EXPLOIT = "Exploit"


@dataclass(frozen=True)
class EpisodeConfig:
    exploration_steps: int | None = None  # None -> number of relevant variables
    exploitation_steps: int = 1
    magnitude: float = 4.0

    def __post_init__(self):
        if self.exploration_steps is not None and self.exploration_steps < 1:
            raise ValueError("exploration_steps must be >= 1")
        if self.exploitation_steps < 1:
            raise ValueError("exploitation_steps must be >= 1")
        if self.magnitude <= 0:
            raise ValueError("magnitude must be > 0")

    def explore_steps_for(self, dag: CausalDag) -> int:
        if self.exploration_steps is not None:
            return self.exploration_steps
        return int(dag.relevant.sum())

    def episode_length(self, dag: CausalDag) -> int:
        return self.explore_steps_for(dag) + self.exploitation_steps


@dataclass(frozen=True)
class Observation:
    prev_values: np.ndarray
    prev_intervention: np.ndarray
    post_values: np.ndarray
    init_values: np.ndarray
    goal_cue: np.ndarray
    relevance_cue: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.prev_values.shape[0]

    @property
    def exploring(self) -> bool:
        return not self.goal_cue.any()

    @property
    def goal(self) -> int | None:
        return None if self.exploring else int(np.argmax(self.goal_cue))

    def relevant_nodes(self) -> np.ndarray:
        if self.relevance_cue is None:
            return np.arange(self.n)
        return np.flatnonzero(self.relevance_cue)

    def last_intervention(self) -> tuple[int, float] | None:
        nz = np.flatnonzero(self.prev_intervention)
        if nz.size == 0:
            return None
        return int(nz[0]), float(self.prev_intervention[nz[0]])

    def as_vector(self) -> np.ndarray:
        """Concatenation in the fixed layout: prev, intervention, post, init,
        goal cue, then (adaptive only) the relevance cue."""
        parts = [self.prev_values, self.prev_intervention, self.post_values,
                 self.init_values, self.goal_cue]
        if self.relevance_cue is not None:
            parts.append(self.relevance_cue)
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, vec, n: int) -> "Observation":
        vec = np.asarray(vec, dtype=float)
        if vec.shape[0] not in (5 * n, 6 * n):
            raise ValueError(f"observation vector of length {vec.shape[0]} does not fit n={n}")
        parts = [vec[i * n:(i + 1) * n].copy() for i in range(vec.shape[0] // n)]
        rel = parts[5] if len(parts) == 6 else None
        return cls(*parts[:5], relevance_cue=rel)


def observation_width(n: int, adaptive: bool) -> int:
    return (6 if adaptive else 5) * n


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    reward: float
    phase: Phase
    done: bool
    violation: bool = False  # intervened on an irrelevant node


class CausalDagEnv:
    """Single-episode session.

    Each experiment starts from the ``init_values`` shown in the previous
    observation; the intervention outcome reuses that draw's exogenous noise,
    so ``post - prev`` isolates the intervention's effect.

    ``zero_noise=True`` switches every noise draw to zero (deterministic test mode).
    """

    def __init__(self, config: EpisodeConfig | None = None, *, zero_noise: bool = False):
        self.config = config or EpisodeConfig()
        self.zero_noise = zero_noise
        self._dag: CausalDag | None = None
        self._done = True

    @property
    def dag(self) -> CausalDag:
        return self._dag

    @property
    def goal(self) -> int:
        return self._goal

    @property
    def adaptive(self) -> bool:
        return not bool(self._dag.relevant.all())

    @property
    def explore_steps(self) -> int:
        return self._explore_steps

    @property
    def t(self) -> int:
        return self._t

    @property
    def done(self) -> bool:
        return self._done

    def _draw_noise(self) -> np.ndarray:
        if self.zero_noise:
            return np.zeros(self._dag.n)
        return self._rng.standard_normal(self._dag.n) * self._dag.noise_sd

    def reset(self, dag: CausalDag, goal: int, rng: np.random.Generator | None = None) -> Observation:
        if not 0 <= goal < dag.n:
            raise ValueError(f"goal {goal} out of range for n={dag.n}")
        if not dag.relevant[goal]:
            raise ValueError(f"goal {goal} is not a relevant node")
        if dag.magnitude != self.config.magnitude:
            raise ValueError(f"episode magnitude {self.config.magnitude} != dag magnitude {dag.magnitude}")
        self._dag = dag
        self._goal = int(goal)
        self._rng = rng if rng is not None else np.random.default_rng()
        self._explore_steps = self.config.explore_steps_for(dag)
        self._length = self._explore_steps + self.config.exploitation_steps
        self._t = 0
        self._done = False
        self._eps = self._draw_noise()
        self._init = propagate(dag, (), self._eps)
        zeros = np.zeros(dag.n)
        return self._observation(zeros, zeros, zeros)

    def _observation(self, prev, interv, post) -> Observation:
        n = self._dag.n
        goal_cue = np.zeros(n)
        if self._t >= self._explore_steps:
            goal_cue[self._goal] = 1.0
        rel = self._dag.relevant.astype(float) if self.adaptive else None
        return Observation(prev, interv, post, self._init.copy(), goal_cue, rel)

    def step(self, action: int) -> StepResult:
        if self._done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        n = self._dag.n
        if not 0 <= action < 2 * n:
            raise ValueError(f"action {action} out of range [0, {2 * n})")
        iv = action_to_intervention(action, self.config.magnitude)
        phase = Phase.EXPLORE if self._t < self._explore_steps else Phase.EXPLOIT
        prev = self._init
        post = propagate(self._dag, (iv,), self._eps)
        interv = np.zeros(n)
        interv[iv.node] = iv.value
        reward = float(post[self._goal]) if phase is Phase.EXPLOIT else 0.0
        self._t += 1
        self._done = self._t >= self._length
        self._eps = self._draw_noise()
        self._init = propagate(self._dag, (), self._eps)
        obs = self._observation(prev.copy(), interv, post)
        return StepResult(obs, reward, phase, self._done, violation=not bool(self._dag.relevant[iv.node]))


def optimal_episode_reward(dag: CausalDag, goal: int, config: EpisodeConfig | None = None) -> float:
    """Noise-free reward of repeating the optimal intervention on every exploit step."""
    config = config or EpisodeConfig()
    best = candidate_values(dag, goal)[optimal_action(dag, goal)]
    return config.exploitation_steps * float(best)
