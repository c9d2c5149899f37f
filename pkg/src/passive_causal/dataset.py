"""Expert-demonstration datasets: generation, JSON-lines serialization, and
held-out relevance masks.

File layout: the first line is a header object holding the manifest, every
following line is one trajectory record. Floats are written with ``repr``
(shortest round-trip form, 17 significant digits at most), so reading a file
back reproduces every value exactly.

Each episode owns an independent random stream derived from
``(master_seed, episode_id)`` by :func:`episode_seed`; generation can therefore
be split across workers without coordination.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator

import numpy as np

from .env import CausalDagEnv, EpisodeConfig, observation_width
from .policies import ExpertPolicy
from .scm import (CausalDag, ConstraintKind, ConstraintSpec, DagConfig, sample_dag, sample_goal,
                  satisfies)

FORMAT_NAME = "passive-causal-dataset"
FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Malformed or incompatible dataset content."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class DatasetManifest:
    dag: DagConfig = field(default_factory=DagConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    constraint: ConstraintSpec = field(default_factory=ConstraintSpec)
    master_seed: int = 0
    episode_count: int | None = 1000  # None -> unbounded stream
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.episode_count is not None and self.episode_count <= 0:
            raise ValueError("episode_count must be > 0 (or None for an unbounded stream)")
        self.constraint.validate_for(self.dag.n)

    @property
    def adaptive(self) -> bool:
        return self.dag.num_relevant is not None and self.dag.num_relevant < self.dag.n

    @property
    def episode_length(self) -> int:
        explore = self.episode.exploration_steps
        if explore is None:
            explore = self.dag.num_relevant or self.dag.n
        return explore + self.episode.exploitation_steps

    @property
    def obs_width(self) -> int:
        return observation_width(self.dag.n, self.adaptive)

    def to_dict(self) -> dict:
        c = self.constraint
        return {
            "dag": dataclasses.asdict(self.dag),
            "episode": dataclasses.asdict(self.episode),
            "constraint": {
                "kind": c.kind.value,
                "test_intervention_node": c.test_intervention_node,
                "test_goal_node": c.test_goal_node,
                "heldout_subsets": sorted(c.heldout_subsets),
            },
            "master_seed": self.master_seed,
            "episode_count": self.episode_count,
            "format_version": self.format_version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        c = d["constraint"]
        return cls(
            dag=DagConfig(**d["dag"]),
            episode=EpisodeConfig(**d["episode"]),
            constraint=ConstraintSpec(ConstraintKind(c["kind"]), c["test_intervention_node"],
                                      c["test_goal_node"], frozenset(c["heldout_subsets"])),
            master_seed=d["master_seed"],
            episode_count=d["episode_count"],
            format_version=d["format_version"],
        )

    def digest(self) -> str:
        return hashlib.sha256(_dumps(self.to_dict()).encode()).hexdigest()

    def replace(self, **changes) -> "DatasetManifest":
        return dataclasses.replace(self, **changes)


@dataclass
class TrajectoryRecord:
    episode_id: int
    seed: int
    constraint: ConstraintKind
    dag: CausalDag
    goal: int
    observations: np.ndarray  # (T, obs_width), the observation each action was taken on
    actions: np.ndarray       # (T,) int
    rewards: np.ndarray       # (T,)

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "seed": self.seed,
            "constraint": self.constraint.value,
            "dag": self.dag.to_dict(),
            "goal": self.goal,
            "steps": [
                {"obs": [float(x) for x in o], "action": int(a), "reward": float(r)}
                for o, a, r in zip(self.observations, self.actions, self.rewards)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryRecord":
        steps = d["steps"]
        return cls(
            episode_id=int(d["episode_id"]),
            seed=int(d["seed"]),
            constraint=ConstraintKind(d["constraint"]),
            dag=CausalDag.from_dict(d["dag"]),
            goal=int(d["goal"]),
            observations=np.array([s["obs"] for s in steps], dtype=float),
            actions=np.array([s["action"] for s in steps], dtype=np.int64),
            rewards=np.array([s["reward"] for s in steps], dtype=float),
        )

    def __eq__(self, other):
        if not isinstance(other, TrajectoryRecord):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


# ---------------------------------------------------------------- seeding


def episode_seed(master_seed: int, episode_id: int) -> int:
    """Stateless 64-bit mix of ``(master_seed, episode_id)`` via numpy's SeedSequence."""
    state = np.random.SeedSequence([int(master_seed), int(episode_id)]).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def episode_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent (graph, environment, policy) generators for one episode."""
    return tuple(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))


# ---------------------------------------------------------------- simulation


def run_expert_episode(dag: CausalDag, goal: int, episode_config: EpisodeConfig,
                       env_rng: np.random.Generator, policy_rng: np.random.Generator):
    """Roll out the expert; returns ``(observations, actions, rewards)`` arrays."""
    env = CausalDagEnv(episode_config)
    expert = ExpertPolicy()
    expert.begin_episode(dag, goal, policy_rng)
    obs = env.reset(dag, goal, env_rng)
    observations, actions, rewards = [], [], []
    done = False
    while not done:
        a = expert.act(obs)
        observations.append(obs.as_vector())
        actions.append(a)
        res = env.step(a)
        rewards.append(res.reward)
        obs, done = res.observation, res.done
    return np.array(observations), np.array(actions, dtype=np.int64), np.array(rewards)


def simulate_record(manifest: DatasetManifest, episode_id: int) -> TrajectoryRecord:
    seed = episode_seed(manifest.master_seed, episode_id)
    dag_rng, env_rng, pol_rng = episode_streams(seed)
    dag = sample_dag(manifest.dag, manifest.constraint, dag_rng)
    goal = sample_goal(dag, manifest.constraint, dag_rng)
    obs, acts, rews = run_expert_episode(dag, goal, manifest.episode, env_rng, pol_rng)
    return TrajectoryRecord(episode_id, seed, manifest.constraint.kind, dag, goal, obs, acts, rews)


def replay_record(record: TrajectoryRecord, episode_config: EpisodeConfig) -> TrajectoryRecord:
    """Re-simulate a record from its stored graph, goal and seed."""
    _, env_rng, pol_rng = episode_streams(record.seed)
    obs, acts, rews = run_expert_episode(record.dag, record.goal, episode_config, env_rng, pol_rng)
    return dataclasses.replace(record, observations=obs, actions=acts, rewards=rews)


def iter_records(manifest: DatasetManifest, start: int = 0) -> Iterator[TrajectoryRecord]:
    """Records ``start, start+1, ...``; unbounded when ``episode_count`` is None."""
    stop = manifest.episode_count
    ids = itertools.count(start) if stop is None else range(start, stop)
    for i in ids:
        yield simulate_record(manifest, i)


def _simulate_line(args) -> tuple[str, bool, int]:
    manifest, episode_id = args
    rec = simulate_record(manifest, episode_id)
    ok = satisfies(rec.dag, manifest.constraint)
    return _dumps(rec.to_dict()), ok, len(rec.actions)


def header_line(manifest: DatasetManifest) -> str:
    return _dumps({"format": FORMAT_NAME, "version": manifest.format_version,
                   "manifest": manifest.to_dict()})


def generate_dataset(manifest: DatasetManifest, sink: IO[str] | str | Path, jobs: int = 1,
                     limit: int | None = None) -> dict:
    """Write the header and ``episode_count`` records to ``sink``.

    ``limit`` caps the number of records for unbounded manifests (otherwise an
    unbounded manifest streams until interrupted). Returns summary counts.
    """
    if isinstance(sink, (str, Path)):
        with open(sink, "w", encoding="utf-8", newline="\n") as fh:
            return generate_dataset(manifest, fh, jobs=jobs, limit=limit)
    count = manifest.episode_count if limit is None else (
        limit if manifest.episode_count is None else min(limit, manifest.episode_count))
    ids: Iterable[int] = itertools.count() if count is None else range(count)
    sink.write(header_line(manifest) + "\n")
    summary = {"episodes": 0, "steps": 0, "constraint_violations": 0}
    tasks = ((manifest, i) for i in ids)
    if jobs > 1:
        import multiprocessing

        with multiprocessing.Pool(jobs) as pool:
            _drain(pool.imap(_simulate_line, tasks, chunksize=64), sink, summary)
    else:
        _drain(map(_simulate_line, tasks), sink, summary)
    return summary


def _drain(lines, sink, summary):
    for line, ok, steps in lines:
        sink.write(line + "\n")
        summary["episodes"] += 1
        summary["steps"] += steps
        summary["constraint_violations"] += 0 if ok else 1


# ---------------------------------------------------------------- reading


def _validate(rec: TrajectoryRecord, manifest: DatasetManifest, line: int) -> None:
    length = manifest.episode_length
    if rec.actions.shape != (length,):
        raise DatasetError(f"expected {length} steps, found {rec.actions.shape[0]}", line)
    if rec.observations.shape != (length, manifest.obs_width):
        raise DatasetError(f"observation block has shape {rec.observations.shape}", line)
    if np.any(rec.actions < 0) or np.any(rec.actions >= 2 * manifest.dag.n):
        raise DatasetError("action index out of range", line)
    if not np.all(np.isfinite(rec.observations)) or not np.all(np.isfinite(rec.rewards)):
        raise DatasetError("non-finite value", line)
    if rec.dag.n != manifest.dag.n or not 0 <= rec.goal < rec.dag.n:
        raise DatasetError("graph size or goal inconsistent with manifest", line)


def read_header(source: IO[str]) -> DatasetManifest:
    first = source.readline()
    if not first:
        raise DatasetError("missing header", 1)
    try:
        head = json.loads(first)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"header is not valid JSON ({exc.msg})", 1) from None
    if not isinstance(head, dict) or head.get("format") != FORMAT_NAME:
        raise DatasetError("not a passive-causal dataset header", 1)
    if head.get("version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported format version {head.get('version')!r}", 1)
    try:
        return DatasetManifest.from_dict(head["manifest"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"bad manifest: {exc}", 1) from None


def read_dataset(source: IO[str] | str | Path, with_manifest: bool = False) -> Iterator:
    """Yield records in file order, validating each one.

    With ``with_manifest=True`` the first item yielded is the manifest.
    """
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            yield from read_dataset(fh, with_manifest)
        return
    manifest = read_header(source)
    if with_manifest:
        yield manifest
    for lineno, line in enumerate(source, start=2):
        if not line.strip():
            continue
        try:
            rec = TrajectoryRecord.from_dict(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"malformed record ({exc.msg})", lineno) from None
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"malformed record ({exc})", lineno) from None
        _validate(rec, manifest, lineno)
        yield rec


def load_manifest(path: str | Path) -> DatasetManifest:
    """Manifest from a dataset file's header or from a standalone sidecar JSON."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    first = text.split("\n", 1)[0]
    try:
        head = json.loads(first)
    except json.JSONDecodeError:
        head = json.loads(text)
    if isinstance(head, dict) and head.get("format") == FORMAT_NAME:
        return read_header(io.StringIO(first + "\n"))
    return DatasetManifest.from_dict(head)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")


# ---------------------------------------------------------------- relevance masks


def all_masks(n: int, k: int) -> list[int]:
    return [sum(1 << i for i in combo) for combo in itertools.combinations(range(n), k)]


def heldout_masks(n: int, num_relevant: int, fraction: float = 0.2, seed: int = 0) -> frozenset[int]:
    """Deterministically hold out ``ceil(fraction * C(n, k))`` relevance masks.

    Masks are ranked by a BLAKE2b hash of ``(seed, mask bits)`` and the lowest
    ranks are held out.
    """
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    masks = all_masks(n, num_relevant)
    count = math.ceil(fraction * len(masks))

    def rank(bits: int) -> bytes:
        return hashlib.blake2b(f"{seed}:{bits:0{n}b}".encode(), digest_size=16).digest()

    return frozenset(sorted(masks, key=rank)[:count])
