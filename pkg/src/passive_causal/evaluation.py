"""Interactive evaluation of policies and the headline metrics.

Metrics per condition:

``reward_fraction``          total exploit reward / total noise-free optimal reward
``match_<ref>``              share of exploit steps where the evaluated policy's action
                             equals the reference policy's action (``expert``, ``value``,
                             ``change``, ``total_corr``, ``partial_corr``)
``exploration_correctness``  share of episodes whose exploration hit every relevant
                             variable exactly once and no irrelevant one

Reference policies are fed the evaluated policy's own observation stream, so
they judge the same realized history.

Half-widths are 95% normal-approximation intervals over episodes:
``1.96 * sd / sqrt(N)`` for per-episode proportions, and for the ratio of
means the delta-method form ``1.96 * sd(R_i - q * O_i) / (mean(O) * sqrt(N))``
with ``q`` the reward fraction, ``R_i`` episode reward and ``O_i`` episode
optimum.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import episode_seed, episode_streams
from .env import CausalDagEnv, EpisodeConfig, Phase, optimal_episode_reward
from .policies import BASELINES, ExpertPolicy, Policy
from .scm import ConstraintKind, ConstraintSpec, DagConfig, sample_dag, sample_goal

Z95 = 1.959963984540054
REFERENCES = ("expert", "value", "change", "total_corr", "partial_corr")
METRICS = ("reward_fraction",) + tuple(f"match_{r}" for r in REFERENCES) + ("exploration_correctness",)
CSV_FIELDS = ("condition", "metric", "value", "ci_half_width", "n_episodes")


@dataclass(frozen=True)
class MetricValue:
    value: float
    half_width: float


@dataclass
class EvalReport:
    """Metrics keyed by condition name."""

    policy: str
    metrics: dict[str, dict[str, MetricValue]] = field(default_factory=dict)
    n_episodes: dict[str, int] = field(default_factory=dict)
    raw: dict[str, dict[str, float]] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    @property
    def conditions(self) -> list[str]:
        return list(self.metrics)

    def value(self, condition: str, metric: str) -> float:
        return self.metrics[condition][metric].value

    def merge(self, other: "EvalReport") -> "EvalReport":
        out = EvalReport(self.policy, dict(self.metrics), dict(self.n_episodes), dict(self.raw),
                         list(self.flags))
        for cond in other.metrics:
            if cond in out.metrics:
                raise ValueError(f"condition {cond!r} present in both reports")
            out.metrics[cond] = other.metrics[cond]
            out.n_episodes[cond] = other.n_episodes[cond]
            out.raw[cond] = other.raw[cond]
        out.flags.extend(other.flags)
        return out

    def summary(self) -> str:
        lines = [f"policy: {self.policy}"]
        for cond, ms in self.metrics.items():
            raw = self.raw.get(cond, {})
            lines.append(f"[{cond}] episodes={self.n_episodes[cond]} mean_reward={raw.get('mean_reward', float('nan')):.4f} "
                         f"mean_optimal={raw.get('mean_optimal', float('nan')):.4f}")
            for name, mv in ms.items():
                lines.append(f"  {name:<24} {mv.value:.4f} +/- {mv.half_width:.4f}")
        lines.extend(f"! {f}" for f in self.flags)
        return "\n".join(lines)


def _prop(x: np.ndarray) -> MetricValue:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return MetricValue(float("nan"), float("nan"))
    sd = x.std(ddof=1) if x.size > 1 else 0.0
    return MetricValue(float(x.mean()), float(Z95 * sd / np.sqrt(x.size)))


def _ratio(rewards: np.ndarray, optimal: np.ndarray) -> MetricValue:
    mo = optimal.mean()
    q = rewards.mean() / mo
    resid = rewards - q * optimal
    sd = resid.std(ddof=1) if rewards.size > 1 else 0.0
    return MetricValue(float(q), float(Z95 * sd / (abs(mo) * np.sqrt(rewards.size))))


PolicyArg = Policy | Callable[[], Policy]


def _instantiate(policy: PolicyArg) -> Policy:
    return policy if isinstance(policy, Policy) else policy()


def rollout_eval(policy: PolicyArg, dag_config: DagConfig, constraint: ConstraintSpec, n_episodes: int,
                 seed: int = 0, episode_config: EpisodeConfig | None = None,
                 condition: str | None = None, zero_noise: bool = False) -> EvalReport:
    """Run ``n_episodes`` fresh interactive episodes of one condition.

    Episode ``i`` uses the streams of :func:`episode_seed` ``(seed, i)``, so two
    policies evaluated with the same seed face the same graphs, goals and
    environment noise.
    """
    if n_episodes <= 0:
        raise ValueError("n_episodes must be positive")
    episode_config = episode_config or EpisodeConfig(magnitude=dag_config.intervention_magnitude)
    pol = _instantiate(policy)
    name = condition or constraint.kind.value
    refs: dict[str, Policy] = {"expert": ExpertPolicy(), **{k: cls() for k, cls in BASELINES.items()}}
    env = CausalDagEnv(episode_config, zero_noise=zero_noise)

    rewards = np.zeros(n_episodes)
    optimal = np.zeros(n_episodes)
    matches = {r: np.zeros(n_episodes) for r in REFERENCES}
    explore_ok = np.zeros(n_episodes)
    for i in range(n_episodes):
        dag_rng, env_rng, pol_rng = episode_streams(episode_seed(seed, i))
        dag = sample_dag(dag_config, constraint, dag_rng)
        goal = sample_goal(dag, constraint, dag_rng)
        obs = env.reset(dag, goal, env_rng)
        if obs.n != getattr(pol, "expected_n", obs.n):
            raise ValueError("policy was built for a different number of variables")
        pol.begin_episode(dag, goal, pol_rng)
        for ref in refs.values():
            ref.begin_episode(dag, goal, None)
        explored: list[int] = []
        hits = {r: 0 for r in REFERENCES}
        exploit_steps = 0
        done = False
        while not done:
            action = pol.act(obs)
            for ref_name, ref in refs.items():
                ref.observe(obs)
                if not obs.exploring:
                    hits[ref_name] += int(ref.decide(obs) == action)
            res = env.step(action)
            if res.phase is Phase.EXPLORE:
                explored.append(action // 2)
            else:
                exploit_steps += 1
                rewards[i] += res.reward
            obs, done = res.observation, res.done
        optimal[i] = optimal_episode_reward(dag, goal, episode_config)
        for r in REFERENCES:
            matches[r][i] = hits[r] / exploit_steps
        relevant = sorted(int(v) for v in np.flatnonzero(dag.relevant))
        explore_ok[i] = float(sorted(explored) == relevant)

    report = EvalReport(pol.name)
    ms = {"reward_fraction": _ratio(rewards, optimal)}
    for r in REFERENCES:
        ms[f"match_{r}"] = _prop(matches[r])
    ms["exploration_correctness"] = _prop(explore_ok)
    report.metrics[name] = ms
    report.n_episodes[name] = n_episodes
    report.raw[name] = {"mean_reward": float(rewards.mean()), "mean_optimal": float(optimal.mean())}
    if ms["reward_fraction"].value > 1.0:
        report.flags.append(f"{name}: reward fraction {ms['reward_fraction'].value:.4f} exceeds 1 (noise)")
    return report


def evaluate_conditions(policy: PolicyArg, dag_config: DagConfig, conditions: dict[str, ConstraintSpec],
                        n_episodes: int, seed: int = 0, episode_config: EpisodeConfig | None = None) -> EvalReport:
    report = None
    for name, constraint in conditions.items():
        r = rollout_eval(policy, dag_config, constraint, n_episodes, seed, episode_config, condition=name)
        report = r if report is None else report.merge(r)
    return report


def standard_conditions(d: int = 3, e: int = 4) -> dict[str, ConstraintSpec]:
    return {
        "train": ConstraintSpec(ConstraintKind.TRAIN_STANDARD, d, e),
        "eval_target": ConstraintSpec(ConstraintKind.EVAL_TARGET, d, e),
        "eval_path": ConstraintSpec(ConstraintKind.EVAL_PATH, d, e),
    }


# ---------------------------------------------------------------- comparison


@dataclass
class ComparisonTable:
    labels: list[str]
    metrics: list[str]
    values: dict[str, list[MetricValue]]  # metric -> one value per label

    def differences(self, metric: str) -> list[float]:
        """Each label's value minus the first label's."""
        vals = self.values[metric]
        return [v.value - vals[0].value for v in vals]

    def rows(self) -> list[dict]:
        out = []
        for m in self.metrics:
            row = {"metric": m}
            diffs = self.differences(m)
            for label, mv, dv in zip(self.labels, self.values[m], diffs):
                row[label] = mv.value
                row[f"{label}:ci"] = mv.half_width
                if label != self.labels[0]:
                    row[f"{label}:diff"] = dv
            out.append(row)
        return out

    def to_csv(self) -> str:
        rows = self.rows()
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def format(self) -> str:
        width = max(12, *(len(lb) for lb in self.labels))
        head = f"{'metric':<24}" + "".join(f"{lb:>{width + 2}}" for lb in self.labels)
        lines = [head]
        for m in self.metrics:
            cells = "".join(f"{mv.value:>{width + 2}.4f}" for mv in self.values[m])
            lines.append(f"{m:<24}{cells}")
            if len(self.labels) > 1:
                diffs = "".join(f"{d:>+{width + 2}.4f}" for d in self.differences(m))
                lines.append(f"{'  diff vs first':<24}{diffs}")
        return "\n".join(lines)


def compare_conditions(reports: Sequence[EvalReport]) -> ComparisonTable:
    """Align every (report, condition) column on shared metric keys."""
    columns: list[tuple[str, dict[str, MetricValue]]] = []
    for rep in reports:
        for cond, ms in rep.metrics.items():
            columns.append((f"{rep.policy}/{cond}", ms))
    if not columns:
        raise ValueError("nothing to compare")
    keys = list(columns[0][1])
    for label, ms in columns[1:]:
        if list(ms) != keys:
            raise ValueError(f"metric keys of {label!r} do not match {columns[0][0]!r}")
    labels = []
    for label, _ in columns:
        base, k = label, 2
        while label in labels:
            label = f"{base}#{k}"
            k += 1
        labels.append(label)
    return ComparisonTable(labels, keys, {m: [ms[m] for _, ms in columns] for m in keys})


# ---------------------------------------------------------------- export


def report_csv(report: EvalReport) -> str:
    if not report.metrics or not any(report.metrics.values()):
        raise ValueError("report has no metrics to export")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for cond, ms in report.metrics.items():
        for name, mv in ms.items():
            w.writerow([cond, name, f"{mv.value:.9g}", f"{mv.half_width:.9g}", report.n_episodes[cond]])
    return buf.getvalue()


def read_report_csv(path: str | Path, policy: str | None = None) -> EvalReport:
    report = EvalReport(policy or Path(path).stem)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"{path}: unexpected CSV header {reader.fieldnames}")
        for row in reader:
            cond = row["condition"]
            report.metrics.setdefault(cond, {})[row["metric"]] = MetricValue(
                float(row["value"]), float(row["ci_half_width"]))
            report.n_episodes[cond] = int(row["n_episodes"])
            report.raw.setdefault(cond, {})
    return report


def report_svg(report: EvalReport) -> str:
    """Grouped bar chart: one group per metric, one bar per condition."""
    if not report.metrics or not any(report.metrics.values()):
        raise ValueError("report has no metrics to plot")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    conds = report.conditions
    metrics = list(report.metrics[conds[0]])
    x = np.arange(len(metrics))
    width = 0.8 / len(conds)
    with matplotlib.rc_context({"svg.hashsalt": "passive-causal", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(1.2 * len(metrics) + 2, 4))
        for k, cond in enumerate(conds):
            vals = [report.metrics[cond][m].value for m in metrics]
            errs = [report.metrics[cond][m].half_width for m in metrics]
            ax.bar(x + (k - (len(conds) - 1) / 2) * width, vals, width, yerr=errs, label=cond, capsize=2)
        ax.set_xticks(x)
        ax.set_xticklabels(metrics, rotation=30, ha="right", fontsize=8)
        ax.set_ylim(0, 1.1)
        ax.set_title(report.policy)
        ax.legend(fontsize=8)
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    return buf.getvalue()


def export(report: EvalReport, path: str | Path, format: str | None = None) -> Path:
    """Write ``report`` as ``csv`` or ``svg`` (inferred from the suffix if not given)."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "csv":
        text = report_csv(report)
    elif fmt in ("svg", "svg-plot"):
        text = report_svg(report)
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    path.write_text(text, encoding="utf-8")
    return path
