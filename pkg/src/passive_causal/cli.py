"""Command-line entry point: ``passive-causal {gen,train,eval,ooo,analyze}``.

Every command reads an INI file (``--config``), applies ``--set
section.key=value`` overrides, validates every key against a typed schema and
writes the fully resolved configuration to ``<output>/resolved.ini`` before
doing any work. Re-running a command with that file reproduces its outputs.
"""

from __future__ import annotations

import argparse
import configparser
import io
import itertools
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterator

import numpy as np

from .dataset import DatasetError, DatasetManifest, generate_dataset, heldout_masks, iter_records, \
    load_manifest, read_dataset, write_manifest
from .env import EpisodeConfig
from .evaluation import compare_conditions, evaluate_conditions, export, read_report_csv, standard_conditions
from .learner import Checkpoint, LearnedPolicy, NumericError, TrainConfig, train
from .ooo_text import DIMENSIONS, VARIANTS, HttpScorer, OracleScorer, TransportError, evaluate_variant
from .policies import BUILTIN, make_policy
from .scm import ConstraintError, ConstraintKind, ConstraintSpec, DagConfig

log = logging.getLogger("passive_causal")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_TRANSPORT = 0, 2, 3, 4, 5


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- typed schema


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def inner(text: str):
        return None if text.strip().lower() in ("", "none") else parse(text)
    return inner


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "run": {
        "seed": (int, 0),
        "output": (str, "runs/default"),
        "jobs": (int, 1),
    },
    "dag": {
        "n": (int, 5),
        "num_relevant": (_optional(int), None),
        "nonlinear": (_bool, True),
        "leak": (float, 0.2),
        "weight_low": (float, -2.0),
        "weight_high": (float, 2.0),
        "noise_mean": (float, 0.5),
        "noise_std": (float, 0.25),
        "intervention_magnitude": (float, 4.0),
    },
    "episode": {
        "exploration_steps": (_optional(int), None),
        "exploitation_steps": (int, 1),
    },
    "constraint": {
        "kind": (str, "TrainStandard"),
        "test_intervention_node": (int, 3),
        "test_goal_node": (int, 4),
        "heldout_fraction": (float, 0.2),
        "heldout_seed": (int, 0),
    },
    "gen": {
        "episodes": (int, 1000),
    },
    "train": {
        "dataset": (str, "stream"),
        "resume": (_optional(str), None),
        "batch_size": (int, 32),
        "lr": (float, 1e-3),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "max_grad_norm": (float, 10.0),
        "total_steps": (int, 1000),
        "eval_every": (int, 100),
        "eval_episodes": (int, 0),
        "memory": (str, "attention"),
        "hidden": (int, 512),
        "heads": (int, 8),
        "layers": (int, 1),
        "dtype": (str, "float32"),
        "exploit_only": (_bool, False),
        "ema": (float, 0.0),
        "weight_decay": (float, 0.0),
        "label_smoothing": (float, 0.1),
    },
    "eval": {
        "policies": (_names, ["expert", "value", "change", "total_corr", "partial_corr"]),
        "checkpoint": (_optional(str), None),
        "conditions": (_names, ["train", "eval_target", "eval_path"]),
        "episodes": (int, 1000),
        "plot": (_bool, True),
    },
    "ooo": {
        "scorer": (str, "http"),
        "variants": (_names, list(VARIANTS)),
        "heldout": (_names, list(DIMENSIONS)),
        "episodes": (int, 100),
        "candidates": (int, 10),
        "validation": (int, 20),
        "shots": (int, 4),
        "expert_mode": (str, "fixed"),
        "timeout": (float, 60.0),
        "retries": (int, 3),
        "max_in_flight": (int, 4),
    },
    "analyze": {
        "inputs": (_names, []),
    },
}

CONDITIONS = ("train", "eval_target", "eval_path", "adaptive_train", "adaptive_eval")


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]]

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section, keys in self.values.items():
            cp[section] = {k: _fmt(v) for k, v in keys.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @property
    def output(self) -> Path:
        return Path(self.values["run"]["output"])


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    """Parse ``path`` (optional) plus ``section.key=value`` overrides.

    Raises:
        ConfigError: unknown section/key or a value that fails to parse.
    """
    cp = configparser.ConfigParser(interpolation=None)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        if not cp.has_section(section):
            cp.add_section(section)
        cp[section][name] = value
    values = {s: {k: default for k, (_, default) in keys.items()} for s, keys in SCHEMA.items()}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for name, text in cp[section].items():
            if name not in SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{name}")
            parse = SCHEMA[section][name][0]
            try:
                values[section][name] = parse(text)
            except ValueError as exc:
                raise ConfigError(f"{section}.{name}: {exc}") from exc
    return RunConfig(values)


# ---------------------------------------------------------------- builders


def dag_config(cfg: RunConfig) -> DagConfig:
    try:
        return DagConfig(**cfg["dag"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[dag]: {exc}") from exc


def episode_config(cfg: RunConfig) -> EpisodeConfig:
    try:
        return EpisodeConfig(magnitude=cfg["dag"]["intervention_magnitude"], **cfg["episode"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[episode]: {exc}") from exc


def _heldout(cfg: RunConfig) -> frozenset[int]:
    dag = dag_config(cfg)
    c = cfg["constraint"]
    if dag.num_relevant is None or dag.num_relevant >= dag.n:
        return frozenset()
    return heldout_masks(dag.n, dag.num_relevant, c["heldout_fraction"], c["heldout_seed"])


def constraint_spec(cfg: RunConfig, kind: str | None = None) -> ConstraintSpec:
    c = cfg["constraint"]
    kind = kind or c["kind"]
    try:
        kind = ConstraintKind(kind)
    except ValueError:
        raise ConfigError(f"constraint.kind: unknown constraint {kind!r}; "
                          f"choose from {[k.value for k in ConstraintKind]}") from None
    spec = ConstraintSpec(kind, c["test_intervention_node"], c["test_goal_node"],
                          _heldout(cfg) if kind.is_adaptive else frozenset())
    try:
        spec.validate_for(cfg["dag"]["n"])
    except ValueError as exc:
        raise ConfigError(f"[constraint]: {exc}") from exc
    return spec


def manifest_for(cfg: RunConfig, episode_count: int | None) -> DatasetManifest:
    try:
        return DatasetManifest(dag_config(cfg), episode_config(cfg), constraint_spec(cfg),
                               cfg["run"]["seed"], episode_count)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def conditions_for(cfg: RunConfig) -> dict[str, ConstraintSpec]:
    c = cfg["constraint"]
    std = standard_conditions(c["test_intervention_node"], c["test_goal_node"])
    out = {}
    for name in cfg["eval"]["conditions"]:
        if name in std:
            out[name] = std[name]
        elif name == "adaptive_train":
            out[name] = constraint_spec(cfg, ConstraintKind.ADAPTIVE_TRAIN.value)
        elif name == "adaptive_eval":
            out[name] = constraint_spec(cfg, ConstraintKind.ADAPTIVE_EVAL.value)
        else:
            raise ConfigError(f"eval.conditions: unknown condition {name!r}; choose from {CONDITIONS}")
    return out


def train_config(cfg: RunConfig) -> TrainConfig:
    t = dict(cfg["train"])
    for key in ("dataset", "resume", "eval_episodes"):
        t.pop(key)
    try:
        return TrainConfig(seed=cfg["run"]["seed"], **t)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[train]: {exc}") from exc


def _prepare(cfg: RunConfig) -> Path:
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.ini").write_text(cfg.to_ini(), encoding="utf-8")
    return out


# ---------------------------------------------------------------- commands


def cmd_gen(cfg: RunConfig) -> dict:
    manifest = manifest_for(cfg, cfg["gen"]["episodes"])
    out = _prepare(cfg)
    write_manifest(manifest, out / "manifest.json")
    summary = generate_dataset(manifest, out / "dataset.jsonl", jobs=cfg["run"]["jobs"])
    log.info("wrote %d episodes (%d steps) to %s", summary["episodes"], summary["steps"], out)
    return summary


def _policy_factories(cfg: RunConfig) -> dict[str, Callable]:
    factories: dict[str, Callable] = {}
    for name in cfg["eval"]["policies"]:
        if name == "learned":
            continue
        if name not in BUILTIN:
            raise ConfigError(f"eval.policies: unknown policy {name!r}; choose from "
                              f"{sorted(BUILTIN) + ['learned']}")
        factories[name] = (lambda nm: (lambda: make_policy(nm)))(name)
    ckpt_path = cfg["eval"]["checkpoint"]
    if "learned" in cfg["eval"]["policies"] or ckpt_path is not None:
        if ckpt_path is None:
            raise ConfigError("eval.policies lists 'learned' but eval.checkpoint is unset")
        try:
            ckpt = Checkpoint.load(ckpt_path)
        except (OSError, ValueError, KeyError) as exc:
            raise DatasetError(f"cannot load checkpoint {ckpt_path}: {exc}") from exc
        factories["learned"] = lambda: LearnedPolicy(ckpt)
    return factories


def cmd_eval(cfg: RunConfig) -> dict:
    dag = dag_config(cfg)
    epi = episode_config(cfg)
    conds = conditions_for(cfg)
    factories = _policy_factories(cfg)
    out = _prepare(cfg)
    reports = {}
    for name, factory in factories.items():
        report = evaluate_conditions(factory, dag, conds, cfg["eval"]["episodes"], cfg["run"]["seed"], epi)
        export(report, out / f"eval_{name}.csv")
        if cfg["eval"]["plot"]:
            export(report, out / f"eval_{name}.svg")
        log.info("%s", report.summary())
        reports[name] = report
    return reports


def _epochs(path: str) -> Iterator:
    """Records of a dataset file, re-read from the top once exhausted."""
    while True:
        empty = True
        for rec in read_dataset(path):
            empty = False
            yield rec
        if empty:
            raise DatasetError(f"dataset {path} holds no episodes")


def cmd_train(cfg: RunConfig) -> Checkpoint:
    tc = train_config(cfg)
    source = cfg["train"]["dataset"]
    if source == "stream":
        manifest = manifest_for(cfg, None)
        records = iter_records(manifest)
    else:
        try:
            manifest = load_manifest(source)
        except OSError as exc:
            raise DatasetError(f"cannot open dataset {source}: {exc}") from exc
        records = _epochs(source)
    resume = None
    if cfg["train"]["resume"] is not None:
        try:
            resume = Checkpoint.load(cfg["train"]["resume"])
        except (OSError, ValueError, KeyError) as exc:
            raise DatasetError(f"cannot load checkpoint {cfg['train']['resume']}: {exc}") from exc
        if resume.manifest_hash != manifest.digest():
            log.warning("resuming from a checkpoint trained on a different manifest")
        # a streamed dataset continues where the checkpoint stopped
        skip = resume.step * tc.batch_size
        if source == "stream":
            records = iter_records(manifest, start=skip)
        else:
            records = itertools.islice(records, skip, None)
    out = _prepare(cfg)
    evaluate = None
    if cfg["train"]["eval_episodes"] > 0:
        conds = conditions_for(cfg)
        dag, epi = manifest.dag, manifest.episode

        def evaluate(ckpt):
            rep = evaluate_conditions(lambda: LearnedPolicy(ckpt), dag, conds, cfg["train"]["eval_episodes"],
                                      cfg["run"]["seed"] + 1, epi)
            return {f"{c}/{m}": mv.value for c, ms in rep.metrics.items() for m, mv in ms.items()}

    ckpt, rows = train(records, manifest, tc, resume=resume, metrics_path=out / "metrics.csv",
                       evaluate=evaluate)
    ckpt.save(out / "checkpoint.npz")
    log.info("trained to step %d; checkpoint at %s", ckpt.step, out / "checkpoint.npz")
    return ckpt


def cmd_ooo(cfg: RunConfig, oracle: bool = False) -> list[dict]:
    o = cfg["ooo"]
    if oracle:
        o["scorer"] = "oracle"
    for v in o["variants"]:
        if v not in VARIANTS:
            raise ConfigError(f"ooo.variants: unknown variant {v!r}; choose from {list(VARIANTS)}")
    for d in o["heldout"]:
        if d not in DIMENSIONS:
            raise ConfigError(f"ooo.heldout: unknown dimension {d!r}")
    if o["expert_mode"] not in ("fixed", "varied"):
        raise ConfigError("ooo.expert_mode must be fixed or varied")
    out = _prepare(cfg)
    if o["scorer"] == "oracle":
        scorer = OracleScorer()
    elif o["scorer"] == "http":
        try:
            scorer = HttpScorer(timeout=o["timeout"], retries=o["retries"], max_in_flight=o["max_in_flight"],
                                log_path=out / "scorer_log.jsonl")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        raise ConfigError(f"ooo.scorer must be oracle or http, not {o['scorer']!r}")
    rng = np.random.default_rng(cfg["run"]["seed"])
    rows = []
    with open(out / "transcripts.jsonl", "w", encoding="utf-8") as fh:
        for variant in o["variants"]:
            report = evaluate_variant(variant, scorer, o["episodes"], rng, o["heldout"], o["candidates"],
                                      o["validation"], o["shots"], o["expert_mode"])
            rows.extend(report.rows())
            for r in report.results:
                fh.write(json.dumps({"variant": variant, "correct_dimension": r.correct_dimension,
                                     "final_reward": r.final_reward, "transcript": r.transcript},
                                    sort_keys=True) + "\n")
    _write_rows(out / "ooo_results.csv", rows)
    for row in rows:
        log.info("%s %s = %.3f (n=%d)", row["condition"], row["metric"], row["value"], row["n_episodes"])
    return rows


def _write_rows(path: Path, rows: list[dict]) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("condition", "metric", "value", "ci_half_width", "n_episodes"))
        for r in rows:
            w.writerow([r["condition"], r["metric"], f"{r['value']:.9g}", f"{r['ci_half_width']:.9g}",
                        r["n_episodes"]])


def cmd_analyze(cfg: RunConfig) -> str:
    inputs = cfg["analyze"]["inputs"]
    if not inputs:
        raise ConfigError("analyze.inputs lists no report CSVs")
    reports = []
    for path in inputs:
        try:
            reports.append(read_report_csv(path))
        except (OSError, ValueError, KeyError) as exc:
            raise DatasetError(f"cannot read report {path}: {exc}") from exc
    table = compare_conditions(reports)
    out = _prepare(cfg)
    (out / "comparison.csv").write_text(table.to_csv(), encoding="utf-8")
    text = table.format()
    print(text)
    return text


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="passive-causal", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("gen", "generate an expert dataset"), ("train", "behavioral cloning"),
                            ("eval", "interactive evaluation"), ("ooo", "text odd-one-out evaluation"),
                            ("analyze", "compare report CSVs")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", help="INI config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("-o", "--output", help="output directory (overrides run.output)")
        p.add_argument("--jobs", type=int, help="worker processes (overrides run.jobs)")
        p.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
        if name == "ooo":
            p.add_argument("--oracle", action="store_true", help="use the rule-based scorer")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = list(args.overrides)
    if args.output is not None:
        overrides.append(f"run.output={args.output}")
    if args.jobs is not None:
        overrides.append(f"run.jobs={args.jobs}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "gen":
            cmd_gen(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg)
        elif args.command == "ooo":
            cmd_ooo(cfg, oracle=args.oracle)
        else:
            cmd_analyze(cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DatasetError, ConstraintError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("numeric error: %s", exc)
        return EXIT_NUMERIC
    except TransportError as exc:
        log.error("transport error: %s", exc)
        return EXIT_TRANSPORT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
