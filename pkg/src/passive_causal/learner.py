"""Behavioral cloning of expert trajectories into a :class:`PolicyNet`."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from .dataset import DatasetManifest, TrajectoryRecord
from .env import Observation
from .nn import NETWORKS, Adam, AttentionPolicyNet, PolicyNet, clip_by_global_norm, global_norm, \
    net_from_arrays, numerical_gradients
from .policies import Policy

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    max_grad_norm: float = 10.0
    total_steps: int = 1000
    eval_every: int = 100
    seed: int = 0
    memory: str = "lstm"
    hidden: int = 64
    embed: int | None = None
    heads: int = 4
    layers: int = 1
    dtype: str = "float32"
    exploit_only: bool = False
    ema: float = 0.0
    weight_decay: float = 0.0
    label_smoothing: float = 0.0


    def __post_init__(self):
        for name in ("batch_size", "total_steps", "eval_every", "hidden", "heads", "layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.memory not in NETWORKS:
            raise ValueError(f"memory must be one of {sorted(NETWORKS)}")
        if self.lr <= 0 or self.max_grad_norm <= 0:
            raise ValueError("lr and max_grad_norm must be positive")
        if self.weight_decay < 0 or not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("weight_decay must be >= 0 and label_smoothing in [0, 1)")
        if not 0.0 <= self.ema < 1.0:
            raise ValueError("ema decay must lie in [0, 1)")


def encode_features(obs: np.ndarray, n: int, magnitude: float) -> np.ndarray:
    """Scale the four value blocks of raw observation vectors by ``1/magnitude``;
    cue blocks pass through unchanged. Works on any leading shape."""
    out = np.array(obs, dtype=np.float64, copy=True)
    out[..., :4 * n] /= magnitude
    return out


@dataclass
class Checkpoint:
    net: PolicyNet
    step: int
    train_config: TrainConfig
    manifest_hash: str
    n: int
    magnitude: float
    adaptive: bool
    adam_t: int = 0
    adam_state: dict = dataclasses.field(default_factory=dict)
    # with weight averaging, ``net`` holds the averaged weights used for acting
    # and ``raw_params`` the optimiser's current iterate
    raw_params: dict | None = None

    def save(self, path: str | Path) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "hyper": self.net.hyper(),
            "step": self.step,
            "train_config": dataclasses.asdict(self.train_config),
            "manifest_hash": self.manifest_hash,
            "n": self.n,
            "magnitude": self.magnitude,
            "adaptive": self.adaptive,
            "adam_t": self.adam_t,
        }
        arrays = {f"param/{k}": v for k, v in self.net.params.items()}
        arrays.update(self.adam_state)
        if self.raw_params is not None:
            arrays.update({f"raw/{k}": v for k, v in self.raw_params.items()})
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
            params = {k.split("/", 1)[1]: z[k] for k in z.files if k.startswith("param/")}
            adam = {k: z[k] for k in z.files if k.startswith("adam_")}
            raw = {k.split("/", 1)[1]: z[k] for k in z.files if k.startswith("raw/")} or None
        net = net_from_arrays(meta["hyper"], params)
        return cls(net, meta["step"], TrainConfig(**meta["train_config"]), meta["manifest_hash"],
                   meta["n"], meta["magnitude"], meta["adaptive"], meta["adam_t"], adam, raw)


def build_net(config: TrainConfig, input_dim: int, num_actions: int, horizon: int):
    if config.memory == "attention":
        return AttentionPolicyNet(input_dim, num_actions, hidden=config.hidden, heads=config.heads,
                                  layers=config.layers, seed=config.seed, dtype=np.dtype(config.dtype),
                                  horizon=horizon)
    return PolicyNet(input_dim, num_actions, hidden=config.hidden, embed=config.embed, seed=config.seed,
                     dtype=np.dtype(config.dtype), horizon=horizon)


def _batches(records: Iterable[TrajectoryRecord], batch_size: int) -> Iterator[list[TrajectoryRecord]]:
    batch = []
    for rec in records:
        batch.append(rec)
        if len(batch) == batch_size:
            yield batch
            batch = []


def stack_batch(batch: list[TrajectoryRecord], n: int, magnitude: float, exploit_only: bool = False):
    x = encode_features(np.stack([r.observations for r in batch]), n, magnitude)
    y = np.stack([r.actions for r in batch])
    if exploit_only:
        # exploit steps are those whose observation carries the goal cue
        mask = x[:, :, 4 * n:5 * n].any(axis=-1).astype(float)
    else:
        mask = np.ones(y.shape)
    return x, y, mask


def train(records: Iterable[TrajectoryRecord], manifest: DatasetManifest, config: TrainConfig,
          resume: Checkpoint | None = None, metrics_path: str | Path | None = None,
          evaluate: Callable[[Checkpoint], dict] | None = None) -> tuple[Checkpoint, list[dict]]:
    """Minimise the expert actions' negative log-likelihood.

    ``records`` is consumed in order, one batch of ``batch_size`` episodes per
    update, until ``total_steps`` updates have run or the data runs out.
    ``evaluate`` (optional) is called every ``eval_every`` steps and its
    metrics join the log row.

    Raises:
        NumericError: on a non-finite loss or gradient.
        ValueError: if record shapes disagree with the manifest or checkpoint.
    """
    n, magnitude = manifest.dag.n, manifest.dag.intervention_magnitude
    length = manifest.episode_length
    if resume is not None:
        ckpt = resume
        if ckpt.net.input_dim != manifest.obs_width or ckpt.n != n:
            raise ValueError("checkpoint shape does not match the dataset manifest")
        ckpt.train_config = config
    else:
        net = build_net(config, manifest.obs_width, 2 * n, max(length, 1))
        ckpt = Checkpoint(net, 0, config, manifest.digest(), n, magnitude, manifest.adaptive)
    # ``net`` is the optimiser's iterate; ``ckpt.net`` is what gets evaluated
    # (the same object unless weight averaging is on)
    if config.ema > 0:
        net = ckpt.net.copy()
        if ckpt.raw_params is not None:
            for k, v in ckpt.raw_params.items():
                net.params[k] = np.array(v, dtype=net.dtype)
    else:
        net = ckpt.net
    if net.horizon < length:
        raise ValueError(f"memory horizon {net.horizon} shorter than episode length {length}")
    opt = Adam(config.lr, config.beta1, config.beta2, weight_decay=config.weight_decay)
    if ckpt.adam_state:
        opt.load_state(ckpt.adam_t, ckpt.adam_state)

    rows: list[dict] = []
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "a" if resume is not None else "w", newline="", encoding="utf-8")
    running, count = 0.0, 0
    started = time.perf_counter()
    try:
        for batch in _batches(records, config.batch_size):
            if ckpt.step >= config.total_steps:
                break
            x, y, mask = stack_batch(batch, n, magnitude, config.exploit_only)
            if x.shape[1:] != (length, net.input_dim):
                raise ValueError(f"batch shape {x.shape[1:]} does not match (length={length}, "
                                 f"width={net.input_dim})")
            loss, grads = net.loss_and_grads(x, y, mask, config.label_smoothing)
            if not np.isfinite(loss) or not np.isfinite(global_norm(grads)):
                raise NumericError(f"non-finite loss/gradient at step {ckpt.step} (loss={loss})")
            grads, _ = clip_by_global_norm(grads, config.max_grad_norm)
            opt.update(net.params, grads)
            if config.ema > 0:
                # bias-corrected decay so early averages are not dominated by the init
                decay = min(config.ema, (1.0 + ckpt.step) / (10.0 + ckpt.step))
                for k, v in ckpt.net.params.items():
                    v *= decay
                    v += (1.0 - decay) * net.params[k]
            ckpt.step += 1
            running += loss
            count += 1
            if ckpt.step % config.eval_every == 0 or ckpt.step == config.total_steps:
                row = {"step": ckpt.step, "loss": running / count}
                running, count = 0.0, 0
                if evaluate is not None:
                    row.update(evaluate(ckpt))
                rows.append(row)
                log.info("step %d loss %.4f (%.1fs)", ckpt.step, row["loss"], time.perf_counter() - started)
                if fh is not None:
                    if writer is None:
                        writer = csv.DictWriter(fh, fieldnames=list(row))
                        if resume is None or fh.tell() == 0:
                            writer.writeheader()
                    writer.writerow({k: _fmt(v) for k, v in row.items()})
                    fh.flush()
    finally:
        if fh is not None:
            fh.close()
    ckpt.adam_t = opt.t
    ckpt.adam_state = opt.state_arrays()
    ckpt.raw_params = {k: v.copy() for k, v in net.params.items()} if config.ema > 0 else None
    return ckpt, rows


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


# ---------------------------------------------------------------- acting


def act(checkpoint: Checkpoint | PolicyNet, observations: np.ndarray, n: int | None = None,
        magnitude: float | None = None) -> int:
    """Greedy action after the raw observation sequence ``(T, width)``."""
    if isinstance(checkpoint, Checkpoint):
        net, n, magnitude = checkpoint.net, checkpoint.n, checkpoint.magnitude
    else:
        net = checkpoint
    obs = np.asarray(observations, dtype=float)
    if obs.ndim == 1:
        obs = obs[None]
    if obs.shape[0] > net.horizon:
        raise ValueError(f"sequence of {obs.shape[0]} steps exceeds memory horizon {net.horizon}")
    x = obs if n is None else encode_features(obs, n, magnitude)
    logits = net.forward(x[None])[0, -1]
    return int(np.argmax(logits))


class LearnedPolicy(Policy):
    """Runs a checkpoint step by step, carrying the recurrent state."""

    name = "learned"

    def __init__(self, checkpoint: Checkpoint):
        self.ckpt = checkpoint

    def begin_episode(self, dag=None, goal=None, rng=None):
        super().begin_episode(dag, goal, rng)
        self._state = self.ckpt.net.initial_state(1)
        self._t = 0

    def act(self, obs: Observation) -> int:
        self.observe(obs)
        if self._t >= self.ckpt.net.horizon:
            raise ValueError("episode longer than the policy's memory horizon")
        x = encode_features(obs.as_vector(), self.ckpt.n, self.ckpt.magnitude)[None]
        logits, self._state = self.ckpt.net.step(x, self._state)
        self._t += 1
        if obs.exploring:
            self._explore_acts += 1
        return int(np.argmax(logits[0]))


# ---------------------------------------------------------------- gradient check


@dataclass
class GradientReport:
    max_rel_error: float
    per_param: dict
    n_params: int
    finite: bool

    def passed(self, tol: float) -> bool:
        return self.finite and self.max_rel_error < tol


def gradient_check(net: PolicyNet, batch, tolerance: float = 1e-4, h: float = 1e-5) -> GradientReport:
    """Compare analytic gradients with central finite differences.

    Relative error per parameter tensor is ``max|a - f| / max(max|a|, max|f|, 1e-8)``.
    The default step sits near the float64 optimum for central differences
    (about eps**(1/3)); much smaller steps let roundoff dominate tensors whose
    gradients are tiny.
    """
    if net.n_params > 5000:
        raise ValueError(f"gradient check limited to <= 5000 parameters, got {net.n_params}")
    if net.dtype != np.float64:
        net = net_from_arrays({**net.hyper(), "dtype": "float64"}, net.params)
    x, y, mask = batch
    _, analytic = net.loss_and_grads(x, y, mask)
    numeric = numerical_gradients(net, x, y, mask, h)
    per = {}
    finite = True
    for k in analytic:
        a, f = analytic[k], numeric[k]
        finite &= bool(np.all(np.isfinite(a)))
        scale = max(np.max(np.abs(a)), np.max(np.abs(f)), 1e-8)
        per[k] = float(np.max(np.abs(a - f)) / scale)
    worst = max(per.values())
    report = GradientReport(worst, per, net.n_params, finite)
    if not report.passed(tolerance):
        log.warning("gradient check failed: max relative error %.3g", worst)
    return report
