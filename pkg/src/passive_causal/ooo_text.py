"""Text version of the odd-one-out intervention game.

An episode has three experiment trials and one final trial, each showing three
objects labelled A/B/C. In an experiment trial all three objects start
identical; the player transforms one object along one dimension (which makes
it unique along that dimension) and then chooses it. The choice is rewarded iff
the transformed dimension is the episode's hidden "correct" dimension. In the
final trial each object is unique along exactly one dimension and the player
must pick the one unique along the correct dimension.

Transcripts are rendered with a fixed template, can be parsed back, and are
used as few-shot prompts for a continuation :class:`Scorer`.
"""

from __future__ import annotations

import dataclasses
import json
import os
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

DIMENSIONS = ("color", "shape", "texture")
LETTERS = ("A", "B", "C")

VOCABULARY = {
    "color": ("white", "black", "red", "purple", "green", "pink", "blue", "yellow", "orange", "brown"),
    "shape": ("square", "ellipse", "pentagon", "trapezoid", "triangle", "hexagon", "star", "cross"),
    "texture": ("striped", "solid", "dotted", "checkered", "spotted", "wavy"),
}

NEW_GAME = "New game:"
SEPARATOR = "=" * 40
INSTRUCTION = ('In this game, I must choose an object that is unique along the "correct" dimension. '
               "Before choosing an option, I can sometimes transform one of the objects to make it "
               "unique along some dimension, not necessarily the correct one:")
REASONING_PREFIX = "Reasoning: Let's think step by step."
EXPERIMENT_TRIALS = 3


class TransportError(RuntimeError):
    """A remote scorer kept failing after its retry budget."""


@dataclass(frozen=True)
class OooObject:
    color: str
    shape: str
    texture: str

    def __post_init__(self):
        for dim in DIMENSIONS:
            if getattr(self, dim) not in VOCABULARY[dim]:
                raise ValueError(f"{getattr(self, dim)!r} is not a {dim}")

    def get(self, dim: str) -> str:
        return getattr(self, _check_dim(dim))

    def with_(self, dim: str, value: str) -> "OooObject":
        return dataclasses.replace(self, **{_check_dim(dim): value})

    def describe(self) -> str:
        return f"{self.color} {self.shape} {self.texture}"


def _check_dim(dim: str) -> str:
    if dim not in DIMENSIONS:
        raise ValueError(f"unknown dimension {dim!r}; expected one of {DIMENSIONS}")
    return dim


def is_unique(objects: Sequence[OooObject], index: int, dim: str) -> bool:
    """True iff no other object shares ``objects[index]``'s value on ``dim``."""
    value = objects[index].get(dim)
    return all(o.get(dim) != value for j, o in enumerate(objects) if j != index)


def transform_attribute(objects: Sequence[OooObject], dim: str, rng: np.random.Generator) -> str:
    """A ``dim`` token not held by any of ``objects``."""
    taken = {o.get(_check_dim(dim)) for o in objects}
    options = [v for v in VOCABULARY[dim] if v not in taken]
    if not options:
        raise ValueError(f"vocabulary for {dim} exhausted")
    return options[int(rng.integers(len(options)))]


def _random_object(rng: np.random.Generator) -> OooObject:
    return OooObject(*(VOCABULARY[d][int(rng.integers(len(VOCABULARY[d])))] for d in DIMENSIONS))


# ---------------------------------------------------------------- episodes


@dataclass(frozen=True)
class Trial:
    objects: tuple[OooObject, ...]
    choice: int | None = None            # index of the chosen (and, in experiments, transformed) object
    dimension: str | None = None         # transformed dimension; None on the final trial
    new_value: str | None = None
    rewarded: bool | None = None
    explanation: str | None = None
    reasoning: str | None = None

    @property
    def is_final(self) -> bool:
        return self.dimension is None


@dataclass(frozen=True)
class OooEpisode:
    """An episode skeleton, or a played episode once every trial has a choice.

    ``transforms[t][dim]`` is the token trial ``t`` reveals if ``dim`` is
    transformed; drawing these up front lets different players face the same
    environment randomness. ``targets`` are the expert's object choices.
    """

    correct_dimension: str
    bases: tuple[OooObject, ...]
    transforms: tuple[dict, ...]
    targets: tuple[int, ...]
    final_objects: tuple[OooObject, ...]
    trials: tuple[Trial, ...] = ()

    @property
    def complete(self) -> bool:
        return len(self.trials) == EXPERIMENT_TRIALS + 1

    @property
    def final_answer(self) -> int:
        return next(i for i in range(3) if is_unique(self.final_objects, i, self.correct_dimension))


@dataclass(frozen=True)
class HoldoutConfig:
    """``dimensions`` that training episodes may use; ``heldout`` is reserved
    for evaluation (``None`` disables the hold-out)."""

    heldout: str | None = None

    def __post_init__(self):
        if self.heldout is not None:
            _check_dim(self.heldout)

    @property
    def train_dimensions(self) -> tuple[str, ...]:
        return tuple(d for d in DIMENSIONS if d != self.heldout)

    @property
    def eval_dimensions(self) -> tuple[str, ...]:
        return DIMENSIONS if self.heldout is None else (self.heldout,)


def sample_episode(dimensions: Sequence[str], rng: np.random.Generator) -> OooEpisode:
    """Draw a skeleton whose correct dimension is uniform over ``dimensions``."""
    dimensions = tuple(dimensions)
    if not dimensions or any(d not in DIMENSIONS for d in dimensions):
        raise ValueError(f"invalid dimension set {dimensions!r}")
    correct = dimensions[int(rng.integers(len(dimensions)))]
    bases, transforms, targets = [], [], []
    for _ in range(EXPERIMENT_TRIALS):
        base = _random_object(rng)
        bases.append(base)
        transforms.append({d: transform_attribute([base], d, rng) for d in DIMENSIONS})
        targets.append(int(rng.integers(3)))
    centre = _random_object(rng)
    final = [centre.with_(d, transform_attribute([centre], d, rng)) for d in DIMENSIONS]
    order = rng.permutation(3)
    return OooEpisode(correct, tuple(bases), tuple(transforms), tuple(targets),
                      tuple(final[i] for i in order))


def experiment_explanation(dim: str, rewarded: bool) -> str:
    if rewarded:
        return f"In this game, I am rewarded for unique {dim}."
    return f"The rewarding dimension must not be {dim}."


def final_explanation(dim: str) -> str:
    return f"I was rewarded for unique {dim} in this game."


def reasoning_text(objects: Sequence[OooObject], dim: str) -> str:
    idx = next(i for i in range(3) if is_unique(objects, i, dim))
    others = [i for i in range(3) if i != idx]
    return (f"In this game, I am rewarded for unique {dim}. Object {LETTERS[idx]} is the only "
            f"{objects[idx].get(dim)} object, because {LETTERS[others[0]]} and {LETTERS[others[1]]} "
            f"are {objects[others[0]].get(dim)}, so {LETTERS[idx]} has a unique {dim}. "
            f"I will be rewarded for choosing object {LETTERS[idx]}.")


def play_experiment(episode: OooEpisode, t: int, choice: int, dim: str) -> Trial:
    """Transform object ``choice`` of trial ``t`` along ``dim`` and choose it."""
    base = episode.bases[t]
    objects = [base] * 3
    new_value = episode.transforms[t][_check_dim(dim)]
    objects[choice] = base.with_(dim, new_value)
    rewarded = is_unique(objects, choice, episode.correct_dimension)
    return Trial((base,) * 3, choice, dim, new_value, rewarded)


def expert_script(episode: OooEpisode, expert_mode: str = "fixed") -> OooEpisode:
    """Play ``episode`` as the expert.

    ``fixed`` probes color, shape and texture in order whatever the outcomes;
    ``varied`` stops probing once a probe is rewarded and repeats that
    dimension on the remaining trials.
    """
    if expert_mode not in ("fixed", "varied"):
        raise ValueError(f"unknown expert mode {expert_mode!r}")
    trials = []
    found = None
    for t in range(EXPERIMENT_TRIALS):
        dim = found if (expert_mode == "varied" and found is not None) else DIMENSIONS[t]
        trial = play_experiment(episode, t, episode.targets[t], dim)
        trials.append(dataclasses.replace(trial, explanation=experiment_explanation(dim, trial.rewarded)))
        if trial.rewarded:
            found = dim
    dim = episode.correct_dimension
    answer = episode.final_answer
    trials.append(Trial(episode.final_objects, answer, None, None, True, final_explanation(dim),
                        reasoning_text(episode.final_objects, dim)))
    return dataclasses.replace(episode, trials=tuple(trials))


# ---------------------------------------------------------------- rendering


@dataclass(frozen=True)
class Variant:
    with_explanations: bool = True
    with_reasoning: bool = True
    with_instruction: bool = False


VARIANTS = {
    "full": Variant(True, True, False),
    "none": Variant(False, False, False),
    "explanations": Variant(True, False, False),
    "reasoning": Variant(False, True, False),
    "instruction": Variant(False, False, True),
}


def objects_block(objects: Sequence[OooObject]) -> str:
    lines = ["There is a set of three objects in front of me:"]
    lines += [f"{LETTERS[i]}) {o.describe()}" for i, o in enumerate(objects)]
    return "\n".join(lines) + "\n\n"


def episode_header(variant: Variant) -> str:
    text = NEW_GAME + "\n\n"
    if variant.with_instruction:
        text += INSTRUCTION + "\n\n"
    return text


def _outcome(choice: int, rewarded: bool) -> str:
    verdict = "was rewarded!" if rewarded else "was not rewarded."
    return f"Choosing object {LETTERS[choice]} {verdict}\n"


def render(episode: OooEpisode, variant: Variant = VARIANTS["full"]) -> str:
    """Transcript of a played episode; ends with a newline."""
    if not episode.complete:
        raise ValueError("only a fully played episode can be rendered")
    out = [episode_header(variant)]
    for k, trial in enumerate(episode.trials):
        if k:
            out.append("\n")
        out.append(objects_block(trial.objects))
        if trial.is_final:
            if variant.with_reasoning and trial.reasoning is not None:
                out.append(f"{REASONING_PREFIX} {trial.reasoning}\n")
            out.append(f"I choose object {LETTERS[trial.choice]}\n")
        else:
            out.append(f"I transform object {LETTERS[trial.choice]} into a different "
                       f"{trial.dimension}: {trial.new_value}.\n")
        out.append(_outcome(trial.choice, trial.rewarded))
        if variant.with_explanations and trial.explanation is not None:
            out.append(f"Explanation: {trial.explanation}\n")
    return "".join(out)


def visible_trials(episode: OooEpisode, variant: Variant) -> tuple[Trial, ...]:
    """The trials as a transcript rendered with ``variant`` shows them."""
    return tuple(dataclasses.replace(
        t,
        explanation=t.explanation if variant.with_explanations else None,
        reasoning=t.reasoning if (variant.with_reasoning and t.is_final) else None,
    ) for t in episode.trials)


def join_episodes(texts: Sequence[str]) -> str:
    return "".join(t + SEPARATOR + "\n" for t in texts)


# ---------------------------------------------------------------- parsing

_OBJ = re.compile(r"^([ABC])\) (\S+) (\S+) (\S+)$")
_TRANSFORM = re.compile(r"^I transform object ([ABC]) into a different (color|shape|texture): (\S+)\.$")
_CHOOSE = re.compile(r"^I choose object ([ABC])$")
_OUTCOME = re.compile(r"^Choosing object ([ABC]) was (rewarded!|not rewarded\.)$")


@dataclass
class ParsedTrial:
    objects: list[OooObject]
    choice: int | None = None
    dimension: str | None = None
    new_value: str | None = None
    rewarded: bool | None = None
    explanation: str | None = None
    reasoning: str | None = None


def parse_trials(text: str) -> list[ParsedTrial]:
    """Trials of one transcript (possibly cut off mid-trial)."""
    trials: list[ParsedTrial] = []
    objs: list[OooObject] = []
    for line in text.split("\n"):
        if m := _OBJ.match(line):
            objs.append(OooObject(m[2], m[3], m[4]))
            if len(objs) == 3:
                trials.append(ParsedTrial(objs))
                objs = []
        elif not trials:
            continue
        elif m := _TRANSFORM.match(line):
            cur = trials[-1]
            cur.choice, cur.dimension, cur.new_value = LETTERS.index(m[1]), m[2], m[3]
        elif m := _CHOOSE.match(line):
            trials[-1].choice = LETTERS.index(m[1])
        elif m := _OUTCOME.match(line):
            trials[-1].rewarded = m[2] == "rewarded!"
        elif line.startswith("Explanation:"):
            trials[-1].explanation = line[len("Explanation:"):].strip()
        elif line.startswith(REASONING_PREFIX):
            trials[-1].reasoning = line[len(REASONING_PREFIX):].strip()
    return trials


def parse_transcript(text: str) -> list[OooEpisode]:
    """Recover played episodes from rendered text (one or many, separated).

    Skeleton fields the transcript cannot show are filled from what it does
    show: ``transforms`` only holds the revealed tokens.
    """
    episodes = []
    for chunk in text.split(NEW_GAME)[1:]:
        chunk = chunk.split("\n" + SEPARATOR + "\n")[0]
        parsed = parse_trials(chunk)
        if len(parsed) != EXPERIMENT_TRIALS + 1:
            raise ValueError(f"expected {EXPERIMENT_TRIALS + 1} trials, found {len(parsed)}")
        final = parsed[-1]
        correct = next((t.dimension for t in parsed[:-1] if t.rewarded), None)
        if correct is None:
            if final.rewarded:
                correct = next(d for d in DIMENSIONS if is_unique(final.objects, final.choice, d))
            else:
                tried = {t.dimension for t in parsed[:-1]}
                rest = [d for d in DIMENSIONS if d not in tried]
                if len(rest) != 1:
                    raise ValueError("transcript does not determine the correct dimension")
                correct = rest[0]
        trials = tuple(Trial(tuple(t.objects), t.choice, t.dimension, t.new_value, t.rewarded,
                             t.explanation, t.reasoning) for t in parsed)
        episodes.append(OooEpisode(
            correct,
            tuple(t.objects[0] for t in parsed[:-1]),
            tuple({t.dimension: t.new_value} for t in parsed[:-1]),
            tuple(t.choice for t in parsed[:-1]),
            tuple(final.objects),
            trials,
        ))
    return episodes


# ---------------------------------------------------------------- scorers


class Scorer(Protocol):
    def score(self, prompt: str, candidates: Sequence[str]) -> list[float]: ...

    def generate(self, prompt: str, stop: str = "\n") -> str: ...


def current_episode(prompt: str) -> str:
    return prompt.rsplit(NEW_GAME, 1)[-1]


def infer_dimension(trials: Sequence[ParsedTrial]) -> str | None:
    """The correct dimension implied by experiment outcomes, if determined."""
    ruled_out = set()
    for t in trials:
        if t.dimension is None or t.rewarded is None:
            continue
        if t.rewarded:
            return t.dimension
        ruled_out.add(t.dimension)
    rest = [d for d in DIMENSIONS if d not in ruled_out]
    return rest[0] if len(rest) == 1 else None


class OracleScorer:
    """Deterministic rule follower used in tests and dry runs.

    It reads only the episode being played (the text after the last
    ``New game:``): it probes untested dimensions in order, repeats a
    rewarded one, and on the final trial picks the object unique along the
    dimension the reward history implies. Scores are 0 for the preferred
    candidate and -1 otherwise, so the caller's argmax decides.
    """

    def _plan(self, trials):
        experiments = [t for t in trials if t.dimension is not None]
        found = infer_dimension(experiments)
        if found is not None and any(t.rewarded for t in experiments):
            return found
        tried = {t.dimension for t in experiments}
        return next((d for d in DIMENSIONS if d not in tried), DIMENSIONS[0])

    def _preferred(self, prompt: str) -> str | None:
        text = current_episode(prompt)
        trials = parse_trials(text)
        if text.endswith("I choose object"):
            dim = infer_dimension(trials[:-1])
            if dim is None or not trials:
                return None
            final = trials[-1].objects
            return next((LETTERS[i] for i in range(3) if is_unique(final, i, dim)), None)
        if text.endswith("into a different"):
            return self._plan(trials[:-1])
        if text.endswith("I transform object"):
            return LETTERS[(len(trials) - 1) % 3]
        return None

    def score(self, prompt: str, candidates: Sequence[str]) -> list[float]:
        want = self._preferred(prompt)
        return [0.0 if c.strip() == want else -1.0 for c in candidates]

    def generate(self, prompt: str, stop: str = "\n") -> str:
        text = current_episode(prompt)
        trials = parse_trials(text)
        if text.endswith("Explanation:") and trials:
            last = trials[-1]
            if last.dimension is None:
                dim = infer_dimension(trials[:-1])
                return " " + final_explanation(dim) if dim else ""
            return " " + experiment_explanation(last.dimension, bool(last.rewarded))
        if text.endswith(REASONING_PREFIX) and trials:
            dim = infer_dimension(trials[:-1])
            return " " + reasoning_text(trials[-1].objects, dim) if dim else ""
        return ""


SCORER_URL_ENV = "PASSIVE_CAUSAL_SCORER_URL"
SCORER_TOKEN_ENV = "PASSIVE_CAUSAL_SCORER_TOKEN"


class HttpScorer:
    """Client for a remote language model behind a two-endpoint JSON API.

    ``POST {url}/score``    ``{"prompt", "candidates"}`` -> ``{"scores": [...]}``
    ``POST {url}/generate`` ``{"prompt", "stop", "top_p", "temperature"}`` -> ``{"text": ...}``

    Every request/response pair (or failure) is appended to ``log_path`` as
    one JSON line.
    """

    def __init__(self, url: str | None = None, token: str | None = None, *, timeout: float = 60.0,
                 retries: int = 3, backoff: float = 0.5, max_in_flight: int = 4,
                 log_path: str | Path | None = None, top_p: float = 0.8, temperature: float = 1.0):
        url = url or os.environ.get(SCORER_URL_ENV)
        if not url:
            raise ValueError(f"no scorer URL given and ${SCORER_URL_ENV} is unset")
        self.url = url.rstrip("/")
        self.token = token if token is not None else os.environ.get(SCORER_TOKEN_ENV)
        self.timeout, self.retries, self.backoff = timeout, retries, backoff
        self.top_p, self.temperature = top_p, temperature
        self.log_path = Path(log_path) if log_path is not None else None
        self._gate = threading.BoundedSemaphore(max_in_flight)
        self._log_lock = threading.Lock()

    def _log(self, entry: dict) -> None:
        if self.log_path is None:
            return
        with self._log_lock, open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def _post(self, route: str, payload: dict) -> dict:
        body = json.dumps(payload).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        last_error = None
        for attempt in range(1, self.retries + 1):
            req = urllib.request.Request(f"{self.url}/{route}", data=body, headers=headers, method="POST")
            try:
                with self._gate, urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    reply = json.loads(resp.read().decode("utf-8"))
                self._log({"route": route, "attempt": attempt, "request": payload, "response": reply})
                return reply
            except (urllib.error.URLError, OSError, ValueError) as exc:
                last_error = exc
                self._log({"route": route, "attempt": attempt, "request": payload, "error": repr(exc)})
                if attempt < self.retries:
                    time.sleep(self.backoff * 2 ** (attempt - 1))
        raise TransportError(f"{route} failed after {self.retries} attempts: {last_error!r}")

    def score(self, prompt: str, candidates: Sequence[str]) -> list[float]:
        reply = self._post("score", {"prompt": prompt, "candidates": list(candidates)})
        scores = reply.get("scores")
        if not isinstance(scores, list) or len(scores) != len(candidates):
            raise TransportError(f"malformed score reply: {reply!r}")
        return [float(s) for s in scores]

    def generate(self, prompt: str, stop: str = "\n") -> str:
        reply = self._post("generate", {"prompt": prompt, "stop": stop, "top_p": self.top_p,
                                        "temperature": self.temperature})
        text = reply.get("text")
        if not isinstance(text, str):
            raise TransportError(f"malformed generate reply: {reply!r}")
        return text


# ---------------------------------------------------------------- protocol


@dataclass(frozen=True)
class PromptSpec:
    shots: tuple[OooEpisode, ...]
    allowed_dimensions: tuple[str, ...]
    variant: Variant = VARIANTS["full"]

    def __post_init__(self):
        if not self.shots:
            raise ValueError("a prompt needs at least one shot")
        if any(d not in DIMENSIONS for d in self.allowed_dimensions):
            raise ValueError(f"invalid allowed dimensions {self.allowed_dimensions!r}")

    def text(self) -> str:
        return join_episodes([render(s, self.variant) for s in self.shots])


@dataclass
class EpisodeResult:
    choices: list[int]
    dimensions: list[str]
    generated: list[str]
    experiment_rewards: int
    final_choice: int
    final_reward: bool
    correct_dimension: str
    transcript: str
    generate_calls: int = 0
    malformed: int = 0


def _argmax(scores: Sequence[float]) -> int:
    return int(np.argmax(np.asarray(scores, dtype=float)))


def _pick(scorer: Scorer, prompt: str, options: Sequence[str]) -> int:
    return _argmax(scorer.score(prompt, [" " + o for o in options]))


def _line(scorer: Scorer, prompt: str) -> tuple[str, bool]:
    raw = scorer.generate(prompt, "\n")
    text, cut, _ = raw.partition("\n")
    return text, bool(cut)


def run_episode(prompt: PromptSpec, episode: OooEpisode, scorer: Scorer) -> EpisodeResult:
    """Let ``scorer`` play ``episode`` after the few-shot ``prompt``."""
    variant = prompt.variant
    context = prompt.text()
    body = episode_header(variant)
    choices, dims, generated = [], [], []
    rewards = calls = malformed = 0
    for t in range(EXPERIMENT_TRIALS):
        if t:
            body += "\n"
        body += objects_block((episode.bases[t],) * 3) + "I transform object"
        choice = _pick(scorer, context + body, LETTERS)
        body += f" {LETTERS[choice]} into a different"
        dim = DIMENSIONS[_pick(scorer, context + body, DIMENSIONS)]
        trial = play_experiment(episode, t, choice, dim)
        body += f" {dim}: {trial.new_value}.\n" + _outcome(choice, trial.rewarded)
        choices.append(choice)
        dims.append(dim)
        rewards += int(trial.rewarded)
        if variant.with_explanations:
            body += "Explanation:"
            text, cut = _line(scorer, context + body)
            calls += 1
            malformed += int(cut)
            generated.append(text)
            body += text + "\n"
    body += "\n" + objects_block(episode.final_objects)
    if variant.with_reasoning:
        body += REASONING_PREFIX
        text, cut = _line(scorer, context + body)
        calls += 1
        malformed += int(cut)
        generated.append(text)
        body += text + "\n"
    body += "I choose object"
    final = _pick(scorer, context + body, LETTERS)
    reward = is_unique(episode.final_objects, final, episode.correct_dimension)
    body += f" {LETTERS[final]}\n" + _outcome(final, reward)
    return EpisodeResult(choices, dims, generated, rewards, final, reward, episode.correct_dimension,
                         body, calls, malformed)


def sample_prompt(holdout: HoldoutConfig, rng: np.random.Generator, shots: int = 4,
                  variant: Variant = VARIANTS["full"], expert_mode: str = "fixed") -> PromptSpec:
    dims = holdout.train_dimensions
    episodes = tuple(expert_script(sample_episode(dims, rng), expert_mode) for _ in range(shots))
    return PromptSpec(episodes, dims, variant)


def holdout_intact(prompt: PromptSpec, episode: OooEpisode, holdout: HoldoutConfig) -> bool:
    """No shot demonstrates the held-out dimension being evaluated."""
    if holdout.heldout is None:
        return True
    return all(s.correct_dimension != episode.correct_dimension for s in prompt.shots) and \
        all(s.correct_dimension != holdout.heldout for s in prompt.shots)


@dataclass
class Selection:
    prompt: PromptSpec
    scores: list[tuple[float, int]]
    index: int


def select_prompt(candidate_count: int, validation_count: int, holdout: HoldoutConfig, scorer: Scorer,
                  rng: np.random.Generator, shots: int = 4, variant: Variant = VARIANTS["full"],
                  expert_mode: str = "fixed") -> Selection:
    """Best of ``candidate_count`` sampled prompts on shared validation episodes.

    A candidate's score is (final-trial accuracy, experiment rewards); the
    first candidate wins ties.
    """
    if candidate_count < 1 or validation_count < 1:
        raise ValueError("candidate_count and validation_count must be positive")
    candidates = [sample_prompt(holdout, rng, shots, variant, expert_mode) for _ in range(candidate_count)]
    validation = [sample_episode(holdout.train_dimensions, rng) for _ in range(validation_count)]
    scores = []
    for cand in candidates:
        results = [run_episode(cand, ep, scorer) for ep in validation]
        scores.append((sum(r.final_reward for r in results) / len(results),
                       sum(r.experiment_rewards for r in results)))
    best = max(range(len(scores)), key=lambda i: (scores[i], -i))
    return Selection(candidates[best], scores, best)


@dataclass
class OooReport:
    variant: str
    results: list[EpisodeResult]

    def accuracy(self, dimension: str | None = None) -> tuple[float, float, int]:
        """Final-trial accuracy with a 95% normal-approximation half width."""
        picked = [r.final_reward for r in self.results
                  if dimension is None or r.correct_dimension == dimension]
        if not picked:
            return float("nan"), float("nan"), 0
        p = float(np.mean(picked))
        return p, 1.96 * float(np.sqrt(p * (1 - p) / len(picked))), len(picked)

    def rows(self) -> list[dict]:
        out = []
        for dim in (None,) + DIMENSIONS:
            value, half, count = self.accuracy(dim)
            if count:
                out.append({"condition": self.variant, "metric": f"final_accuracy_{dim or 'all'}",
                            "value": value, "ci_half_width": half, "n_episodes": count})
        return out


def evaluate_variant(variant_name: str, scorer: Scorer, n_episodes: int, rng: np.random.Generator,
                     heldout: Sequence[str] = DIMENSIONS, candidate_count: int = 10,
                     validation_count: int = 20, shots: int = 4, expert_mode: str = "fixed") -> OooReport:
    """Hold each dimension of ``heldout`` out in turn, select a prompt on the
    other two, and play ``n_episodes`` split evenly across the held-out
    dimensions."""
    variant = VARIANTS[variant_name]
    results = []
    per = [n_episodes // len(heldout) + (i < n_episodes % len(heldout)) for i in range(len(heldout))]
    for dim, count in zip(heldout, per):
        holdout = HoldoutConfig(dim)
        chosen = select_prompt(candidate_count, validation_count, holdout, scorer, rng, shots,
                               variant, expert_mode).prompt
        for _ in range(count):
            ep = sample_episode(holdout.eval_dimensions, rng)
            if not holdout_intact(chosen, ep, holdout):
                raise AssertionError("held-out dimension leaked into the prompt")
            results.append(run_episode(chosen, ep, scorer))
    return OooReport(variant_name, results)
