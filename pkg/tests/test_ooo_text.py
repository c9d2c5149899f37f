import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, strategies as st

from golden_cases import cases, fixed_seed_transcript
from passive_causal.ooo_text import (
    DIMENSIONS, INSTRUCTION, SEPARATOR, VARIANTS, VOCABULARY, HoldoutConfig, HttpScorer, OooEpisode,
    OooObject, OracleScorer, PromptSpec, TransportError, Trial, evaluate_variant, expert_script,
    holdout_intact, is_unique, join_episodes, parse_transcript, render, run_episode, sample_episode,
    sample_prompt, select_prompt, transform_attribute, visible_trials,
)

seeds = st.integers(0, 2**32 - 1)


def listing_episode():
    bases = (OooObject("white", "square", "striped"), OooObject("black", "ellipse", "striped"),
             OooObject("red", "pentagon", "solid"))
    transforms = ({"color": "pink", "shape": "star", "texture": "dotted"},
                  {"color": "blue", "shape": "trapezoid", "texture": "solid"},
                  {"color": "green", "shape": "cross", "texture": "striped"})
    final = (OooObject("purple", "ellipse", "solid"), OooObject("green", "trapezoid", "solid"),
             OooObject("green", "ellipse", "striped"))
    return OooEpisode("shape", bases, transforms, (0, 1, 2), final)


def test_listing_transcript_is_byte_identical(golden_dir):
    text = render(expert_script(listing_episode()), VARIANTS["full"])
    assert text.encode() == (golden_dir / "listing_expert_episode.txt").read_bytes()


@pytest.mark.parametrize("variant, mode, path", list(cases()), ids=lambda c: getattr(c, "name", None))
def test_fixed_seed_goldens(variant, mode, path):
    assert fixed_seed_transcript(variant, mode).encode() == path.read_bytes()


def test_vocabulary_is_disjoint_and_rich():
    seen = set()
    for dim in DIMENSIONS:
        assert len(VOCABULARY[dim]) >= 6
        assert not seen & set(VOCABULARY[dim])
        seen |= set(VOCABULARY[dim])
    with pytest.raises(ValueError):
        OooObject("square", "square", "solid")


@given(seeds)
def test_episode_skeleton_invariants(seed):
    rng = np.random.default_rng(seed)
    ep = sample_episode(DIMENSIONS, rng)
    for i, obj in enumerate(ep.final_objects):
        # each final object is unique along exactly one dimension
        assert sum(is_unique(ep.final_objects, i, d) for d in DIMENSIONS) == 1
    assert sorted(d for i in range(3) for d in DIMENSIONS if is_unique(ep.final_objects, i, d)) == sorted(DIMENSIONS)
    for base, tr in zip(ep.bases, ep.transforms):
        for d in DIMENSIONS:
            assert tr[d] != base.get(d) and tr[d] in VOCABULARY[d]
    assert is_unique(ep.final_objects, ep.final_answer, ep.correct_dimension)


@given(seeds, st.sampled_from(["fixed", "varied"]))
def test_expert_script_rewards(seed, mode):
    ep = expert_script(sample_episode(DIMENSIONS, np.random.default_rng(seed)), mode)
    assert ep.complete
    for t in ep.trials[:-1]:
        assert t.rewarded == (t.dimension == ep.correct_dimension)
    assert ep.trials[-1].rewarded and ep.trials[-1].choice == ep.final_answer
    if mode == "fixed":
        assert [t.dimension for t in ep.trials[:-1]] == list(DIMENSIONS)
    else:
        dims = [t.dimension for t in ep.trials[:-1]]
        if ep.correct_dimension in dims:
            k = dims.index(ep.correct_dimension)
            assert all(d == ep.correct_dimension for d in dims[k:])


@given(seeds, st.sampled_from(sorted(VARIANTS)), st.sampled_from(["fixed", "varied"]))
def test_render_parse_roundtrip(seed, variant, mode):
    rng = np.random.default_rng(seed)
    eps = [expert_script(sample_episode(DIMENSIONS, rng), mode) for _ in range(2)]
    text = join_episodes([render(e, VARIANTS[variant]) for e in eps])
    back = parse_transcript(text)
    assert len(back) == 2
    for orig, got in zip(eps, back):
        assert got.trials == visible_trials(orig, VARIANTS[variant])
        assert got.correct_dimension == orig.correct_dimension
        assert got.final_objects == orig.final_objects


def test_render_layout():
    ep = expert_script(listing_episode())
    text = render(ep, VARIANTS["instruction"])
    assert text.startswith("New game:\n\n" + INSTRUCTION + "\n\n")
    assert "Explanation" not in text and "Reasoning" not in text
    assert join_episodes([text]).endswith("\n" + SEPARATOR + "\n")
    with pytest.raises(ValueError):
        render(listing_episode())


def test_transform_attribute_excludes_taken_values():
    rng = np.random.default_rng(0)
    objs = [OooObject(c, "star", "solid") for c in VOCABULARY["color"][:-1]]
    assert transform_attribute(objs, "color", rng) == VOCABULARY["color"][-1]
    with pytest.raises(ValueError):
        transform_attribute(objs + [OooObject(VOCABULARY["color"][-1], "star", "solid")], "color", rng)
    with pytest.raises(ValueError):
        transform_attribute(objs, "size", rng)


@pytest.mark.parametrize("variant", sorted(VARIANTS))
def test_oracle_scorer_solves_every_episode(variant):
    rng = np.random.default_rng(1)
    holdout = HoldoutConfig("texture")
    prompt = sample_prompt(holdout, rng, variant=VARIANTS[variant])
    scorer = OracleScorer()
    for _ in range(30):
        ep = sample_episode(holdout.eval_dimensions, rng)
        res = run_episode(prompt, ep, scorer)
        assert res.final_reward
        assert res.experiment_rewards >= 1
        assert res.malformed == 0
        played = parse_transcript(res.transcript)[0]
        assert played.correct_dimension == ep.correct_dimension
        assert res.generate_calls == 3 * VARIANTS[variant].with_explanations + VARIANTS[variant].with_reasoning
        if VARIANTS[variant].with_explanations:
            assert res.generated[0].startswith(" ")


@given(seeds)
def test_holdout_integrity(seed):
    rng = np.random.default_rng(seed)
    for dim in DIMENSIONS:
        holdout = HoldoutConfig(dim)
        prompt = sample_prompt(holdout, rng)
        assert dim not in prompt.allowed_dimensions
        assert all(s.correct_dimension != dim for s in prompt.shots)
        ep = sample_episode(holdout.eval_dimensions, rng)
        assert ep.correct_dimension == dim
        assert holdout_intact(prompt, ep, holdout)
    leaky = PromptSpec(prompt.shots + (expert_script(sample_episode(("color",), rng)),), DIMENSIONS)
    assert not holdout_intact(leaky, sample_episode(("color",), rng), HoldoutConfig("color"))


def test_holdout_config():
    assert HoldoutConfig("shape").train_dimensions == ("color", "texture")
    assert HoldoutConfig().eval_dimensions == DIMENSIONS
    with pytest.raises(ValueError):
        HoldoutConfig("size")
    with pytest.raises(ValueError):
        PromptSpec((), DIMENSIONS)


def test_select_prompt_prefers_first_on_ties():
    sel = select_prompt(3, 4, HoldoutConfig("color"), OracleScorer(), np.random.default_rng(0))
    assert sel.index == 0
    assert all(s[0] == 1.0 for s in sel.scores)
    with pytest.raises(ValueError):
        select_prompt(0, 4, HoldoutConfig("color"), OracleScorer(), np.random.default_rng(0))


class ScriptedScorer:
    """Prefers one fixed letter; used to check that selection reacts to scores."""

    def __init__(self, letter):
        self.letter = letter

    def score(self, prompt, candidates):
        return [1.0 if c.strip() in (self.letter, "color") else 0.0 for c in candidates]

    def generate(self, prompt, stop="\n"):
        return " ok\nextra"


def test_generation_is_cut_at_newline():
    rng = np.random.default_rng(2)
    prompt = sample_prompt(HoldoutConfig(), rng)
    res = run_episode(prompt, sample_episode(DIMENSIONS, rng), ScriptedScorer("B"))
    assert res.generated == [" ok"] * 4
    assert res.malformed == 4
    assert res.choices == [1, 1, 1] and res.dimensions == ["color"] * 3


def test_evaluate_variant_report():
    report = evaluate_variant("none", OracleScorer(), 9, np.random.default_rng(3), candidate_count=2,
                              validation_count=2)
    acc, half, count = report.accuracy()
    assert (acc, half, count) == (1.0, 0.0, 9)
    rows = report.rows()
    assert [r["metric"] for r in rows] == ["final_accuracy_all"] + [f"final_accuracy_{d}" for d in DIMENSIONS]
    assert sum(r["n_episodes"] for r in rows[1:]) == 9


# ---------------------------------------------------------------- HTTP scorer against a local mock


class MockModel:
    """Echoes scripted scores; fails the first ``failures`` requests."""

    def __init__(self, failures=0, scores=(0.0, -1.0, -2.0), text=" scripted\nrest"):
        self.failures, self.scores, self.text = failures, list(scores), text
        self.requests = []
        self.lock = threading.Lock()

    def handler(model):
        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                with model.lock:
                    model.requests.append((self.path, dict(self.headers), body))
                    fail = model.failures > 0
                    model.failures -= int(fail)
                if fail:
                    self.send_response(503)
                    self.end_headers()
                    return
                if self.path == "/score":
                    reply = {"scores": model.scores[:len(body["candidates"])]}
                elif self.path == "/generate":
                    reply = {"text": model.text}
                else:
                    self.send_response(404)
                    self.end_headers()
                    return
                data = json.dumps(reply).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        return Handler


@pytest.fixture
def mock_server():
    servers = []

    def start(model):
        server = ThreadingHTTPServer(("127.0.0.1", 0), model.handler())
        threading.Thread(target=server.serve_forever, daemon=True).start()
        servers.append(server)
        return f"http://127.0.0.1:{server.server_address[1]}"

    yield start
    for s in servers:
        s.shutdown()
        s.server_close()


def test_http_scorer_roundtrip_and_log(mock_server, tmp_path):
    model = MockModel()
    log = tmp_path / "log.jsonl"
    scorer = HttpScorer(mock_server(model), token="secret", log_path=log, backoff=0.0)
    assert scorer.score("p", [" A", " B", " C"]) == [0.0, -1.0, -2.0]
    assert scorer.generate("p") == " scripted\nrest"
    path, headers, body = model.requests[1]
    assert path == "/generate"
    assert body == {"prompt": "p", "stop": "\n", "top_p": 0.8, "temperature": 1.0}
    assert model.requests[0][1]["Authorization"] == "Bearer secret"
    entries = [json.loads(line) for line in log.read_text().splitlines()]
    assert [e["route"] for e in entries] == ["score", "generate"]
    assert entries[0]["response"] == {"scores": [0.0, -1.0, -2.0]}


def test_http_scorer_retries_then_succeeds(mock_server, tmp_path):
    model = MockModel(failures=2)
    log = tmp_path / "log.jsonl"
    scorer = HttpScorer(mock_server(model), log_path=log, retries=3, backoff=0.0)
    assert scorer.score("p", [" A"]) == [0.0]
    entries = [json.loads(line) for line in log.read_text().splitlines()]
    assert [e["attempt"] for e in entries] == [1, 2, 3]
    assert "error" in entries[0] and "response" in entries[2]


def test_http_scorer_gives_up(mock_server):
    scorer = HttpScorer(mock_server(MockModel(failures=10)), retries=2, backoff=0.0)
    with pytest.raises(TransportError):
        scorer.score("p", [" A"])


def test_http_scorer_rejects_malformed_reply(mock_server):
    scorer = HttpScorer(mock_server(MockModel(scores=[1.0])), backoff=0.0)
    with pytest.raises(TransportError):
        scorer.score("p", [" A", " B"])


def test_http_scorer_needs_url(monkeypatch):
    monkeypatch.delenv("PASSIVE_CAUSAL_SCORER_URL", raising=False)
    with pytest.raises(ValueError):
        HttpScorer()
    monkeypatch.setenv("PASSIVE_CAUSAL_SCORER_URL", "http://127.0.0.1:9/")
    assert HttpScorer().url == "http://127.0.0.1:9"


def test_http_scorer_drives_an_episode(mock_server):
    model = MockModel(scores=[0.0, 5.0, 1.0], text=" fine")
    scorer = HttpScorer(mock_server(model), backoff=0.0, max_in_flight=2)
    rng = np.random.default_rng(4)
    res = run_episode(sample_prompt(HoldoutConfig(), rng), sample_episode(DIMENSIONS, rng), scorer)
    assert res.choices == [1, 1, 1]
    assert res.dimensions == ["shape"] * 3
    assert res.final_choice == 1
    assert res.generated == [" fine"] * 4
    routes = [r[0] for r in model.requests]
    assert routes.count("/score") == 7 and routes.count("/generate") == 4
