import os
import subprocess
import sys

import numpy as np
from hypothesis import given, strategies as st

from passive_causal import _accel, kernels
from passive_causal.scm import ConstraintKind, ConstraintSpec, DagConfig, sample_dag


def _graph(seed, nonlinear=True, num_relevant=None):
    cfg = DagConfig(nonlinear=nonlinear, num_relevant=num_relevant)
    kind = ConstraintKind.ADAPTIVE_TRAIN if num_relevant else ConstraintKind.TRAIN_STANDARD
    dag = sample_dag(cfg, ConstraintSpec(kind), np.random.default_rng(seed))
    return dag, (dag.order, dag.par_idx, dag.par_w)


@given(st.integers(0, 2**31), st.booleans(), st.integers(1, 16))
def test_propagate_backends_agree(seed, nonlinear, batch):
    dag, g = _graph(seed, nonlinear)
    rng = np.random.default_rng(seed)
    mask = rng.random((batch, dag.n)) < 0.3
    val = rng.uniform(-4, 4, (batch, dag.n))
    eps = rng.standard_normal((batch, dag.n))
    a = kernels.propagate_batch_np(*g, mask, val, eps, nonlinear, dag.leak)
    b = kernels.propagate_batch_jit(*g, mask, val, eps, nonlinear, dag.leak)
    np.testing.assert_array_equal(a, b)


@given(st.integers(0, 2**31), st.booleans(), st.sampled_from([None, 2, 4]))
def test_candidate_backends_agree(seed, nonlinear, k):
    dag, g = _graph(seed, nonlinear, k)
    for goal in np.flatnonzero(dag.relevant):
        a = kernels.candidate_values_np(*g, dag.relevant, 4.0, nonlinear, dag.leak, int(goal))
        b = kernels.candidate_values_jit(*g, dag.relevant, 4.0, nonlinear, dag.leak, int(goal))
        np.testing.assert_array_equal(a, b)


@given(st.integers(0, 2**31), st.booleans())
def test_monte_carlo_backends_agree(seed, nonlinear):
    dag, g = _graph(seed, nonlinear)
    eps = np.random.default_rng(seed).standard_normal((257, dag.n)) * dag.noise_sd
    a = kernels.mc_candidate_means_np(*g, dag.relevant, 4.0, nonlinear, dag.leak, 4, eps)
    b = kernels.mc_candidate_means_jit(*g, dag.relevant, 4.0, nonlinear, dag.leak, 4, eps)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_zero_noise_monte_carlo_equals_candidates():
    dag, g = _graph(5)
    eps = np.zeros((3, dag.n))
    np.testing.assert_allclose(
        kernels.mc_candidate_means(*g, dag.relevant, 4.0, True, 0.2, 2, eps),
        kernels.candidate_values(*g, dag.relevant, 4.0, True, 0.2, 2))


def test_backend_flag_selects_numpy():
    code = "from passive_causal import _accel, kernels; print(_accel.BACKEND, kernels.propagate_batch.__name__)"
    env = dict(os.environ, PASSIVE_CAUSAL_BACKEND="numpy")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "propagate_batch_np"]


def test_backend_flag_rejects_unknown_value():
    env = dict(os.environ, PASSIVE_CAUSAL_BACKEND="cuda")
    out = subprocess.run([sys.executable, "-c", "import passive_causal.kernels"], env=env,
                         capture_output=True, text=True)
    assert out.returncode != 0
    assert "PASSIVE_CAUSAL_BACKEND" in out.stderr


def test_default_backend():
    if _accel.HAVE_NUMBA and os.environ.get("PASSIVE_CAUSAL_BACKEND", "numba") == "numba":
        assert kernels.propagate_batch is kernels.propagate_batch_jit
