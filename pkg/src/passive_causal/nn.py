"""Numpy sequence policies with hand-written backpropagation.

Two memory blocks share the linear-encoder / linear-action-head sandwich:

* :class:`PolicyNet`: a single LSTM layer. The input projection for the whole
  sequence is one matmul; the recurrence then runs step by step.
* :class:`AttentionPolicyNet`: causal multi-head self-attention layers over
  the episode so far, each followed by a ReLU MLP, both residual.
"""

from __future__ import annotations

import numpy as np

PARAM_NAMES = ("W_enc", "b_enc", "W_ih", "W_hh", "b_gates", "W_out", "b_out")


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _orthogonal(rng, n, m):
    a = rng.standard_normal((max(n, m), min(n, m)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if n >= m else q.T


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class PolicyNet:
    """LSTM policy over ``num_actions`` discrete actions.

    ``head_scale`` shrinks the head's initial weights so the untrained policy is
    close to uniform (initial loss close to ``log(num_actions)``).
    """

    def __init__(self, input_dim: int, num_actions: int, hidden: int = 64, embed: int | None = None,
                 seed: int = 0, dtype=np.float64, head_scale: float = 0.1, horizon: int = 64):
        self.input_dim = int(input_dim)
        self.num_actions = int(num_actions)
        self.hidden = int(hidden)
        self.embed = int(embed if embed is not None else hidden)
        self.horizon = int(horizon)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        D, E, H, A = self.input_dim, self.embed, self.hidden, self.num_actions

        def uniform(fan_in, shape, scale=1.0):
            bound = scale / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        W_hh = np.concatenate([_orthogonal(rng, H, H) for _ in range(4)], axis=1)
        self.params = {
            "W_enc": uniform(D, (D, E)),
            "b_enc": np.zeros(E),
            "W_ih": uniform(E, (E, 4 * H)),
            "W_hh": W_hh,
            "b_gates": np.zeros(4 * H),
            "W_out": uniform(H, (H, A), head_scale),
            "b_out": np.zeros(A),
        }
        self.params = {k: v.astype(self.dtype) for k, v in self.params.items()}

    # ------------------------------------------------------------ bookkeeping

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def hyper(self) -> dict:
        return {"kind": "lstm", "input_dim": self.input_dim, "num_actions": self.num_actions, "hidden": self.hidden,
                "embed": self.embed, "horizon": self.horizon, "dtype": self.dtype.name}

    @classmethod
    def from_arrays(cls, hyper: dict, params: dict) -> "PolicyNet":
        net = cls(hyper["input_dim"], hyper["num_actions"], hyper["hidden"], hyper["embed"],
                  dtype=np.dtype(hyper["dtype"]), horizon=hyper["horizon"])
        for name in PARAM_NAMES:
            if params[name].shape != net.params[name].shape:
                raise ValueError(f"parameter {name} has shape {params[name].shape}")
            net.params[name] = np.array(params[name], dtype=net.dtype)
        return net

    def copy(self) -> "PolicyNet":
        return type(self).from_arrays(self.hyper(), self.params)

    # ------------------------------------------------------------ inference

    kind = "lstm"

    def initial_state(self, batch: int = 1):
        z = np.zeros((batch, self.hidden), dtype=self.dtype)
        return z, z.copy()

    def step(self, x_t, state):
        """One recurrent step; ``x_t`` is ``(batch, input_dim)``."""
        p = self.params
        h, c = state
        e = np.asarray(x_t, dtype=self.dtype) @ p["W_enc"] + p["b_enc"]
        gates = e @ p["W_ih"] + h @ p["W_hh"] + p["b_gates"]
        H = self.hidden
        i = _sigmoid(gates[:, :H])
        f = _sigmoid(gates[:, H:2 * H])
        g = np.tanh(gates[:, 2 * H:3 * H])
        o = _sigmoid(gates[:, 3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        return h @ p["W_out"] + p["b_out"], (h, c)

    def forward(self, x, cache: bool = False):
        """Logits for a ``(batch, T, input_dim)`` block."""
        p = self.params
        x = np.asarray(x, dtype=self.dtype)
        B, T, _ = x.shape
        if T > self.horizon:
            raise ValueError(f"sequence length {T} exceeds memory horizon {self.horizon}")
        H = self.hidden
        e = x @ p["W_enc"] + p["b_enc"]                      # (B, T, E)
        pre = e @ p["W_ih"] + p["b_gates"]                    # (B, T, 4H)
        h = np.zeros((B, H), dtype=self.dtype)
        c = np.zeros((B, H), dtype=self.dtype)
        hs = np.empty((B, T, H), dtype=self.dtype)
        store = []
        for t in range(T):
            gates = pre[:, t] + h @ p["W_hh"]
            i = _sigmoid(gates[:, :H])
            f = _sigmoid(gates[:, H:2 * H])
            g = np.tanh(gates[:, 2 * H:3 * H])
            o = _sigmoid(gates[:, 3 * H:])
            c_prev = c
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h_prev = h
            h = o * tc
            hs[:, t] = h
            if cache:
                store.append((i, f, g, o, c_prev, tc, h_prev))
        logits = hs @ p["W_out"] + p["b_out"]
        if cache:
            return logits, (x, e, hs, store)
        return logits

    # ------------------------------------------------------------ training

    def loss(self, x, actions, mask=None, smoothing: float = 0.0) -> float:
        logits = self.forward(x)
        return _masked_nll(logits, actions, mask, smoothing)[0]

    def loss_and_grads(self, x, actions, mask=None, smoothing: float = 0.0):
        """Mean masked negative log-likelihood and its parameter gradients."""
        p = self.params
        logits, (x, e, hs, store) = self.forward(x, cache=True)
        loss, dlogits = _masked_nll(logits, actions, mask, smoothing)
        dlogits = dlogits.astype(self.dtype)
        B, T, _ = x.shape
        H = self.hidden
        grads = {
            "W_out": hs.reshape(B * T, H).T @ dlogits.reshape(B * T, -1),
            "b_out": dlogits.sum(axis=(0, 1)),
        }
        dhs = dlogits @ p["W_out"].T                          # (B, T, H)
        dpre = np.empty((B, T, 4 * H), dtype=self.dtype)
        dW_hh = np.zeros_like(p["W_hh"])
        dh_next = np.zeros((B, H), dtype=self.dtype)
        dc_next = np.zeros((B, H), dtype=self.dtype)
        for t in reversed(range(T)):
            i, f, g, o, c_prev, tc, h_prev = store[t]
            dh = dhs[:, t] + dh_next
            do = dh * tc
            dc = dc_next + dh * o * (1.0 - tc * tc)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dc_next = dc * f
            dgates = dpre[:, t]
            dgates[:, :H] = di * i * (1.0 - i)
            dgates[:, H:2 * H] = df * f * (1.0 - f)
            dgates[:, 2 * H:3 * H] = dg * (1.0 - g * g)
            dgates[:, 3 * H:] = do * o * (1.0 - o)
            dW_hh += h_prev.T @ dgates
            dh_next = dgates @ p["W_hh"].T
        grads["W_hh"] = dW_hh
        grads["b_gates"] = dpre.sum(axis=(0, 1))
        grads["W_ih"] = e.reshape(B * T, -1).T @ dpre.reshape(B * T, -1)
        de = dpre @ p["W_ih"].T
        grads["W_enc"] = x.reshape(B * T, -1).T @ de.reshape(B * T, -1)
        grads["b_enc"] = de.sum(axis=(0, 1))
        return loss, grads


class AttentionPolicyNet:
    """Causal self-attention policy over ``num_actions`` discrete actions.

    Each time step is one token; token ``t`` attends to tokens ``0..t``. There
    is no positional encoding: observations already carry the phase cue, and
    an order-free memory lets one learned comparison apply to every past
    experiment regardless of which variable it touched. The recurrent "state"
    for step-wise use is simply the token history (at most ``horizon``).
    """

    kind = "attention"

    def __init__(self, input_dim: int, num_actions: int, hidden: int = 64, heads: int = 4, layers: int = 1,
                 mlp: int | None = None, seed: int = 0, dtype=np.float64, head_scale: float = 0.1,
                 horizon: int = 64):
        if hidden % heads:
            raise ValueError("hidden width must be divisible by the number of heads")
        self.input_dim, self.num_actions = int(input_dim), int(num_actions)
        self.hidden, self.heads, self.layers = int(hidden), int(heads), int(layers)
        self.mlp = int(mlp if mlp is not None else 2 * hidden)
        self.horizon = int(horizon)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        D, E, F, A = self.input_dim, self.hidden, self.mlp, self.num_actions

        def uniform(fan_in, shape, scale=1.0):
            bound = scale / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        params = {"W_enc": uniform(D, (D, E)), "b_enc": np.zeros(E)}
        for li in range(self.layers):
            params.update({
                f"Wq{li}": uniform(E, (E, E)), f"Wk{li}": uniform(E, (E, E)),
                f"Wv{li}": uniform(E, (E, E)), f"Wo{li}": uniform(E, (E, E)),
                f"W1{li}": uniform(E, (E, F)), f"b1{li}": np.zeros(F),
                f"W2{li}": uniform(F, (F, E)), f"b2{li}": np.zeros(E),
            })
        params["W_out"] = uniform(E, (E, A), head_scale)
        params["b_out"] = np.zeros(A)
        self.params = {k: v.astype(self.dtype) for k, v in params.items()}

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def hyper(self) -> dict:
        return {"kind": "attention", "input_dim": self.input_dim, "num_actions": self.num_actions,
                "hidden": self.hidden, "heads": self.heads, "layers": self.layers, "mlp": self.mlp,
                "horizon": self.horizon, "dtype": self.dtype.name}

    @classmethod
    def from_arrays(cls, hyper: dict, params: dict) -> "AttentionPolicyNet":
        net = cls(hyper["input_dim"], hyper["num_actions"], hyper["hidden"], hyper["heads"],
                  hyper["layers"], hyper["mlp"], dtype=np.dtype(hyper["dtype"]), horizon=hyper["horizon"])
        for name, ref in net.params.items():
            if params[name].shape != ref.shape:
                raise ValueError(f"parameter {name} has shape {params[name].shape}")
            net.params[name] = np.array(params[name], dtype=net.dtype)
        return net

    def copy(self) -> "AttentionPolicyNet":
        return type(self).from_arrays(self.hyper(), self.params)

    # ------------------------------------------------------------ inference

    def initial_state(self, batch: int = 1):
        return np.zeros((batch, 0, self.input_dim), dtype=self.dtype)

    def step(self, x_t, state):
        history = np.concatenate([state, np.asarray(x_t, dtype=self.dtype)[:, None]], axis=1)
        if history.shape[1] > self.horizon:
            raise ValueError(f"sequence length {history.shape[1]} exceeds memory horizon {self.horizon}")
        return self.forward(history)[:, -1], history

    def _split(self, z):
        B, T, E = z.shape
        return z.reshape(B, T, self.heads, E // self.heads).transpose(0, 2, 1, 3)

    def _merge(self, z):
        B, h, T, d = z.shape
        return z.transpose(0, 2, 1, 3).reshape(B, T, h * d)

    def forward(self, x, cache: bool = False):
        """Logits for a ``(batch, T, input_dim)`` block."""
        p = self.params
        x = np.asarray(x, dtype=self.dtype)
        B, T, _ = x.shape
        if T > self.horizon:
            raise ValueError(f"sequence length {T} exceeds memory horizon {self.horizon}")
        scale = 1.0 / np.sqrt(self.hidden // self.heads)
        future = np.triu(np.ones((T, T), dtype=bool), k=1)
        z = x @ p["W_enc"] + p["b_enc"]
        store = []
        for li in range(self.layers):
            q = self._split(z @ p[f"Wq{li}"])
            k = self._split(z @ p[f"Wk{li}"])
            v = self._split(z @ p[f"Wv{li}"])
            s = (q @ k.transpose(0, 1, 3, 2)) * scale
            s = np.where(future, -np.inf, s)
            s = s - s.max(axis=-1, keepdims=True)
            att = np.exp(s)
            att /= att.sum(axis=-1, keepdims=True)
            ctx = self._merge(att @ v)
            z1 = z + ctx @ p[f"Wo{li}"]
            pre = z1 @ p[f"W1{li}"] + p[f"b1{li}"]
            m = np.maximum(pre, 0)
            z2 = z1 + m @ p[f"W2{li}"] + p[f"b2{li}"]
            if cache:
                store.append((z, q, k, v, att, ctx, z1, pre, m))
            z = z2
        logits = z @ p["W_out"] + p["b_out"]
        if cache:
            return logits, (x, z, store)
        return logits

    # ------------------------------------------------------------ training

    def loss(self, x, actions, mask=None, smoothing: float = 0.0) -> float:
        return _masked_nll(self.forward(x), actions, mask, smoothing)[0]

    def loss_and_grads(self, x, actions, mask=None, smoothing: float = 0.0):
        """Mean masked negative log-likelihood and its parameter gradients."""
        p = self.params
        logits, (x, z_top, store) = self.forward(x, cache=True)
        loss, dlogits = _masked_nll(logits, actions, mask, smoothing)
        dlogits = dlogits.astype(self.dtype)
        B, T, _ = x.shape
        E = self.hidden
        scale = 1.0 / np.sqrt(E // self.heads)
        flat = lambda a: a.reshape(B * T, -1)
        grads = {"W_out": flat(z_top).T @ flat(dlogits), "b_out": dlogits.sum(axis=(0, 1))}
        dz = dlogits @ p["W_out"].T
        for li in reversed(range(self.layers)):
            z, q, k, v, att, ctx, z1, pre, m = store[li]
            grads[f"W2{li}"] = flat(m).T @ flat(dz)
            grads[f"b2{li}"] = dz.sum(axis=(0, 1))
            dpre = (dz @ p[f"W2{li}"].T) * (pre > 0)
            grads[f"W1{li}"] = flat(z1).T @ flat(dpre)
            grads[f"b1{li}"] = dpre.sum(axis=(0, 1))
            dz1 = dz + dpre @ p[f"W1{li}"].T
            grads[f"Wo{li}"] = flat(ctx).T @ flat(dz1)
            dctx = self._split(dz1 @ p[f"Wo{li}"].T)
            datt = dctx @ v.transpose(0, 1, 3, 2)
            dv = att.transpose(0, 1, 3, 2) @ dctx
            ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
            dq = ds @ k
            dk = ds.transpose(0, 1, 3, 2) @ q
            dq, dk, dv = self._merge(dq), self._merge(dk), self._merge(dv)
            grads[f"Wq{li}"] = flat(z).T @ flat(dq)
            grads[f"Wk{li}"] = flat(z).T @ flat(dk)
            grads[f"Wv{li}"] = flat(z).T @ flat(dv)
            dz = dz1 + dq @ p[f"Wq{li}"].T + dk @ p[f"Wk{li}"].T + dv @ p[f"Wv{li}"].T
        grads["W_enc"] = flat(x).T @ flat(dz)
        grads["b_enc"] = dz.sum(axis=(0, 1))
        return loss, grads


NETWORKS = {"lstm": PolicyNet, "attention": AttentionPolicyNet}


def net_from_arrays(hyper: dict, params: dict):
    """Rebuild either network kind from :meth:`hyper` output and arrays."""
    kind = hyper.get("kind", "lstm")
    if kind not in NETWORKS:
        raise ValueError(f"unknown network kind {kind!r}")
    return NETWORKS[kind].from_arrays(hyper, params)


def _masked_nll(logits, actions, mask, smoothing: float = 0.0):
    """Masked mean cross-entropy against (optionally smoothed) one-hot targets.

    With ``smoothing`` > 0 the target puts ``smoothing / A`` on every action
    and the rest on the labelled one.
    """
    actions = np.asarray(actions, dtype=np.int64)
    B, T, A = logits.shape
    if mask is None:
        mask = np.ones((B, T))
    mask = np.asarray(mask, dtype=np.float64)
    total = mask.sum()
    if total <= 0:
        raise ValueError("loss mask selects no steps")
    logp = log_softmax(logits.astype(np.float64))
    target = np.zeros_like(logp)
    np.put_along_axis(target, actions[..., None], 1.0, axis=-1)
    if smoothing:
        target = (1.0 - smoothing) * target + smoothing / A
    loss = float(-((target * logp).sum(axis=-1) * mask).sum() / total)
    dlogits = (np.exp(logp) - target) * (mask / total)[..., None]
    return loss, dlogits


# ---------------------------------------------------------------- optimisation


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_by_global_norm(grads: dict, max_norm: float):
    """Scale ``grads`` so their joint L2 norm is at most ``max_norm``; returns
    ``(clipped, norm_before)``."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class Adam:
    """Adam; ``weight_decay`` > 0 adds decoupled decay (AdamW) on weight
    matrices, leaving biases alone."""

    def __init__(self, lr: float = 2e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def update(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay and k.startswith("W"):
                params[k] *= 1.0 - self.lr * self.weight_decay
            params[k] -= (self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)).astype(params[k].dtype)

    def state_arrays(self) -> dict:
        out = {}
        for k in self.m:
            out[f"adam_m/{k}"] = self.m[k]
            out[f"adam_v/{k}"] = self.v[k]
        return out

    def load_state(self, t: int, arrays: dict) -> None:
        self.t = int(t)
        for key, val in arrays.items():
            kind, name = key.split("/", 1)
            (self.m if kind == "adam_m" else self.v)[name] = np.array(val)


def numerical_gradients(net, x, actions, mask=None, h: float = 1e-5, smoothing: float = 0.0) -> dict:
    """Central finite differences of the loss for every parameter entry."""
    out = {}
    for name, p in net.params.items():
        g = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            lp = net.loss(x, actions, mask, smoothing)
            flat[j] = orig - h
            lm = net.loss(x, actions, mask, smoothing)
            flat[j] = orig
            gflat[j] = (lp - lm) / (2 * h)
        out[name] = g
    return out
