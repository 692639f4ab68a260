"""Numpy layers with explicit backward passes.

Every layer keeps its trainable arrays in ``params`` and, after ``backward``,
the matching gradients in ``grads``. Composite layers expose their children's
arrays under dotted names. Inputs to the network are ``(batch, channels, time)``.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import sparse as _sparse


def _uniform(rng, shape, fan_in):
    limit = math.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, shape)


# CSR products beat dense BLAS only for a few rows against a large, mostly-zero
# matrix; below these sizes the call overhead dominates.
SPARSE_MAX_ROWS = 4
SPARSE_MIN_SIZE = 250_000
SPARSE_MAX_DENSITY = 0.4


def _sparse_pays(csr, rows):
    if csr is None or rows > SPARSE_MAX_ROWS:
        return False
    size = csr.shape[0] * csr.shape[1]
    return size >= SPARSE_MIN_SIZE and csr.nnz <= SPARSE_MAX_DENSITY * size


class Layer:
    prunable: tuple = ()

    def __init__(self):
        self.params: dict = {}
        self.grads: dict = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def children(self):
        return ()

    def named_params(self, prefix=""):
        for k, v in self.params.items():
            yield prefix + k, v
        for name, child in self.children():
            yield from child.named_params(f"{prefix}{name}.")

    def named_grads(self, prefix=""):
        for k, v in self.grads.items():
            yield prefix + k, v
        for name, child in self.children():
            yield from child.named_grads(f"{prefix}{name}.")

    def prunable_names(self, prefix=""):
        for k in self.prunable:
            yield prefix + k
        for name, child in self.children():
            yield from child.prunable_names(f"{prefix}{name}.")

    def invalidate(self):
        """Drop derived caches after parameters were replaced."""
        for _, child in self.children():
            child.invalidate()


class Dense(Layer):
    """Affine map over the last axis; any leading axes are batch-like."""

    prunable = ("W",)

    def __init__(self, n_in, n_out, rng):
        super().__init__()
        self.params["W"] = _uniform(rng, (n_in, n_out), n_in)
        self.params["b"] = np.zeros(n_out)
        self._csr = None

    def forward(self, x, train=False):
        self._x = x
        W = self.params["W"]
        flat = x.reshape(-1, x.shape[-1])
        if not train and _sparse_pays(self._csr, flat.shape[0]):
            # (W^T x^T)^T keeps the sparse operand on the left
            y = (self._csr @ flat.T).T.reshape(*x.shape[:-1], W.shape[1])
            return y + self.params["b"]
        return x @ W + self.params["b"]

    def backward(self, dy):
        x = self._x
        W = self.params["W"]
        xf = x.reshape(-1, x.shape[-1])
        dyf = dy.reshape(-1, dy.shape[-1])
        self.grads["W"] = xf.T @ dyf
        self.grads["b"] = dyf.sum(axis=0)
        return dy @ W.T

    def use_sparse(self, on: bool):
        self._csr = _sparse.csr_matrix(self.params["W"].T) if on else None

    def invalidate(self):
        if self._csr is not None:
            self.use_sparse(True)


class Conv1D(Layer):
    """Valid 1-D convolution. Weight ``(filters, in_channels, kernel)``; output length
    ``(T - kernel) // stride + 1``."""

    prunable = ("W",)

    def __init__(self, n_in, n_filters, kernel, stride, rng):
        super().__init__()
        self.kernel, self.stride = kernel, stride
        self.params["W"] = _uniform(rng, (n_filters, n_in, kernel), n_in * kernel)
        self.params["b"] = np.zeros(n_filters)
        self._csr = None

    @staticmethod
    def out_length(t, kernel, stride):
        return (t - kernel) // stride + 1

    def _cols(self, x):
        B, C, T = x.shape
        L = self.out_length(T, self.kernel, self.stride)
        if L < 1:
            raise ValueError(f"input length {T} shorter than kernel {self.kernel}")
        v = np.lib.stride_tricks.sliding_window_view(x, self.kernel, axis=2)[:, :, ::self.stride]
        return v.transpose(0, 2, 1, 3).reshape(B * L, C * self.kernel), L

    def forward(self, x, train=False):
        B = x.shape[0]
        cols, L = self._cols(x)
        self._shape = x.shape
        self._cols_cache = cols
        W = self.params["W"]
        F = W.shape[0]
        if not train and _sparse_pays(self._csr, cols.shape[0]):
            y = (self._csr @ cols.T).T
        else:
            y = cols @ W.reshape(F, -1).T
        y = y + self.params["b"]
        return y.reshape(B, L, F).transpose(0, 2, 1)

    def backward(self, dy):
        B, C, T = self._shape
        W = self.params["W"]
        F, _, K = W.shape
        L = dy.shape[2]
        dyf = dy.transpose(0, 2, 1).reshape(B * L, F)
        self.grads["W"] = (dyf.T @ self._cols_cache).reshape(W.shape)
        self.grads["b"] = dyf.sum(axis=0)
        dcols = (dyf @ W.reshape(F, -1)).reshape(B, L, C, K)
        dx = np.zeros(self._shape)
        s = self.stride
        for k in range(K):
            dx[:, :, k:k + s * (L - 1) + 1:s] += dcols[:, :, :, k].transpose(0, 2, 1)
        return dx

    def use_sparse(self, on: bool):
        W = self.params["W"]
        self._csr = _sparse.csr_matrix(W.reshape(W.shape[0], -1)) if on else None

    def invalidate(self):
        if self._csr is not None:
            self.use_sparse(True)


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class Pool1D(Layer):
    """Non-overlapping pooling of width 2 over time; a trailing odd sample is dropped."""

    def __init__(self, kind="max", size=2):
        super().__init__()
        if kind not in ("max", "avg"):
            raise ValueError(f"unknown pooling {kind!r}")
        self.kind, self.size = kind, size

    def forward(self, x, train=False):
        B, C, T = x.shape
        L = T // self.size
        if L < 1:
            raise ValueError("sequence too short to pool")
        v = x[:, :, :L * self.size].reshape(B, C, L, self.size)
        self._shape = x.shape
        if self.kind == "avg":
            return v.mean(axis=3)
        self._arg = v.argmax(axis=3)
        return np.take_along_axis(v, self._arg[..., None], axis=3)[..., 0]

    def backward(self, dy):
        B, C, T = self._shape
        L = dy.shape[2]
        dv = np.zeros((B, C, L, self.size))
        if self.kind == "avg":
            dv[...] = dy[..., None] / self.size
        else:
            np.put_along_axis(dv, self._arg[..., None], dy[..., None], axis=3)
        dx = np.zeros(self._shape)
        dx[:, :, :L * self.size] = dv.reshape(B, C, L * self.size)
        return dx

    @staticmethod
    def out_length(t, size=2):
        return t // size


class Flatten(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Transpose(Layer):
    """``(batch, channels, time)`` <-> ``(batch, time, channels)``."""

    def forward(self, x, train=False):
        return x.transpose(0, 2, 1)

    def backward(self, dy):
        return dy.transpose(0, 2, 1)


class Dropout(Layer):
    def __init__(self, rate, rng):
        super().__init__()
        self.rate, self.rng = rate, rng
        self._mask = None

    def forward(self, x, train=False):
        if not train or self.rate <= 0:
            self._mask = None
            return x
        self._mask = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class MeanPoolTime(Layer):
    """``(batch, time, d)`` -> ``(batch, d)``."""

    def forward(self, x, train=False):
        self._t = x.shape[1]
        return x.mean(axis=1)

    def backward(self, dy):
        return np.repeat(dy[:, None, :], self._t, axis=1) / self._t


class PositionalEmbedding(Layer):
    def __init__(self, length, dim, rng):
        super().__init__()
        self.params["P"] = rng.uniform(-0.1, 0.1, (length, dim))

    def forward(self, x, train=False):
        if x.shape[1] != self.params["P"].shape[0]:
            raise ValueError(f"sequence length {x.shape[1]} != embedding length "
                             f"{self.params['P'].shape[0]}")
        return x + self.params["P"]

    def backward(self, dy):
        self.grads["P"] = dy.sum(axis=0)
        return dy


class LayerNorm(Layer):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.params["gamma"] = np.ones(dim)
        self.params["beta"] = np.zeros(dim)

    def forward(self, x, train=False):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        self._xhat, self._inv = xhat, inv
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, dy):
        xhat, inv = self._xhat, self._inv
        d = xhat.shape[-1]
        self.grads["gamma"] = (dy * xhat).reshape(-1, d).sum(axis=0)
        self.grads["beta"] = dy.reshape(-1, d).sum(axis=0)
        dxhat = dy * self.params["gamma"]
        return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class MultiHeadSelfAttention(Layer):
    prunable = ("Wq", "Wk", "Wv", "Wo")

    def __init__(self, dim, heads, rng):
        super().__init__()
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        for n in ("q", "k", "v", "o"):
            self.params["W" + n] = _uniform(rng, (dim, dim), dim)
            self.params["b" + n] = np.zeros(dim)

    def _split(self, x):
        B, T, _ = x.shape
        return x.reshape(B, T, self.heads, -1).transpose(0, 2, 1, 3)

    def _merge(self, x):
        B, H, T, dk = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, T, H * dk)

    def forward(self, x, train=False):
        p = self.params
        q = self._split(x @ p["Wq"] + p["bq"])
        k = self._split(x @ p["Wk"] + p["bk"])
        v = self._split(x @ p["Wv"] + p["bv"])
        scale = 1.0 / math.sqrt(q.shape[-1])
        a = _softmax(q @ k.transpose(0, 1, 3, 2) * scale)
        o = self._merge(a @ v)
        self._cache = (x, q, k, v, a, o, scale)
        return o @ p["Wo"] + p["bo"]

    def backward(self, dy):
        p = self.params
        x, q, k, v, a, o, scale = self._cache
        d = self.dim
        self.grads["Wo"] = o.reshape(-1, d).T @ dy.reshape(-1, d)
        self.grads["bo"] = dy.reshape(-1, d).sum(axis=0)
        do = self._split(dy @ p["Wo"].T)
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True))
        dq = (ds @ k) * scale
        dk = (ds.transpose(0, 1, 3, 2) @ q) * scale
        dx = np.zeros_like(x)
        xf = x.reshape(-1, d)
        for n, g in (("q", dq), ("k", dk), ("v", dv)):
            gm = self._merge(g)
            self.grads["W" + n] = xf.T @ gm.reshape(-1, d)
            self.grads["b" + n] = gm.reshape(-1, d).sum(axis=0)
            dx += gm @ p["W" + n].T
        return dx


class FeedForward(Layer):
    def __init__(self, dim, hidden, rng):
        super().__init__()
        self.fc1 = Dense(dim, hidden, rng)
        self.act = ReLU()
        self.fc2 = Dense(hidden, dim, rng)

    def children(self):
        return (("fc1", self.fc1), ("fc2", self.fc2))

    def forward(self, x, train=False):
        return self.fc2.forward(self.act.forward(self.fc1.forward(x, train), train), train)

    def backward(self, dy):
        return self.fc1.backward(self.act.backward(self.fc2.backward(dy)))


class TransformerBlock(Layer):
    """Post-norm encoder block: ``LN(x + attn(x))`` then ``LN(h + ffn(h))``."""

    def __init__(self, dim, heads, ffn_dim, dropout, rng):
        super().__init__()
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.drop1 = Dropout(dropout, rng)
        self.norm1 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng)
        self.drop2 = Dropout(dropout, rng)
        self.norm2 = LayerNorm(dim)

    def children(self):
        return (("attn", self.attn), ("norm1", self.norm1),
                ("ffn", self.ffn), ("norm2", self.norm2))

    def forward(self, x, train=False):
        h = self.norm1.forward(x + self.drop1.forward(self.attn.forward(x, train), train), train)
        return self.norm2.forward(h + self.drop2.forward(self.ffn.forward(h, train), train), train)

    def backward(self, dy):
        dh = self.norm2.backward(dy)
        dh = dh + self.ffn.backward(self.drop2.backward(dh))
        dx = self.norm1.backward(dh)
        return dx + self.attn.backward(self.drop1.backward(dx))


class LSTM(Layer):
    """Single LSTM layer over ``(batch, time, features)``; gate order i, f, g, o.

    Returns the full hidden sequence, or only the last state when
    ``return_sequences`` is False.
    """

    prunable = ("W_ih", "W_hh")

    def __init__(self, n_in, hidden, rng, return_sequences=False):
        super().__init__()
        self.hidden = hidden
        self.return_sequences = return_sequences
        lim = 1.0 / math.sqrt(hidden)
        self.params["W_ih"] = rng.uniform(-lim, lim, (4 * hidden, n_in))
        self.params["W_hh"] = rng.uniform(-lim, lim, (4 * hidden, hidden))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.params["b"] = b

    def forward(self, x, train=False):
        p = self.params
        B, T, _ = x.shape
        H = self.hidden
        zx = x @ p["W_ih"].T + p["b"]
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        hs = np.empty((B, T + 1, H))
        cs = np.empty((B, T + 1, H))
        gates = np.empty((B, T, 4 * H))
        hs[:, 0], cs[:, 0] = h, c
        Whh = p["W_hh"].T
        for t in range(T):
            z = zx[:, t] + h @ Whh
            i = _sigmoid(z[:, :H])
            f = _sigmoid(z[:, H:2 * H])
            g = np.tanh(z[:, 2 * H:3 * H])
            o = _sigmoid(z[:, 3 * H:])
            c = f * c + i * g
            h = o * np.tanh(c)
            gates[:, t] = np.concatenate([i, f, g, o], axis=1)
            hs[:, t + 1], cs[:, t + 1] = h, c
        self._cache = (x, hs, cs, gates)
        return hs[:, 1:] if self.return_sequences else h

    def backward(self, dy):
        p = self.params
        x, hs, cs, gates = self._cache
        B, T, _ = x.shape
        H = self.hidden
        if self.return_sequences:
            dh_seq = dy
        else:
            dh_seq = np.zeros((B, T, H))
            dh_seq[:, -1] = dy
        dz = np.empty((B, T, 4 * H))
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        Whh = p["W_hh"]
        for t in range(T - 1, -1, -1):
            dh = dh + dh_seq[:, t]
            gt = gates[:, t]
            i, f, g, o = gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:]
            tc = np.tanh(cs[:, t + 1])
            dc = dc + dh * o * (1.0 - tc * tc)
            dzt = dz[:, t]
            dzt[:, :H] = dc * g * i * (1.0 - i)
            dzt[:, H:2 * H] = dc * cs[:, t] * f * (1.0 - f)
            dzt[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
            dzt[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dc = dc * f
            dh = dzt @ Whh
        dzf = dz.reshape(-1, 4 * H)
        self.grads["W_ih"] = dzf.T @ x.reshape(-1, x.shape[2])
        self.grads["W_hh"] = dzf.T @ hs[:, :-1].reshape(-1, H)
        self.grads["b"] = dzf.sum(axis=0)
        return dz @ p["W_ih"]


def softmax_cross_entropy(logits, labels):
    """Mean categorical cross-entropy and its gradient with respect to the logits."""
    p = _softmax(logits)
    n = len(labels)
    loss = -np.mean(np.log(np.clip(p[np.arange(n), labels], 1e-300, None)))
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n, p


softmax = _softmax
