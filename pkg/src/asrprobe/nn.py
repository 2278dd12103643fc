"""Minimal deterministic neural-network kernel.

Dense, ReLU, Highway, bidirectional LSTM, 3x3 convolution and 2x2
max-pool layers, each pairing a forward pass with a hand-written
backward pass, plus Adam and a binary checkpoint format.

Parameters are stored at float32 precision (quantized after every
update) while all arithmetic runs in float64, so checkpoint round-trips
are bit-exact and forward passes are reproducible.
"""

import struct

import numpy as np

from .errors import (
    FormatError,
    IncompatibleCheckpointError,
    NumericError,
    ShapeError,
)


def _f32(x: np.ndarray) -> np.ndarray:
    """Snap to float32-representable values, kept as float64 for math."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    k = 1.0 / np.sqrt(fan_in)
    return _f32(rng.uniform(-k, k, size=shape))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


class Layer:
    """Base layer: named parameters with matching gradient buffers."""

    def __init__(self):
        self.params = {}
        self.grads = {}

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _acc(self, name, g):
        if name in self.grads:
            self.grads[name] = self.grads[name] + g
        else:
            self.grads[name] = g


class Dense(Layer):
    def __init__(self, d_in, d_out, rng):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.params = {
            "W": uniform_init(rng, (d_in, d_out), d_in),
            "b": np.zeros(d_out),
        }

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Dense expects dim {self.d_in}, got {x.shape[-1]}")
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        self._acc("W", self._x.T @ dout)
        self._acc("b", dout.sum(axis=0))
        return dout @ self.params["W"].T


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0.0)


class Highway(Layer):
    """y = T(x) * H(x) + (1 - T(x)) * x with ReLU transform branch.

    Transform-gate bias starts at -1 so the layer initially carries.
    """

    def __init__(self, d, rng):
        super().__init__()
        self.d = d
        self.params = {
            "Wh": uniform_init(rng, (d, d), d),
            "bh": np.zeros(d),
            "Wt": uniform_init(rng, (d, d), d),
            "bt": np.full(d, -1.0),
        }

    def forward(self, x):
        if x.shape[-1] != self.d:
            raise ShapeError(f"Highway expects dim {self.d}, got {x.shape[-1]}")
        p = self.params
        self._x = x
        self._hpre = x @ p["Wh"] + p["bh"]
        self._h = np.maximum(self._hpre, 0.0)
        self._t = sigmoid(x @ p["Wt"] + p["bt"])
        return self._t * self._h + (1.0 - self._t) * x

    def backward(self, dout):
        p = self.params
        x, h, t = self._x, self._h, self._t
        dh = dout * t
        dt = dout * (h - x)
        dx = dout * (1.0 - t)
        dhpre = dh * (self._hpre > 0)
        dtpre = dt * t * (1.0 - t)
        self._acc("Wh", x.T @ dhpre)
        self._acc("bh", dhpre.sum(axis=0))
        self._acc("Wt", x.T @ dtpre)
        self._acc("bt", dtpre.sum(axis=0))
        return dx + dhpre @ p["Wh"].T + dtpre @ p["Wt"].T


class _LstmCell:
    """Unidirectional LSTM over a (T, d_in) sequence. Gate order i,f,o,g."""

    def __init__(self, d_in, d_h, rng, prefix):
        self.d_in, self.d_h = d_in, d_h
        b = np.zeros(4 * d_h)
        b[d_h:2 * d_h] = 1.0  # forget-gate bias
        self.prefix = prefix
        self.params = {
            prefix + "W": uniform_init(rng, (d_in, 4 * d_h), d_in),
            prefix + "U": uniform_init(rng, (d_h, 4 * d_h), d_h),
            prefix + "b": b,
        }

    def forward(self, x):
        T = x.shape[0]
        h = self.d_h
        p = self.params
        ax = x @ p[self.prefix + "W"] + p[self.prefix + "b"]
        U = p[self.prefix + "U"]
        self._x = x
        self._i = np.zeros((T, h)); self._f = np.zeros((T, h))
        self._o = np.zeros((T, h)); self._g = np.zeros((T, h))
        self._c = np.zeros((T, h)); self._tc = np.zeros((T, h))
        self._hprev = np.zeros((T, h))
        hs = np.zeros((T, h))
        h_t = np.zeros(h)
        c_t = np.zeros(h)
        for t in range(T):
            self._hprev[t] = h_t
            a = ax[t] + h_t @ U
            i = sigmoid(a[:h]); f = sigmoid(a[h:2 * h])
            o = sigmoid(a[2 * h:3 * h]); g = np.tanh(a[3 * h:])
            c_t = f * c_t + i * g
            tc = np.tanh(c_t)
            h_t = o * tc
            self._i[t], self._f[t], self._o[t], self._g[t] = i, f, o, g
            self._c[t], self._tc[t] = c_t, tc
            hs[t] = h_t
        return hs

    def backward(self, dout):
        T = dout.shape[0]
        h = self.d_h
        p = self.params
        U = p[self.prefix + "U"]
        da = np.zeros((T, 4 * h))
        dh_next = np.zeros(h)
        dc_next = np.zeros(h)
        for t in range(T - 1, -1, -1):
            dh = dout[t] + dh_next
            i, f, o, g = self._i[t], self._f[t], self._o[t], self._g[t]
            tc = self._tc[t]
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next
            c_prev = self._c[t - 1] if t > 0 else np.zeros(h)
            di = dc * g
            df = dc * c_prev
            dg = dc * i
            dc_next = dc * f
            da[t, :h] = di * i * (1.0 - i)
            da[t, h:2 * h] = df * f * (1.0 - f)
            da[t, 2 * h:3 * h] = do * o * (1.0 - o)
            da[t, 3 * h:] = dg * (1.0 - g * g)
            dh_next = da[t] @ U.T
        grads = {
            self.prefix + "W": self._x.T @ da,
            self.prefix + "U": self._hprev.T @ da,
            self.prefix + "b": da.sum(axis=0),
        }
        dx = da @ p[self.prefix + "W"].T
        return dx, grads


class BiLSTM(Layer):
    """Bidirectional LSTM; per-frame concat of forward and backward outputs."""

    def __init__(self, d_in, d_h, rng):
        super().__init__()
        self.d_in, self.d_h = d_in, d_h
        self.fwd = _LstmCell(d_in, d_h, rng, "fwd_")
        self.bwd = _LstmCell(d_in, d_h, rng, "bwd_")
        self.params = {**self.fwd.params, **self.bwd.params}

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeError(f"BiLSTM expects (T, {self.d_in}), got {x.shape}")
        self.fwd.params = {k: self.params[k] for k in self.fwd.params}
        self.bwd.params = {k: self.params[k] for k in self.bwd.params}
        hf = self.fwd.forward(x)
        hb = self.bwd.forward(x[::-1])[::-1]
        return np.concatenate([hf, hb], axis=1)

    def backward(self, dout):
        h = self.d_h
        dxf, gf = self.fwd.backward(dout[:, :h])
        dxb, gb = self.bwd.backward(dout[::-1, h:])
        for k, v in {**gf, **gb}.items():
            self._acc(k, v)
        return dxf + dxb[::-1]


class Conv2d(Layer):
    """3x3 convolution, stride 1, same padding, on (C, H, W) inputs."""

    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        fan_in = c_in * 9
        self.params = {
            "W": uniform_init(rng, (fan_in, c_out), fan_in),
            "b": np.zeros(c_out),
        }

    def _im2col(self, xp, H, W):
        cols = []
        for dy in range(3):
            for dx in range(3):
                cols.append(xp[:, dy:dy + H, dx:dx + W].reshape(self.c_in, -1))
        # (H*W, C*9) with channel-major patch layout
        return np.concatenate(cols, axis=0).T

    def forward(self, x):
        if x.ndim != 3 or x.shape[0] != self.c_in:
            raise ShapeError(f"Conv2d expects ({self.c_in}, H, W), got {x.shape}")
        C, H, W = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        col = self._im2col(xp, H, W)
        self._col, self._shape = col, (H, W)
        y = col @ self.params["W"] + self.params["b"]
        return y.T.reshape(self.c_out, H, W)

    def backward(self, dout):
        H, W = self._shape
        dy = dout.reshape(self.c_out, -1).T
        self._acc("W", self._col.T @ dy)
        self._acc("b", dy.sum(axis=0))
        dcol = dy @ self.params["W"].T
        dxp = np.zeros((self.c_in, H + 2, W + 2))
        k = 0
        for dyo in range(3):
            for dxo in range(3):
                block = dcol[:, k * self.c_in:(k + 1) * self.c_in].T
                dxp[:, dyo:dyo + H, dxo:dxo + W] += block.reshape(self.c_in, H, W)
                k += 1
        return dxp[:, 1:-1, 1:-1]


class MaxPool2x2(Layer):
    """2x2 max-pool, stride 2, ceil mode (odd edges padded with -inf)."""

    def forward(self, x):
        C, H, W = x.shape
        H2, W2 = -(-H // 2), -(-W // 2)
        xp = np.full((C, H2 * 2, W2 * 2), -np.inf)
        xp[:, :H, :W] = x
        r = xp.reshape(C, H2, 2, W2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H2, W2, 4)
        self._argmax = r.argmax(axis=3)
        self._in_shape = (C, H, W)
        return r.max(axis=3)

    def backward(self, dout):
        C, H, W = self._in_shape
        H2, W2 = dout.shape[1], dout.shape[2]
        dxp = np.zeros((C, H2, W2, 4))
        np.put_along_axis(dxp, self._argmax[..., None], dout[..., None], axis=3)
        dxp = dxp.reshape(C, H2, W2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H2 * 2, W2 * 2)
        return dxp[:, :H, :W]


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a {name: param} dict."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** self.t)
            vhat = self.v[name] / (1 - b2 ** self.t)
            params[name] = _f32(p - self.lr * mhat / (np.sqrt(vhat) + self.eps))


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"LAUD"
CKPT_VERSION = 1


def save_checkpoint(params: dict, arch_descriptor: str, path) -> None:
    """Little-endian binary checkpoint; parameters stored as float32."""
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    desc = arch_descriptor.encode("utf-8")
    out.append(struct.pack("<I", len(desc)))
    out.append(desc)
    out.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(out))


def load_checkpoint(path) -> tuple[str, dict]:
    """Returns (arch_descriptor, {name: float64 array of f32 values})."""
    with open(path, "rb") as f:
        data = f.read()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint version {version}, expected {CKPT_VERSION}"
        )
    (dlen,) = struct.unpack("<I", take(4))
    desc = bytes(take(dlen)).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        params[name] = arr.astype(np.float64)
    return desc, params


# ---------------------------------------------------------------------------
# Finite differences (shared by the test oracles)
# ---------------------------------------------------------------------------

def finite_difference(fn, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar fn at x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g
