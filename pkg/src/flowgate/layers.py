"""Network layers operating on channels-last volumes ``(B, T, H, W, C)``."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, as_tensor, make_result, note_branch

# Upper bound on the im2col scratch buffer per chunk.
_COLS_BUDGET_BYTES = 48 * 2**20


def _as5d(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 5:
        return x, False
    if x.ndim == 4:
        return _expand(x), True
    raise ValueError(f"expected a (B,)T,H,W,C volume, got shape {x.shape}")


def _expand(x: Tensor) -> Tensor:
    shape = x.shape
    return make_result(x.data[None], (x,), lambda g: (g.reshape(shape),), "expand")


def _squeeze(x: Tensor) -> Tensor:
    shape = x.shape
    return make_result(x.data[0], (x,), lambda g: (g.reshape(shape),), "squeeze")


# -- convolution -------------------------------------------------------------

def _frame_chunks(T: int, H: int, W: int, K: int, itemsize: int):
    per_frame = max(1, H * W * K * itemsize)
    step = max(1, min(T, _COLS_BUDGET_BYTES // per_frame))
    for t0 in range(0, T, step):
        yield t0, min(T, t0 + step)


def _offsets(kernel):
    kT, kH, kW = kernel
    for a in range(kT):
        for b in range(kH):
            for c in range(kW):
                yield a, b, c


def _im2col(xp: np.ndarray, t0: int, t1: int, kernel, H: int, W: int) -> np.ndarray:
    """Patches of one padded sample for output frames ``t0:t1``.

    Column order is (kt, kh, kw, cin), matching ``weight.reshape(-1, cout)``.
    """
    C = xp.shape[-1]
    n_off = kernel[0] * kernel[1] * kernel[2]
    cols = np.empty((t1 - t0, H, W, n_off * C), dtype=xp.dtype)
    for k, (a, b, c) in enumerate(_offsets(kernel)):
        cols[..., k * C:(k + 1) * C] = xp[t0 + a:t1 + a, b:b + H, c:c + W]
    return cols


def conv3d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-size, stride-1 3-D cross-correlation plus bias.

    ``weight`` is ``(kT, kH, kW, Cin, Cout)`` with odd kernel extents; the
    input is zero padded by half the kernel on each side.
    """
    x, squeezed = _as5d(as_tensor(x))
    kT, kH, kW, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv3d channel mismatch: input has {x.shape[-1]} channels, kernel expects {cin}")
    if not (kT % 2 and kH % 2 and kW % 2):
        raise ValueError(f"conv3d needs odd kernel extents, got {(kT, kH, kW)}")
    B, T, H, W, _ = x.shape
    kernel = (kT, kH, kW)
    pad = ((0, 0), (kT // 2, kT // 2), (kH // 2, kH // 2), (kW // 2, kW // 2), (0, 0))
    K = kT * kH * kW * cin
    wm = weight.data.reshape(K, cout)
    dtype = np.result_type(x.data, weight.data)
    xp = np.pad(x.data, pad)
    out = np.empty((B, T, H, W, cout), dtype=dtype)
    for bi in range(B):
        for t0, t1 in _frame_chunks(T, H, W, K, xp.itemsize):
            cols = _im2col(xp[bi], t0, t1, kernel, H, W)
            out[bi, t0:t1] = (cols.reshape(-1, K) @ wm).reshape(t1 - t0, H, W, cout)
    del xp
    out += bias.data

    def bw(g):
        xp = np.pad(x.data, pad)
        dxp = np.zeros_like(xp) if x.requires_grad else None
        dw = np.zeros((K, cout), dtype=dtype)
        for bi in range(B):
            for t0, t1 in _frame_chunks(T, H, W, K, xp.itemsize):
                gm = g[bi, t0:t1].reshape(-1, cout)
                cols = _im2col(xp[bi], t0, t1, kernel, H, W)
                dw += cols.reshape(-1, K).T @ gm
                if dxp is not None:
                    dcols = (gm @ wm.T).reshape(t1 - t0, H, W, K)
                    for k, (a, b, c) in enumerate(_offsets(kernel)):
                        dxp[bi, t0 + a:t1 + a, b:b + H, c:c + W] += dcols[..., k * cin:(k + 1) * cin]
        dx = None
        if dxp is not None:
            dx = dxp[:, pad[1][0]:pad[1][0] + T, pad[2][0]:pad[2][0] + H, pad[3][0]:pad[3][0] + W]
            dx = np.ascontiguousarray(dx)
        db = g.sum(axis=(0, 1, 2, 3))
        return dx, dw.reshape(weight.shape), db

    out_t = make_result(out, (x, weight, bias), bw, "conv3d")
    return _squeeze(out_t) if squeezed else out_t


# -- pooling -------------------------------------------------------------------

def maxpool3d(x: Tensor, window) -> Tensor:
    """Non-overlapping max pooling; gradient goes to the first argmax per window."""
    x, squeezed = _as5d(as_tensor(x))
    pT, pH, pW = window
    B, T, H, W, C = x.shape
    for axis, n, p in (("T", T, pT), ("H", H, pH), ("W", W, pW)):
        if n % p:
            raise ValueError(f"maxpool3d: axis {axis} of length {n} is not divisible by window {p}")
    oT, oH, oW = T // pT, H // pH, W // pW
    win = (x.data.reshape(B, oT, pT, oH, pH, oW, pW, C)
           .transpose(0, 1, 3, 5, 7, 2, 4, 6)
           .reshape(B, oT, oH, oW, C, pT * pH * pW))
    arg = win.argmax(axis=-1)
    note_branch(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    del win

    def bw(g):
        dwin = np.zeros((B, oT, oH, oW, C, pT * pH * pW), dtype=g.dtype)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dx = (dwin.reshape(B, oT, oH, oW, C, pT, pH, pW)
              .transpose(0, 1, 5, 2, 6, 3, 7, 4)
              .reshape(B, T, H, W, C))
        return (dx,)

    out_t = make_result(np.ascontiguousarray(out), (x,), bw, "maxpool3d")
    return _squeeze(out_t) if squeezed else out_t


def global_maxpool(x: Tensor) -> Tensor:
    """Reduce ``(B, T, H, W, C)`` to ``(B, C)`` by a max over all positions."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise ValueError(f"global_maxpool expects a 5-D tensor, got {x.shape}")
    B, C = x.shape[0], x.shape[-1]
    flat = x.data.reshape(B, -1, C)
    arg = flat.argmax(axis=1)
    note_branch(arg)
    out = np.take_along_axis(flat, arg[:, None, :], axis=1)[:, 0, :]

    def bw(g):
        d = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(d, arg[:, None, :], g[:, None, :], axis=1)
        return (d.reshape(x.shape),)

    return make_result(np.ascontiguousarray(out), (x,), bw, "global_maxpool")


# -- activations -----------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    note_branch(mask)
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


# -- dense and loss ----------------------------------------------------------------

def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense input {x.shape} does not match weights {weight.shape}")

    def bw(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return make_result(x.data @ weight.data + bias.data, (x, weight, bias), bw, "dense")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels, n_classes: int = 2) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood over the batch; returns ``(loss, probs)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise ValueError(f"logits {logits.shape} do not match {labels.size} labels")
    if labels.size == 0:
        raise ValueError("softmax_cross_entropy needs at least one sample")
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]) or logits.shape[1] != n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes}); got {labels.tolist()}")
    B = labels.size
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    probs = np.exp(logp)
    loss = -logp[np.arange(B), labels].mean()

    def bw(g):
        d = probs.copy()
        d[np.arange(B), labels] -= 1
        return (d * (g / B),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "softmax_ce"), probs


# -- parameterised layers --------------------------------------------------------------

class Conv3d:
    def __init__(self, kernel, cin: int, cout: int, name: str = "conv"):
        self.kernel = tuple(kernel)
        self.cin, self.cout = cin, cout
        self.name = name
        self.weight = Tensor(np.zeros(self.kernel + (cin, cout)), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias")

    @property
    def fan_in(self) -> int:
        return math.prod(self.kernel) * self.cin

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def param_count(self) -> int:
        return math.prod(self.kernel) * self.cin * self.cout + self.cout

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias)

    def __repr__(self):
        k = "x".join(map(str, self.kernel))
        return f"Conv3d({k}, {self.cin}->{self.cout})"


class MaxPool3d:
    def __init__(self, window):
        self.window = tuple(window)

    def parameters(self) -> list[Tensor]:
        return []

    def param_count(self) -> int:
        return 0

    def __call__(self, x: Tensor) -> Tensor:
        return maxpool3d(x, self.window)

    def __repr__(self):
        return f"MaxPool3d({'x'.join(map(str, self.window))})"


class Dense:
    def __init__(self, din: int, dout: int, name: str = "fc"):
        self.din, self.dout = din, dout
        self.name = name
        self.weight = Tensor(np.zeros((din, dout)), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(dout), requires_grad=True, name=f"{name}.bias")

    fan_in = property(lambda self: self.din)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def param_count(self) -> int:
        return self.din * self.dout + self.dout

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias)

    def __repr__(self):
        return f"Dense({self.din}->{self.dout})"


def sepconv3d_block(x: Tensor, spatial: Conv3d, temporal: Conv3d, activation=relu) -> Tensor:
    """Spatial ``1xkxk`` conv followed by temporal ``kx1x1`` conv, each activated.

    ``activation`` may also be a pair ``(after_spatial, after_temporal)``; pass
    ``None`` to skip an activation.
    """
    if spatial.cout != temporal.cin:
        raise ValueError(f"separable pair width mismatch: {spatial.cout} -> {temporal.cin}")
    first, second = activation if isinstance(activation, tuple) else (activation, activation)
    h = spatial(x)
    if first is not None:
        h = first(h)
    h = temporal(h)
    if second is not None:
        h = second(h)
    return h
