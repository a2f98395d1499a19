"""Fused numpy kernels with hand-written backward passes.

Convolution, batch normalization, pooling, linear maps, the loss and the
quadratic attention core are each a single tape node. Composing them from
elementwise primitives would work but would make BPTT at desk scale far too
slow in pure Python.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .instrument import count_ops, op_scope, record_alloc
from .tensor import ContractError, DimensionError, Function, Tensor

# Cap on the N x N scratch buffer of one attention chunk.
ATTN_CHUNK_BYTES = 64 * 2**20


class Conv2d(Function):
    def forward(self, x, w, stride=1, padding=0):
        if x.ndim != 4:
            raise DimensionError(f"conv2d expects [M,C,H,W], got {x.shape}")
        if x.shape[1] != w.shape[1]:
            raise DimensionError(f"conv2d input {x.shape} does not match weight {w.shape}")
        k = w.shape[-1]
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        m, c, ho, wo = win.shape[:4]
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
        count_ops(m * ho * wo * w.shape[0] * c * k * k)
        self.save(xp, w, stride, padding, x.shape)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad):
        xp, w, stride, padding, xshape = self.saved
        k = w.shape[-1]
        ho, wo = grad.shape[2:]
        gw = gx = None
        if self.needs[1]:
            win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
            gw = np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3]))
        if self.needs[0]:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    tap = np.tensordot(grad, w[:, :, i, j], axes=([1], [0]))
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += tap.transpose(
                        0, 3, 1, 2
                    )
            gx = gxp[:, :, padding : padding + xshape[2], padding : padding + xshape[3]] if padding else gxp
        return gx, gw


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, w, stride=stride, padding=padding)


class Conv1d(Function):
    def forward(self, x, w, padding=0):
        if x.ndim != 3:
            raise DimensionError(f"conv1d expects [M,C,L], got {x.shape}")
        if x.shape[1] != w.shape[1]:
            raise DimensionError(f"conv1d input {x.shape} does not match weight {w.shape}")
        k = w.shape[-1]
        m, c, length = x.shape
        if k == 1:
            out = np.matmul(w[:, :, 0], x)
            self.save(x, w, padding)
        else:
            xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
            win = sliding_window_view(xp, k, axis=2)
            out = np.tensordot(win, w, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
            self.save(xp, w, padding)
        lo = out.shape[-1]
        count_ops(m * lo * w.shape[0] * c * k)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        xp, w, padding = self.saved
        k = w.shape[-1]
        gx = gw = None
        if k == 1:
            if self.needs[1]:
                gw = np.einsum("mon,mcn->oc", grad, xp)[:, :, None]
            if self.needs[0]:
                gx = np.matmul(w[:, :, 0].T, grad)
            return gx, gw
        lo = grad.shape[-1]
        if self.needs[1]:
            win = sliding_window_view(xp, k, axis=2)
            gw = np.tensordot(grad, win, axes=([0, 2], [0, 2]))
        if self.needs[0]:
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxp[:, :, i : i + lo] += np.matmul(w[:, :, i].T, grad)
            gx = gxp[:, :, padding : xp.shape[-1] - padding] if padding else gxp
        return gx, gw


def conv1d(x: Tensor, w: Tensor, padding: int = 0) -> Tensor:
    return Conv1d.apply(x, w, padding=padding)


class Linear(Function):
    def forward(self, x, w, b=None):
        if x.shape[-1] != w.shape[1]:
            raise DimensionError(f"linear input {x.shape} does not match weight {w.shape}")
        self.save(x, w)
        count_ops(x.size // x.shape[-1] * w.shape[0] * w.shape[1])
        out = x @ w.T
        return out + b if b is not None else out

    def backward(self, grad):
        x, w = self.saved
        g2 = grad.reshape(-1, grad.shape[-1])
        gx = grad @ w if self.needs[0] else None
        gw = g2.T @ x.reshape(-1, x.shape[-1]) if self.needs[1] else None
        if len(self.needs) > 2:
            return gx, gw, g2.sum(axis=0)
        return gx, gw


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    return Linear.apply(x, w) if b is None else Linear.apply(x, w, b)


class BatchNorm(Function):
    def forward(self, x, gamma, beta, axis=1, stats=None, training=True, momentum=0.1, eps=1e-5):
        c = x.shape[axis]
        if gamma.shape != (c,):
            raise DimensionError(f"batchnorm over axis {axis} of {x.shape} needs {c} channels, got {gamma.shape}")
        red = tuple(i for i in range(x.ndim) if i != axis)
        n = x.size // c
        bshape = [1] * x.ndim
        bshape[axis] = c
        if training:
            if n < 1:
                raise ContractError("batchnorm needs a non-empty batch")
            mu = x.mean(axis=red)
            var = x.var(axis=red)
            if stats is not None:
                stats["mean"] *= 1 - momentum
                stats["mean"] += momentum * mu
                unbiased = var * n / max(n - 1, 1)
                stats["var"] *= 1 - momentum
                stats["var"] += momentum * unbiased
        else:
            mu, var = stats["mean"], stats["var"]
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu.reshape(bshape)) * inv.reshape(bshape)
        self.save(xhat, gamma, inv, bshape, red, n, training)
        return (xhat * gamma.reshape(bshape) + beta.reshape(bshape)).astype(x.dtype, copy=False)

    def backward(self, grad):
        xhat, gamma, inv, bshape, red, n, training = self.saved
        gg = (grad * xhat).sum(axis=red) if self.needs[1] else None
        gb = grad.sum(axis=red) if self.needs[2] else None
        gx = None
        if self.needs[0]:
            gy = grad * gamma.reshape(bshape)
            if training:
                s1 = gy.sum(axis=red, keepdims=True)
                s2 = (gy * xhat).sum(axis=red, keepdims=True)
                gx = inv.reshape(bshape) / n * (n * gy - s1 - xhat * s2)
            else:
                gx = gy * inv.reshape(bshape)
        return gx, gg, gb


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    axis: int,
    stats: dict[str, np.ndarray] | None,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    return BatchNorm.apply(
        x, gamma, beta, axis=axis, stats=stats, training=training, momentum=momentum, eps=eps
    )


class MaxPool2d(Function):
    def forward(self, x):
        m, c, h, w = x.shape
        if h % 2 or w % 2:
            raise DimensionError(f"max-pool 2x2 needs even spatial dims, got {x.shape}")
        blocks = x.reshape(m, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(m, c, h // 2, w // 2, 4)
        # argmax returns the first maximal index, giving a deterministic tie-break.
        idx = blocks.argmax(axis=-1)
        self.save(idx, x.shape)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        idx, shape = self.saved
        m, c, h, w = shape
        g = np.zeros((m, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(g, idx[..., None], grad[..., None], axis=-1)
        g = g.reshape(m, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)
        return (g,)


def maxpool2d(x: Tensor) -> Tensor:
    return MaxPool2d.apply(x)


class CrossEntropy(Function):
    def forward(self, logits, labels=None):
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        b = logits.shape[0]
        self.save(np.exp(logp), labels)
        return np.asarray(-logp[np.arange(b), labels].mean(), dtype=logits.dtype)

    def backward(self, grad):
        p, labels = self.saved
        g = p.copy()
        g[np.arange(len(labels)), labels] -= 1
        return (g * (grad / len(labels)),)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    return CrossEntropy.apply(logits, labels=np.asarray(labels, dtype=np.int64))


def _chunks(groups: int, n: int, itemsize: int) -> list[slice]:
    per = max(1, ATTN_CHUNK_BYTES // max(1, n * n * itemsize))
    return [slice(i, min(i + per, groups)) for i in range(0, groups, per)]


class QKTV(Function):
    """``(Q Kᵀ) V · s`` over leading group axes, materializing Q Kᵀ per chunk."""

    def forward(self, q, k, v, s):
        if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
            raise DimensionError(f"attention operands {q.shape}, {k.shape}, {v.shape} disagree")
        lead = q.shape[:-2]
        n, ch = q.shape[-2:]
        q3, k3, v3 = (a.reshape(-1, n, a.shape[-1]) for a in (q, k, v))
        g = q3.shape[0]
        raw = np.empty(v3.shape, dtype=q.dtype)
        for sl in _chunks(g, n, q.dtype.itemsize):
            attn = np.matmul(q3[sl], np.swapaxes(k3[sl], 1, 2))
            record_alloc(attn.nbytes)
            raw[sl] = np.matmul(attn, v3[sl])
        with op_scope("qk"):
            count_ops(g * n * n * ch)
        with op_scope("av"):
            count_ops(g * n * n * v3.shape[-1])
        self.save(q3, k3, v3, s, raw, lead)
        return (raw * s).reshape(lead + v3.shape[1:])

    def backward(self, grad):
        q3, k3, v3, s, raw, lead = self.saved
        n = q3.shape[1]
        g3 = grad.reshape(raw.shape)
        gs = np.asarray((g3 * raw).sum(), dtype=s.dtype).reshape(s.shape)
        gu = g3 * s
        gq, gk, gv = np.empty_like(q3), np.empty_like(k3), np.empty_like(v3)
        for sl in _chunks(q3.shape[0], n, q3.dtype.itemsize):
            attn = np.matmul(q3[sl], np.swapaxes(k3[sl], 1, 2))
            gattn = np.matmul(gu[sl], np.swapaxes(v3[sl], 1, 2))
            gq[sl] = np.matmul(gattn, k3[sl])
            gk[sl] = np.matmul(np.swapaxes(gattn, 1, 2), q3[sl])
            gv[sl] = np.matmul(np.swapaxes(attn, 1, 2), gu[sl])
        shape = lead + q3.shape[1:]
        return gq.reshape(shape), gk.reshape(shape), gv.reshape(lead + v3.shape[1:]), gs


def qktv(q: Tensor, k: Tensor, v: Tensor, s: Tensor) -> Tensor:
    """Softmax-free attention product ``Q Kᵀ V × s`` (quadratic in tokens)."""
    return QKTV.apply(q, k, v, s)
