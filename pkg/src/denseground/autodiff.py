"""Dense-tensor engine with reverse-mode differentiation.

Everything runs on float64 numpy arrays. A Tensor wraps one array and
remembers which tensors produced it, so backward() can replay the tape
once in reverse topological order. The op set is exactly what the
grounding pipeline needs; every op has a closed-form gradient that
grad_check() verifies against central finite differences.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

# Additive attention-mask sentinel. Large but finite so all arithmetic stays
# finite; exp(NEG_INF - rowmax) underflows to exactly 0 in float64.
NEG_INF = -1.0e9

_BCE_EPS = 1e-7

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / FD probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(op={self._op}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the named module-level functions are the public op set
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        """Populate .grad on every reachable requires_grad tensor.

        Single reverse-topological pass; only valid on scalar outputs.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list:
    """Post-order DFS over the requires_grad subgraph, iterative."""
    order = []
    visited = {id(root)}
    stack = [(root, iter(root._prev))]
    while stack:
        node, children = stack[-1]
        advanced = False
        for child in children:
            if child.requires_grad and id(child) not in visited:
                visited.add(id(child))
                stack.append((child, iter(child._prev)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def computation_record(root: Tensor) -> list:
    """Ordered tape feeding `root`: (op name, input ids, output id) triples."""
    return [(n._op, tuple(id(p) for p in n._prev), id(n)) for n in _toposort(root)]


def _make(data: np.ndarray, parents: tuple, op: str) -> Tensor:
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = parents
    return out


def _acc(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _unbroadcast(shape: tuple, g: np.ndarray) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw():
            _acc(a, _unbroadcast(a.data.shape, out.grad))
            _acc(b, _unbroadcast(b.data.shape, out.grad))
        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _bw():
            _acc(a, _unbroadcast(a.data.shape, out.grad))
            _acc(b, _unbroadcast(b.data.shape, -out.grad))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bw():
            _acc(a, _unbroadcast(a.data.shape, out.grad * b.data))
            _acc(b, _unbroadcast(b.data.shape, out.grad * a.data))
        out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    out = _make(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _bw():
            _acc(a, out.grad @ b.data.T)
            _acc(b, a.data.T @ out.grad)
        out._backward = _bw
    return out


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    out = _make(x.data.T.copy(), (x,), "transpose")
    if out.requires_grad:
        def _bw():
            _acc(x, out.grad.T)
        out._backward = _bw
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = _make(x.data.reshape(shape), (x,), "reshape")
    if out.requires_grad:
        def _bw():
            _acc(x, out.grad.reshape(x.data.shape))
        out._backward = _bw
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def _bw():
            for t, g in zip(tensors, np.split(out.grad, splits, axis=axis)):
                _acc(t, g)
        out._backward = _bw
    return out


def gather_rows(x: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    out = _make(x.data[idx], (x,), "gather_rows")
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(x.data)
            np.add.at(g, idx, out.grad)
            _acc(x, g)
        out._backward = _bw
    return out


def narrow(x: Tensor, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along the last axis."""
    if start < 0 or start + length > x.data.shape[-1]:
        raise ValueError(f"narrow [{start}:{start + length}) out of range for {x.data.shape}")
    sl = (Ellipsis, slice(start, start + length))
    out = _make(x.data[sl].copy(), (x,), "narrow")
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(x.data)
            g[sl] = out.grad
            _acc(x, g)
        out._backward = _bw
    return out


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _make(np.maximum(x.data, 0.0), (x,), "relu")
    if out.requires_grad:
        def _bw():
            _acc(x, out.grad * (x.data > 0.0))
        out._backward = _bw
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data
    y = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    out = _make(y, (x,), "sigmoid")
    if out.requires_grad:
        def _bw():
            _acc(x, out.grad * y * (1.0 - y))
        out._backward = _bw
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _make(np.asarray(x.data.sum()), (x,), "sum")
    if out.requires_grad:
        def _bw():
            _acc(x, np.full_like(x.data, float(out.grad)))
        out._backward = _bw
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = _make(np.asarray(x.data.mean()), (x,), "mean")
    if out.requires_grad:
        def _bw():
            _acc(x, np.full_like(x.data, float(out.grad) / n))
        out._backward = _bw
    return out


def masked_mean_pool(x: Tensor, mask) -> Tensor:
    """Mean of the rows of x selected by a boolean mask."""
    sel = np.flatnonzero(np.asarray(mask, dtype=bool))
    if sel.size == 0:
        raise ValueError("masked_mean_pool over an empty selection")
    out = _make(x.data[sel].mean(axis=0), (x,), "masked_mean_pool")
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(x.data)
            g[sel] = out.grad / sel.size
            _acc(x, g)
        out._backward = _bw
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _make(gain.data * xhat + bias.data, (x, gain, bias), "layer_norm")
    if out.requires_grad:
        def _bw():
            g = out.grad
            dxhat = g * gain.data
            n = x.data.shape[-1]
            dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            _acc(x, dx)
            red = tuple(range(g.ndim - 1))
            _acc(gain, (g * xhat).sum(axis=red))
            _acc(bias, g.sum(axis=red))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# attention / loss primitives


def masked_softmax(logits: Tensor, additive_mask) -> Tensor:
    """softmax(logits + mask) along the last axis.

    Mask entries must be exactly 0 or NEG_INF; positions carrying NEG_INF get
    weight 0. A row that is entirely masked is rejected (callers guarantee
    self-attention is never fully masked).
    """
    logits = as_tensor(logits)
    mask = as_tensor(additive_mask)
    if not np.all((mask.data == 0.0) | (mask.data == NEG_INF)):
        raise ValueError("additive mask entries must be 0 or NEG_INF")
    z = logits.data + mask.data
    blocked = np.broadcast_to(mask.data == NEG_INF, z.shape)
    if np.any(np.all(blocked, axis=-1)):
        raise ValueError("masked_softmax row with every position masked")
    m = np.max(np.where(blocked, -np.inf, z), axis=-1, keepdims=True)
    e = np.exp(z - m)
    e = np.where(blocked, 0.0, e)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _make(y, (logits, mask), "masked_softmax")
    if out.requires_grad:
        def _bw():
            g = out.grad
            gz = y * (g - (g * y).sum(axis=-1, keepdims=True))
            _acc(logits, _unbroadcast(logits.data.shape, gz))
            _acc(mask, _unbroadcast(mask.data.shape, gz))
        out._backward = _bw
    return out


def attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, additive_mask, heads: int = 1) -> Tensor:
    """Fused multi-head scaled dot-product attention under an additive mask.

    Computes concat_h softmax(mask + q_h k_h^T / sqrt(d_h)) v_h as a single
    tape node; equivalent to composing matmul/masked_softmax per head but
    with batched arithmetic.
    """
    q_in, k_in, v_in = as_tensor(q_in), as_tensor(k_in), as_tensor(v_in)
    mask = np.asarray(additive_mask.data if isinstance(additive_mask, Tensor) else additive_mask,
                      dtype=np.float64)
    t, dim = q_in.data.shape
    s = k_in.data.shape[0]
    if dim % heads != 0:
        raise ValueError(f"embed dim {dim} not divisible by {heads} heads")
    if k_in.data.shape != (s, dim) or v_in.data.shape != (s, dim) or mask.shape != (t, s):
        raise ValueError("attention operand shapes disagree")
    if not np.all((mask == 0.0) | (mask == NEG_INF)):
        raise ValueError("additive mask entries must be 0 or NEG_INF")
    blocked = mask == NEG_INF
    if np.any(np.all(blocked, axis=-1)):
        raise ValueError("attention row with every position masked")
    hd = dim // heads
    scale = 1.0 / np.sqrt(hd)

    def split(x, n):  # (n, dim) -> (heads, n, hd)
        return x.reshape(n, heads, hd).transpose(1, 0, 2)

    q, k, v = split(q_in.data, t), split(k_in.data, s), split(v_in.data, s)
    scores = np.matmul(q, k.transpose(0, 2, 1)) * scale + mask[None, :, :]
    m = np.max(np.where(blocked[None, :, :], -np.inf, scores), axis=-1, keepdims=True)
    e = np.exp(scores - m)
    e = np.where(blocked[None, :, :], 0.0, e)
    probs = e / e.sum(axis=-1, keepdims=True)
    out_h = np.matmul(probs, v)                       # (heads, t, hd)
    out = _make(out_h.transpose(1, 0, 2).reshape(t, dim), (q_in, k_in, v_in), "attention")
    if out.requires_grad:
        def _bw():
            go = split(out.grad, t)                   # (heads, t, hd)
            dv = np.matmul(probs.transpose(0, 2, 1), go)
            dp = np.matmul(go, v.transpose(0, 2, 1))
            ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True))
            dq = np.matmul(ds, k) * scale
            dk = np.matmul(ds.transpose(0, 2, 1), q) * scale
            _acc(q_in, dq.transpose(1, 0, 2).reshape(t, dim))
            _acc(k_in, dk.transpose(1, 0, 2).reshape(s, dim))
            _acc(v_in, dv.transpose(1, 0, 2).reshape(s, dim))
        out._backward = _bw
    return out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits)."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.intp)
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy expects (n, C) logits, got {logits.data.shape}")
    n, c = logits.data.shape
    if t.shape != (n,):
        raise ValueError(f"targets shape {t.shape} does not match {n} logit rows")
    if np.any(t < 0) or np.any(t >= c):
        raise ValueError(f"target class out of range [0, {c})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    nll = lse - z[np.arange(n), t]
    out = _make(np.asarray(nll.mean()), (logits,), "cross_entropy")
    if out.requires_grad:
        def _bw():
            p = np.exp(z - m)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), t] -= 1.0
            _acc(logits, float(out.grad) * p / n)
        out._backward = _bw
    return out


def binary_cross_entropy(pred: Tensor, target) -> Tensor:
    """Mean BCE; predictions are clamped to [1e-7, 1 - 1e-7]."""
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.data.shape:
        raise ValueError(f"binary_cross_entropy shape mismatch: {pred.data.shape} vs {t.shape}")
    p = np.clip(pred.data, _BCE_EPS, 1.0 - _BCE_EPS)
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    out = _make(np.asarray(loss.mean()), (pred,), "binary_cross_entropy")
    if out.requires_grad:
        inside = (pred.data > _BCE_EPS) & (pred.data < 1.0 - _BCE_EPS)
        def _bw():
            g = (p - t) / (p * (1.0 - p)) * inside
            _acc(pred, float(out.grad) * g / pred.data.size)
        out._backward = _bw
    return out


def dice_loss(pred: Tensor, target, smooth: float = 1.0) -> Tensor:
    """1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s)."""
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.data.shape:
        raise ValueError(f"dice_loss shape mismatch: {pred.data.shape} vs {t.shape}")
    inter = float((pred.data * t).sum())
    denom = float(pred.data.sum() + t.sum()) + smooth
    out = _make(np.asarray(1.0 - (2.0 * inter + smooth) / denom), (pred,), "dice_loss")
    if out.requires_grad:
        def _bw():
            g = -(2.0 * t * denom - (2.0 * inter + smooth)) / denom**2
            _acc(pred, float(out.grad) * g)
        out._backward = _bw
    return out


def l1_loss(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"l1_loss shape mismatch: {a.data.shape} vs {b.data.shape}")
    d = a.data - b.data
    out = _make(np.asarray(np.abs(d).mean()), (a, b), "l1_loss")
    if out.requires_grad:
        def _bw():
            g = float(out.grad) * np.sign(d) / d.size
            _acc(a, g)
            _acc(b, -g)
        out._backward = _bw
    return out


def l2_loss(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"l2_loss shape mismatch: {a.data.shape} vs {b.data.shape}")
    d = a.data - b.data
    out = _make(np.asarray((d * d).mean()), (a, b), "l2_loss")
    if out.requires_grad:
        def _bw():
            g = float(out.grad) * 2.0 * d / d.size
            _acc(a, g)
            _acc(b, -g)
        out._backward = _bw
    return out


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ValueError(f"cosine_similarity expects equal-length vectors, got {a.data.shape} and {b.data.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na <= 1e-12 or nb <= 1e-12:
        raise ValueError("cosine_similarity of a (near-)zero vector")
    s = float(a.data @ b.data) / (na * nb)
    out = _make(np.asarray(s), (a, b), "cosine_similarity")
    if out.requires_grad:
        def _bw():
            g = float(out.grad)
            _acc(a, g * (b.data / (na * nb) - s * a.data / na**2))
            _acc(b, g * (a.data / (na * nb) - s * b.data / nb**2))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# verification and optimization


def grad_check(fn, inputs, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` must map the input tensors to a scalar Tensor deterministically.
    Error per element is |analytic - numeric| / max(1, |numeric|).
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError("grad_check target must be scalar")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite value in forward pass")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    worst = 0.0
    with no_grad():
        for t, an in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            aflat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(fn(*inputs).data)
                flat[i] = orig - eps
                fm = float(fn(*inputs).data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise FloatingPointError("non-finite value while probing finite differences")
                num = (fp - fm) / (2.0 * eps)
                err = abs(aflat[i] - num) / max(1.0, abs(num))
                if err > worst:
                    worst = err
    return worst


class AdamW:
    """Adam with decoupled weight decay, applied uniformly to all parameters."""

    def __init__(self, params, lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-2):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)


def xavier_uniform(fan_in: int, fan_out: int, rng: np.random.Generator, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))
