"""Minimal reverse-mode autodiff on float64 numpy arrays.

The graph is recorded on the tensors themselves: every op returns a
Tensor holding its parents and a backward closure, and ``backward()``
replays the closures in reverse topological order, visiting each node
exactly once.  Convolution runs as im2col + GEMM; a naive loop
implementation (`conv2d_reference`) is kept alongside as the oracle.

Everything is float64.  External inputs are validated finite when they
enter through `tensor`/`Parameter`; training loops additionally reject
non-finite losses.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatch(ValueError):
    pass


class ZeroNorm(ValueError):
    pass


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = _as_f64(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        """Accumulate gradients of a scalar into every requiring node."""
        if self.data.ndim != 0:
            raise ShapeMismatch(f"backward needs a scalar, got shape {self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:  # iterative DFS; deep graphs would blow the recursion limit
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # light operator sugar; layers mostly call the functions below
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, s):
        return mul_scalar(self, float(s))

    __rmul__ = __mul__


class Parameter(Tensor):
    __slots__ = ("trainable", "name")

    def __init__(self, data, trainable=True, name=""):
        data = _as_f64(data)
        if not np.all(np.isfinite(data)):
            raise ValueError(f"non-finite values in parameter {name!r}")
        super().__init__(data, requires_grad=True)
        self.trainable = trainable
        self.name = name


def tensor(data, requires_grad=False) -> Tensor:
    arr = _as_f64(data)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite values entering the graph")
    return Tensor(arr, requires_grad=requires_grad)


def _make(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents),
                  _backward=backward if req else None)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# elementwise / structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), backward)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        _accum(a, g * s)

    return _make(a.data * s, (a,), backward)


def scale(a: Tensor, s: Tensor) -> Tensor:
    """Multiply a whole tensor by a 0-d tensor (mixing weight times filter)."""
    if s.data.ndim != 0:
        raise ShapeMismatch(f"scale factor must be 0-d, got {s.data.shape}")

    def backward(g):
        _accum(a, g * s.data)
        _accum(s, np.array(np.sum(g * a.data)))

    return _make(a.data * s.data, (a, s), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def index_select(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick a[idx] along axis 0 (idx 1-D ints). Used for z[branch]."""
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            _accum(a, ga)

    return _make(a.data[idx], (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), backward)


def sum_squares(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, (2.0 * float(g)) * a.data)

    return _make(np.array(np.sum(a.data * a.data)), (a,), backward)


def softmax_vec(a: Tensor) -> Tensor:
    """Softmax of a 1-D tensor (architecture mixing weights)."""
    if a.data.ndim != 1:
        raise ShapeMismatch(f"softmax_vec expects 1-D, got {a.data.shape}")
    z = a.data - np.max(a.data)
    e = np.exp(z)
    p = e / np.sum(e)

    def backward(g):
        _accum(a, p * (g - np.dot(g, p)))

    return _make(p, (a,), backward)


def weight_norm(v: Tensor, gain: Tensor) -> Tensor:
    """gain * v / ||v||_F with the norm taken over all entries of v."""
    if gain.data.ndim != 0:
        raise ShapeMismatch("weight_norm gain must be a scalar")
    n = float(np.sqrt(np.sum(v.data * v.data)))
    if n == 0.0:
        raise ZeroNorm("weight_norm direction has zero norm")
    vhat = v.data / n
    gval = float(gain.data)

    def backward(g):
        if v.requires_grad:
            # project out the radial component: norm changes do not move w
            _accum(v, (gval / n) * (g - vhat * np.sum(g * vhat)))
        if gain.requires_grad:
            _accum(gain, np.array(np.sum(g * vhat)))

    return _make(gval * vhat, (v, gain), backward)


# ---------------------------------------------------------------------------
# dense / loss

def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w.T + b with w shaped (out, in)."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"dense: x {x.shape} vs w {w.shape}")

    def backward(g):
        _accum(w, g.T @ x.data)
        _accum(b, g.sum(axis=0))
        _accum(x, g @ w.data)

    return _make(x.data @ w.data.T + b.data, (x, w, b), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy of softmax(logits) against integer labels."""
    labels = np.asarray(labels)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeMismatch(f"labels {labels.shape} for logits {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(n), labels] - np.log(e.sum(axis=1)))
    loss = np.array(np.mean(nll))

    def backward(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        _accum(logits, (float(g) / n) * d)

    return _make(loss, (logits,), backward)


# ---------------------------------------------------------------------------
# convolution

def conv2d_reference(x: np.ndarray, w: np.ndarray, stride=1, padding=None) -> np.ndarray:
    """Naive loop cross-correlation; the oracle for the GEMM path."""
    b, cin, h, ww = x.shape
    cout, cin2, k, k2 = w.shape
    assert cin == cin2 and k == k2
    if padding is None:
        padding = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (ww + 2 * padding - k) // stride + 1
    out = np.zeros((b, cout, ho, wo))
    for bi in range(b):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[bi, co, i, j] = np.sum(patch * w[co])
    return out


def _im2col(xp: np.ndarray, k: int, stride: int):
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * k * k)
    return cols, ho, wo


def _conv2d_raw(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    b = x.shape[0]
    cout, cin, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, ho, wo = _im2col(xp, k, stride)
    out = cols @ w.reshape(cout, cin * k * k).T
    return out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
    """Cross-correlation of (B,C,H,W) with (Cout,Cin,k,k), zero padding.

    Default padding (k-1)//2 keeps odd-kernel outputs at the input size.
    """
    b, cin, h, ww_ = x.shape
    cout, cin2, k, k2 = w.shape
    if cin != cin2 or k != k2:
        raise ShapeMismatch(f"conv2d: x {x.shape} vs w {w.shape}")
    if padding is None:
        padding = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, ho, wo = _im2col(xp, k, stride)
    wmat = w.data.reshape(cout, cin * k * k)
    out = (cols @ wmat.T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * ho * wo, cout)
        if w.requires_grad:
            _accum(w, (gmat.T @ cols).reshape(w.shape))
        if x.requires_grad:
            if stride == 1:
                # full correlation with the spatially flipped, in/out-swapped kernel
                wt = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                _accum(x, _conv2d_raw(g, wt, 1, k - 1 - padding))
            else:
                gcols = gmat @ wmat  # (B*Ho*Wo, Cin*k*k) scattered back
                gx = np.zeros_like(xp)
                idx = 0
                for bi in range(b):
                    for i in range(ho):
                        for j in range(wo):
                            patch = gcols[idx].reshape(cin, k, k)
                            gx[bi, :, i * stride:i * stride + k, j * stride:j * stride + k] += patch
                            idx += 1
                _accum(x, gx[:, :, padding:padding + h, padding:padding + ww_]
                       if padding else gx)

    return _make(out, (x, w), backward)


# ---------------------------------------------------------------------------
# pooling / normalization

def avgpool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    """Average pooling with floor semantics (trailing rows/cols dropped)."""
    if stride is None:
        stride = k
    b, c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"avgpool2d window {k} too large for {x.shape}")
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = win.mean(axis=(4, 5))

    def backward(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        gdiv = g / (k * k)
        for di in range(k):
            for dj in range(k):
                gx[:, :, di:di + ho * stride:stride, dj:dj + wo * stride:stride] += gdiv
        _accum(x, gx)

    return _make(out, (x,), backward)


def global_avgpool(x: Tensor) -> Tensor:
    """Mean over all spatial positions: (B,C,H,W) -> (B,C)."""
    b, c, h, w = x.shape

    def backward(g):
        _accum(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape))

    return _make(x.data.mean(axis=(2, 3)), (x,), backward)


def channel_block_mean(x: Tensor, block: int) -> Tensor:
    """Mean over consecutive channel blocks: (B, C*block, ...) -> (B, C, ...)."""
    c = x.shape[1]
    if c % block:
        raise ShapeMismatch(f"{c} channels not divisible by block {block}")
    newshape = (x.shape[0], c // block, block) + x.shape[2:]
    out = x.data.reshape(newshape).mean(axis=2)

    def backward(g):
        gx = np.broadcast_to(np.expand_dims(g, 2) / block, newshape)
        _accum(x, gx.reshape(x.shape))

    return _make(out, (x,), backward)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor,
              running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batchnorm for (B,C,H,W) or (B,F) tensors.

    Training mode normalizes by biased batch statistics and updates the
    running buffers in place (torch-style: unbiased var in the running
    estimate).  Eval mode uses the buffers and never mutates them.
    """
    if x.data.ndim == 4:
        axes, view = (0, 2, 3), (1, -1, 1, 1)
    elif x.data.ndim == 2:
        axes, view = (0,), (1, -1)
    else:
        raise ShapeMismatch(f"batchnorm expects 2-D or 4-D, got {x.shape}")
    m = x.data.size // x.shape[1]
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * m / max(m - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(view)) * inv.reshape(view)
    out = gamma.data.reshape(view) * xhat + beta.data.reshape(view)

    def backward(g):
        _accum(gamma, np.sum(g * xhat, axis=axes))
        _accum(beta, np.sum(g, axis=axes))
        if not x.requires_grad:
            return
        gi = gamma.data.reshape(view) * inv.reshape(view)
        if training:
            gm = g.mean(axis=axes).reshape(view)
            gxh = np.mean(g * xhat, axis=axes).reshape(view)
            _accum(x, gi * (g - gm - xhat * gxh))
        else:
            _accum(x, g * gi)

    return _make(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# optimizers

class SGD:
    def __init__(self, params, lr: float):
        self.params = [p for p in params if p.trainable]
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * (p.grad * p.grad)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# finite-difference checking

def grad_check(f, params, h: float = 1e-5, rng=None, max_entries: int | None = None) -> float:
    """Compare reverse-mode gradients of scalar f() against central differences.

    Returns the worst relative error |a-b| / max(1, |a|, |b|) over all
    checked entries.  Large tensors can be subsampled via max_entries.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [None if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, an in zip(params, analytic):
        if an is None:
            an = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            num = (up - down) / (2 * h)
            a = an.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst
