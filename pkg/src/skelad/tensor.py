"""Dense tensor arithmetic with tape-based reverse-mode gradients.

Everything is double precision. The operation set is exactly what the
motion model needs: matrix products, the two adjacency contractions of a
separable graph layer, per-node channel mixing, elementwise activations,
batch normalization, pooling, and a handful of reductions.

Node tensors are a single sample ``[T, V, C]`` or a batch in the
canonical layout ``[T, V, N, C]`` (sample axis third). That layout lets
the spatial contraction, node contraction, and channel map run as plain
reshaped GEMMs with no data movement, and leaves the temporal
contraction with only cheap leading-axis transposes; it matters because
strided copies dominate runtime on low-bandwidth machines. No other
broadcasting is supported.

Gradients are recorded on an explicit :class:`Tape`. Operations executed
while a tape is active append one node each, so the node list is already
in topological order and a backward pass is a single reverse sweep.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "BatchNormState",
    "Adam",
    "matmul",
    "contract_spatial",
    "contract_temporal",
    "contract_nodes",
    "channel_map",
    "activation",
    "add",
    "scale",
    "affine",
    "batchnorm",
    "mean_pool_nodes",
    "flatten_nodes",
    "broadcast_nodes",
    "sum_all",
    "mean_all",
    "mse",
]


class Tensor:
    """A double-precision array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            # copy: g may alias another tensor's buffer
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager; operations run inside the block are
    recorded. Not shareable across threads.
    """

    def __init__(self):
        self.nodes: list = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and sweep the tape once, in reverse."""
        if loss.data.size != 1:
            raise DimensionError(f"backward requires a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            node()


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(out: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    """Attach ``backward`` to the active tape if any input needs gradients.

    ``backward(g)`` receives d(loss)/d(out) and must accumulate into the
    inputs' grad buffers. Exposed so manifold operations defined elsewhere
    can register on the same tape.
    """
    tape = _active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True

    def node():
        if out.grad is not None:
            backward(out.grad)

    tape.nodes.append(node)
    return out


# ---------------------------------------------------------------------------
# shape helpers


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    """View a [T,V,C] array as [T,V,1,C]; pass canonical [T,V,N,C] through."""
    if x.ndim == 3:
        return x[:, :, None, :], False
    if x.ndim == 4:
        return x, True
    raise DimensionError(f"expected a 3- or 4-d node tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# differentiable operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d matrix product a @ b."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul requires 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return record(out, (a, b), backward)


def contract_spatial(a_s: Tensor, x: Tensor) -> Tensor:
    """Per-frame joint mixing: out[t] = a_s[t] @ x[t].

    ``a_s`` is [T,V,V]; ``x`` is [T,V,C] or canonical [T,V,N,C]. The
    sample and channel axes fold into the GEMM columns for free.
    """
    ad = a_s.data
    xb, batched = _as_batch(x.data)
    if ad.ndim != 3 or ad.shape[1] != ad.shape[2]:
        raise DimensionError(f"spatial adjacency must be [T,V,V], got {ad.shape}")
    if xb.shape[0] != ad.shape[0] or xb.shape[1] != ad.shape[1]:
        raise DimensionError(f"spatial contraction mismatch: adjacency {ad.shape}, input {x.shape}")
    t, v, n, c = xb.shape
    xt = xb.reshape(t, v, n * c)
    out = Tensor(np.matmul(ad, xt).reshape(xb.shape if batched else x.data.shape))

    def backward(g):
        gt = g.reshape(t, v, n * c)
        if a_s.requires_grad:
            a_s.accumulate_grad(np.matmul(gt, xt.transpose(0, 2, 1)))
        if x.requires_grad:
            x.accumulate_grad(np.matmul(ad.transpose(0, 2, 1), gt).reshape(x.data.shape))

    return record(out, (a_s, x), backward)


def contract_temporal(a_t: Tensor, x: Tensor) -> Tensor:
    """Per-joint frame mixing: out[:, v] = a_t[v] @ x[:, v].

    ``a_t`` is [V,T,T]; ``x`` is [T,V,C] or canonical [T,V,N,C]. The two
    leading axes swap (cheap: the inner sample/channel block stays
    contiguous) so each joint's contraction is one GEMM.
    """
    ad = a_t.data
    xb, batched = _as_batch(x.data)
    if ad.ndim != 3 or ad.shape[1] != ad.shape[2]:
        raise DimensionError(f"temporal adjacency must be [V,T,T], got {ad.shape}")
    if xb.shape[0] != ad.shape[1] or xb.shape[1] != ad.shape[0]:
        raise DimensionError(f"temporal contraction mismatch: adjacency {ad.shape}, input {x.shape}")
    t, v, n, c = xb.shape
    xv = np.ascontiguousarray(xb.transpose(1, 0, 2, 3)).reshape(v, t, n * c)
    out_v = np.matmul(ad, xv).reshape(v, t, n, c)
    out_b = np.ascontiguousarray(out_v.transpose(1, 0, 2, 3))
    out = Tensor(out_b if batched else out_b[:, :, 0, :])

    def backward(g):
        gb = g.reshape(xb.shape)
        gv = np.ascontiguousarray(gb.transpose(1, 0, 2, 3)).reshape(v, t, n * c)
        if a_t.requires_grad:
            a_t.accumulate_grad(np.matmul(gv, xv.transpose(0, 2, 1)))
        if x.requires_grad:
            gx = np.matmul(ad.transpose(0, 2, 1), gv).reshape(v, t, n, c)
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
            x.accumulate_grad(gx.reshape(x.data.shape))

    return record(out, (a_t, x), backward)


def contract_nodes(a: Tensor, x: Tensor) -> Tensor:
    """Full node mixing for the non-separable layer: out = a @ x over all
    spatio-temporal nodes at once.

    ``a`` is [M,M] with M the node count; ``x`` is [M,C], [T,V,C] with
    T*V == M, or a canonical batch [T,V,N,C]. The node axes flatten to a
    single GEMM with no data movement; the output keeps the input shape.
    """
    ad = a.data
    xd = x.data
    if ad.ndim != 2 or ad.shape[0] != ad.shape[1]:
        raise DimensionError(f"node adjacency must be square, got {ad.shape}")
    m = ad.shape[0]
    if xd.ndim == 2:
        xm = xd
    elif xd.ndim == 3:
        xm = xd.reshape(-1, xd.shape[-1])
    elif xd.ndim == 4:
        xm = xd.reshape(xd.shape[0] * xd.shape[1], -1)
    else:
        raise DimensionError(f"expected 2- to 4-d node input, got {xd.shape}")
    if xm.shape[0] != m:
        raise DimensionError(f"node contraction mismatch: adjacency {ad.shape}, input {xd.shape}")
    out = Tensor(np.matmul(ad, xm).reshape(xd.shape))

    def backward(g):
        gm = g.reshape(xm.shape)
        if a.requires_grad:
            a.accumulate_grad(gm @ xm.T)
        if x.requires_grad:
            x.accumulate_grad((ad.T @ gm).reshape(xd.shape))

    return record(out, (a, x), backward)


def separable_layer(
    a_t: Tensor,
    a_s: Tensor,
    w: Tensor,
    x: Tensor,
    residual: Tensor | None,
    act: str,
) -> Tensor:
    """One fused separable graph layer:

        out = act(A_s (A_t x) W) + (x or x R)

    Semantically identical to composing contract_temporal,
    contract_spatial, channel_map, activation, and the residual add; fused
    so a training step allocates one tape node and no intermediate
    gradient buffers (this path carries nearly all of the compute).
    """
    if act not in ("relu", "identity"):
        raise ConfigError(f"unknown activation kind {act!r}")
    at_d, as_d, w_d = a_t.data, a_s.data, w.data
    xb, batched = _as_batch(x.data)
    t, v, n, c = xb.shape
    if at_d.shape != (v, t, t) or as_d.shape != (t, v, v):
        raise DimensionError(
            f"adjacency shapes {at_d.shape}, {as_d.shape} do not match input {x.data.shape}"
        )
    if w_d.ndim != 2 or w_d.shape[0] != c:
        raise DimensionError(f"channel mismatch: input {x.data.shape}, weights {w_d.shape}")
    c_out = w_d.shape[1]
    if residual is None and c != c_out:
        raise DimensionError(f"residual pass-through needs equal widths, got {c} -> {c_out}")

    xv = np.ascontiguousarray(xb.transpose(1, 0, 2, 3)).reshape(v, t, n * c)
    h_t = np.matmul(at_d, xv)
    h_ts = np.ascontiguousarray(h_t.reshape(v, t, n, c).transpose(1, 0, 2, 3)).reshape(t, v, n * c)
    h_a = np.matmul(as_d, h_ts)
    pre = h_a.reshape(t * v * n, c) @ w_d
    mask = None
    if act == "relu":
        np.maximum(pre, 0.0, out=pre)
        # the residual add below mutates pre through the reshape view, so
        # freeze the subgradient mask now (0 stays inactive by convention)
        mask = pre > 0.0
    out_d = pre.reshape(t, v, n, c_out)
    if residual is None:
        out_d += xb
    else:
        out_d += (xb.reshape(t * v * n, c) @ residual.data).reshape(t, v, n, c_out)
    out = Tensor(out_d if batched else out_d[:, :, 0, :])
    inputs = (a_t, a_s, w, x) if residual is None else (a_t, a_s, w, x, residual)

    def backward(g):
        gb = g.reshape(t, v, n, c_out)
        gflat = gb.reshape(t * v * n, c_out)
        gm = np.where(mask, gflat, 0.0) if mask is not None else gflat
        if w.requires_grad:
            w.accumulate_grad(h_a.reshape(t * v * n, c).T @ gm)
        gh_a = (gm @ w_d.T).reshape(t, v, n * c)
        if a_s.requires_grad:
            a_s.accumulate_grad(np.matmul(gh_a, h_ts.reshape(t, v, n * c).transpose(0, 2, 1)))
        gh_ts = np.matmul(as_d.transpose(0, 2, 1), gh_a)
        gh_t = np.ascontiguousarray(
            gh_ts.reshape(t, v, n, c).transpose(1, 0, 2, 3)
        ).reshape(v, t, n * c)
        if a_t.requires_grad:
            a_t.accumulate_grad(np.matmul(gh_t, xv.transpose(0, 2, 1)))
        if residual is not None and residual.requires_grad:
            residual.accumulate_grad(xb.reshape(t * v * n, c).T @ gflat)
        if x.requires_grad:
            gx = np.matmul(at_d.transpose(0, 2, 1), gh_t).reshape(v, t, n, c)
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
            if residual is None:
                gx += gb
            else:
                gx += (gflat @ residual.data.T).reshape(t, v, n, c)
            x.accumulate_grad(gx.reshape(x.data.shape))

    return record(out, inputs, backward)


def channel_map(x: Tensor, w: Tensor) -> Tensor:
    """Mix the trailing channel axis: out[..., c'] = sum_c x[..., c] w[c, c']."""
    xd, wd = x.data, w.data
    if wd.ndim != 2:
        raise DimensionError(f"channel weights must be 2-d, got {wd.shape}")
    if xd.ndim < 2 or xd.shape[-1] != wd.shape[0]:
        raise DimensionError(f"channel mismatch: input {xd.shape}, weights {wd.shape}")
    c_in, c_out = wd.shape
    flat = xd.reshape(-1, c_in)
    out = Tensor((flat @ wd).reshape(xd.shape[:-1] + (c_out,)))

    def backward(g):
        gflat = g.reshape(-1, c_out)
        if x.requires_grad:
            x.accumulate_grad((gflat @ wd.T).reshape(xd.shape))
        if w.requires_grad:
            w.accumulate_grad(flat.T @ gflat)

    return record(out, (x, w), backward)


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise relu / tanh / identity. relu subgradient at 0 is 0."""
    xd = x.data
    if kind == "relu":
        out = Tensor(np.maximum(xd, 0.0))

        def backward(g):
            x.accumulate_grad(g * (xd > 0.0))

    elif kind == "tanh":
        y = np.tanh(xd)
        out = Tensor(y)

        def backward(g):
            x.accumulate_grad(g * (1.0 - y * y))

    elif kind == "identity":
        out = Tensor(xd.copy())

        def backward(g):
            x.accumulate_grad(g)

    else:
        raise ConfigError(f"unknown activation kind {kind!r}")

    return record(out, (x,), backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if x.data.shape != y.data.shape:
        raise DimensionError(f"add shape mismatch: {x.shape} vs {y.shape}")
    out = Tensor(x.data + y.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if y.requires_grad:
            y.accumulate_grad(g)

    return record(out, (x, y), backward)


def scale(x: Tensor, k: float) -> Tensor:
    """Multiply by a python scalar."""
    out = Tensor(x.data * k)

    def backward(g):
        x.accumulate_grad(g * k)

    return record(out, (x,), backward)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-wise affine map: out = x @ w (+ b)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine mismatch: input {x.shape}, weights {w.shape}")
    out_d = x.data @ w.data
    if b is not None:
        if b.data.shape != (w.shape[1],):
            raise DimensionError(f"bias shape {b.shape} does not match output width {w.shape[1]}")
        out_d = out_d + b.data
    out = Tensor(out_d)
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g @ w.data.T)
        if w.requires_grad:
            w.accumulate_grad(x.data.T @ g)
        if b is not None and b.requires_grad:
            b.accumulate_grad(g.sum(axis=0))

    return record(out, inputs, backward)


class BatchNormState:
    """Learnable scale/shift plus running statistics for one feature axis."""

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)


def batchnorm(x: Tensor, state: BatchNormState, mode: str, update_stats: bool = True) -> Tensor:
    """Batch normalization over rows of a [N,F] tensor.

    Train mode normalizes by batch statistics (biased variance) and, when
    ``update_stats`` is set, folds them into the running statistics with
    the state's momentum (unbiased variance, the usual convention). Infer
    mode uses the running statistics only, so single samples are fine.
    """
    xd = x.data
    if xd.ndim != 2 or xd.shape[1] != state.num_features:
        raise DimensionError(f"batchnorm expects [N,{state.num_features}], got {xd.shape}")
    n = xd.shape[0]
    gamma, beta = state.gamma, state.beta

    if mode == "train":
        if n < 2:
            raise DimensionError(f"batchnorm train mode needs a batch of at least 2, got {n}")
        mean = xd.mean(axis=0)
        var = xd.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (xd - mean) * inv_std
        if update_stats:
            m = state.momentum
            state.running_mean = (1.0 - m) * state.running_mean + m * mean
            state.running_var = (1.0 - m) * state.running_var + m * var * n / (n - 1)
        out = Tensor(gamma.data * xhat + beta.data)

        def backward(g):
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=0))
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=0))
            if x.requires_grad:
                gxhat = g * gamma.data
                # d/dx of (x - mean)/sqrt(var + eps) with mean, var batch functions
                dvar = (gxhat * (xd - mean)).sum(axis=0) * (-0.5) * inv_std**3
                dmean = (-gxhat * inv_std).sum(axis=0)
                gx = gxhat * inv_std + dvar * 2.0 * (xd - mean) / n + dmean / n
                x.accumulate_grad(gx)

    elif mode == "infer":
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xd - state.running_mean) * inv_std
        out = Tensor(gamma.data * xhat + beta.data)

        def backward(g):
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=0))
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=0))
            if x.requires_grad:
                x.accumulate_grad(g * gamma.data * inv_std)

    else:
        raise ConfigError(f"unknown batchnorm mode {mode!r}")

    return record(out, (x, gamma, beta), backward)


def mean_pool_nodes(x: Tensor) -> Tensor:
    """Mean over the (frame, joint) axes: [T,V,N,C] -> [N,C] or [T,V,C] -> [C]."""
    xd = x.data
    if xd.ndim not in (3, 4):
        raise DimensionError(f"mean_pool_nodes expects 3- or 4-d input, got {xd.shape}")
    count = xd.shape[0] * xd.shape[1]
    out = Tensor(xd.mean(axis=(0, 1)))

    def backward(g):
        x.accumulate_grad(np.broadcast_to(g / count, xd.shape).copy())

    return record(out, (x,), backward)


def flatten_nodes(x: Tensor) -> Tensor:
    """Flatten node structure per sample: [T,V,N,C] -> [N,T*V*C] or
    [T,V,C] -> [T*V*C]."""
    xd = x.data
    if xd.ndim == 4:
        t, v, n, c = xd.shape
        out = Tensor(np.ascontiguousarray(xd.transpose(2, 0, 1, 3)).reshape(n, t * v * c))

        def backward(g):
            gx = g.reshape(n, t, v, c).transpose(1, 2, 0, 3)
            x.accumulate_grad(np.ascontiguousarray(gx))

    elif xd.ndim == 3:
        out = Tensor(xd.reshape(-1))

        def backward(g):
            x.accumulate_grad(g.reshape(xd.shape))

    else:
        raise DimensionError(f"flatten_nodes expects 3- or 4-d input, got {xd.shape}")

    return record(out, (x,), backward)


def broadcast_nodes(x: Tensor, frames: int, joints: int) -> Tensor:
    """Tile per-sample channels to every node: [N,C] -> [T,V,N,C]."""
    xd = x.data
    if xd.ndim != 2:
        raise DimensionError(f"broadcast_nodes expects [N,C], got {xd.shape}")
    out = Tensor(np.broadcast_to(xd, (frames, joints) + xd.shape).copy())

    def backward(g):
        x.accumulate_grad(g.sum(axis=(0, 1)))

    return record(out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(x.data.sum())

    def backward(g):
        x.accumulate_grad(np.full_like(x.data, float(g)))

    return record(out, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    """Mean of all elements, as a scalar tensor."""
    out = Tensor(x.data.mean())

    def backward(g):
        x.accumulate_grad(np.full_like(x.data, float(g) / x.data.size))

    return record(out, (x,), backward)


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error against a constant target."""
    td = np.asarray(target, dtype=np.float64)
    if pred.data.shape != td.shape:
        raise DimensionError(f"mse shape mismatch: {pred.shape} vs {td.shape}")
    diff = pred.data - td
    out = Tensor(np.mean(diff * diff))

    def backward(g):
        pred.accumulate_grad(float(g) * 2.0 * diff / diff.size)

    return record(out, (pred,), backward)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction over a fixed parameter list.

    Moment buffers start at zero; ``step`` reads each parameter's grad
    (treating a missing grad as zero) and updates in place.
    """

    def __init__(self, params: list[Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise DimensionError(
                    f"gradient shape {g.shape} does not match parameter shape {p.data.shape}"
                )
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            p.data -= self.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
