"""Tape-based reverse-mode differentiation, Adam and parameter storage.

Values are computed eagerly when a node is recorded. Arrays may carry a
leading batch axis; elementwise ops broadcast like numpy and their
adjoints are summed back to the input shape.

Threshold adjoints use the pass-through rule: derivative 1 with respect to
the input on entries that survive, 0 elsewhere (including exactly at the
kink). The top-k selection of the support-selection threshold and any
data-dependent interval bounds are treated as constants.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import top_k_mask
from .errors import ArgumentError, FormatError, TrainingError
from .rng import stream

OP_KINDS = (
    "const", "leaf", "matvec", "matmul", "add", "sub", "scale", "hadamard",
    "conv1d", "relu", "sigmoid", "softplus", "soft_threshold", "ss_threshold",
    "multistage_threshold", "sum_sq", "abs_sum", "affine_clamp", "reshape",
    "abs", "reciprocal",
)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def conv1d_forward(x, kernel, pad_left=None):
    """Zero-padded 'same' cross-correlation.

    ``x`` is ``(..., C_in, N)`` and ``kernel`` is ``(C_out, C_in, k)``.
    ``pad_left`` defaults to ``k // 2``.
    """
    c_out, c_in, k = kernel.shape
    if x.shape[-2] != c_in:
        raise ArgumentError(f"conv1d expects {c_in} input channels, got {x.shape[-2]}")
    pad = k // 2 if pad_left is None else pad_left
    width = [(0, 0)] * (x.ndim - 1) + [(pad, k - 1 - pad)]
    win = sliding_window_view(np.pad(x, width), k, axis=-1)  # (..., C_in, N, k)
    win = np.moveaxis(win, -3, -2)  # (..., N, C_in, k)
    flat = win.reshape(win.shape[:-2] + (c_in * k,))
    out = flat @ kernel.reshape(c_out, c_in * k).T  # (..., N, C_out)
    return np.swapaxes(out, -1, -2), flat


def conv1d_backward(g, x_shape, kernel, flat):
    c_out, c_in, k = kernel.shape
    gt = np.swapaxes(g, -1, -2)  # (..., N, C_out)
    dk = (gt.reshape(-1, c_out).T @ flat.reshape(-1, c_in * k)).reshape(kernel.shape)
    # the adjoint of a correlation is a correlation with the flipped, channel-swapped kernel
    flipped = np.ascontiguousarray(kernel.transpose(1, 0, 2)[:, :, ::-1])
    dx, _ = conv1d_forward(g, flipped, pad_left=k - 1 - k // 2)
    return dx.reshape(x_shape), dk


@dataclass
class Node:
    kind: str
    inputs: tuple
    shape: tuple
    needs_grad: bool
    ctx: dict = field(default_factory=dict)


class Tape:
    """Append-only computation record. Node ids are insertion indices."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []
        self.leaves: dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    def value(self, nid):
        return self.values[nid]

    def _push(self, kind, inputs, value, ctx=None):
        value = np.asarray(value, dtype=np.float64)
        needs = kind == "leaf" or any(self.nodes[i].needs_grad for i in inputs)
        self.nodes.append(Node(kind, tuple(inputs), value.shape, needs, ctx or {}))
        self.values.append(value)
        return len(self.nodes) - 1

    def _check(self, *ids):
        for i in ids:
            if not isinstance(i, (int, np.integer)) or not 0 <= i < len(self.nodes):
                raise ArgumentError(f"unknown node id {i!r}")

    # leaves -------------------------------------------------------------
    def const(self, value):
        return self._push("const", (), value)

    def leaf(self, name, value):
        """Differentiable input; gradients are reported under ``name``."""
        if name in self.leaves:
            return self.leaves[name]
        nid = self._push("leaf", (), np.array(value, dtype=np.float64, copy=True), {"name": name})
        self.leaves[name] = nid
        return nid

    def param(self, store: "ParamStore", name):
        """Effective (constrained) value of a stored parameter."""
        p = store[name]
        raw = self.leaf(name, p.raw) if p.trainable else self.const(p.raw)
        kind = p.constraint[0]
        if kind == "free":
            return raw
        if kind == "positive":
            return self.softplus(raw)
        lo, hi = p.bounds()
        return self.affine_clamp(raw, lo, hi)

    # linear algebra -----------------------------------------------------
    def matvec(self, mat, x, transpose=False):
        """Rows of ``x`` times ``mat^T`` (or ``mat`` when ``transpose``)."""
        self._check(mat, x)
        m, xv = self.values[mat], self.values[x]
        if m.ndim != 2:
            raise ArgumentError("matvec needs a matrix")
        inner = m.shape[0] if transpose else m.shape[1]
        if xv.shape[-1] != inner:
            raise ArgumentError(f"matvec shape mismatch: {m.shape} and {xv.shape}")
        out = xv @ m if transpose else xv @ m.T
        return self._push("matvec", (mat, x), out, {"transpose": transpose})

    def matmul(self, a, b):
        self._check(a, b)
        av, bv = self.values[a], self.values[b]
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ArgumentError(f"matmul shape mismatch: {av.shape} and {bv.shape}")
        return self._push("matmul", (a, b), av @ bv)

    def _binary(self, kind, a, b, fn):
        self._check(a, b)
        try:
            out = fn(self.values[a], self.values[b])
        except ValueError as exc:
            raise ArgumentError(f"{kind} shape mismatch: {exc}") from None
        return self._push(kind, (a, b), out)

    def add(self, a, b):
        return self._binary("add", a, b, np.add)

    def sub(self, a, b):
        return self._binary("sub", a, b, np.subtract)

    def hadamard(self, a, b):
        return self._binary("hadamard", a, b, np.multiply)

    def scale(self, a, c):
        """Multiply by a constant."""
        self._check(a)
        c = np.asarray(c, dtype=np.float64)
        return self._push("scale", (a,), self.values[a] * c, {"c": c})

    def reshape(self, a, shape):
        self._check(a)
        return self._push("reshape", (a,), self.values[a].reshape(shape))

    def conv1d(self, x, kernel):
        self._check(x, kernel)
        out, flat = conv1d_forward(self.values[x], self.values[kernel])
        return self._push("conv1d", (x, kernel), out, {"flat": flat})

    # nonlinearities -----------------------------------------------------
    def relu(self, a):
        self._check(a)
        return self._push("relu", (a,), np.maximum(self.values[a], 0.0))

    def sigmoid(self, a):
        self._check(a)
        return self._push("sigmoid", (a,), sigmoid(self.values[a]))

    def softplus(self, a):
        self._check(a)
        return self._push("softplus", (a,), softplus(self.values[a]))

    def abs(self, a):
        self._check(a)
        return self._push("abs", (a,), np.abs(self.values[a]))

    def reciprocal(self, a):
        self._check(a)
        av = self.values[a]
        if np.any(av == 0):
            raise ArgumentError("reciprocal of zero")
        return self._push("reciprocal", (a,), 1.0 / av)

    def affine_clamp(self, raw, lo, hi):
        """``lo + (hi - lo) * sigmoid(raw)`` with constant bounds."""
        self._check(raw)
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        if np.any(lo >= hi):
            raise ArgumentError("affine_clamp needs lo < hi")
        s = sigmoid(self.values[raw])
        return self._push("affine_clamp", (raw,), lo + (hi - lo) * s, {"s": s, "span": hi - lo})

    def soft_threshold(self, z, theta):
        self._check(z, theta)
        zv, tv = self.values[z], self.values[theta]
        if np.any(tv < 0):
            raise ArgumentError("threshold must be nonnegative")
        active = np.abs(zv) > tv
        out = np.where(active, zv - np.sign(zv) * tv, 0.0)
        return self._push("soft_threshold", (z, theta), out, {"active": active, "sign": np.sign(zv)})

    def ss_threshold(self, z, theta, keep_count):
        self._check(z, theta)
        zv, tv = self.values[z], self.values[theta]
        if np.any(tv < 0):
            raise ArgumentError("threshold must be nonnegative")
        active = np.abs(zv) > tv
        keep = top_k_mask(zv, keep_count) & active
        shrink = active & ~keep
        out = np.where(keep, zv, np.where(shrink, zv - np.sign(zv) * tv, 0.0))
        return self._push("ss_threshold", (z, theta), out,
                          {"keep": keep, "shrink": shrink, "sign": np.sign(zv)})

    def multistage_threshold(self, z, theta, theta_hat):
        self._check(z, theta, theta_hat)
        zv, t, th = self.values[z], self.values[theta], self.values[theta_hat]
        if np.any(t < 0) or np.any(th <= t):
            raise ArgumentError("need 0 <= theta < theta_hat")
        mag, sg = np.abs(zv), np.sign(zv)
        mid = (mag > t) & (mag < th)
        top = mag >= th
        gap = th - t
        out = np.where(top, zv, np.where(mid, (th / gap) * sg * (mag - t), 0.0))
        return self._push("multistage_threshold", (z, theta, theta_hat), out,
                          {"mid": mid, "top": top, "sign": sg, "mag": mag})

    # reductions ---------------------------------------------------------
    def sum_sq(self, a):
        self._check(a)
        v = self.values[a]
        return self._push("sum_sq", (a,), np.array(float(np.sum(v * v))))

    def abs_sum(self, a):
        self._check(a)
        return self._push("abs_sum", (a,), np.array(float(np.sum(np.abs(self.values[a])))))

    # reverse pass -------------------------------------------------------
    def backward(self, loss):
        """Adjoints of the scalar ``loss`` for every named leaf."""
        self._check(loss)
        if self.values[loss].size != 1 or self.values[loss].ndim != 0:
            raise ArgumentError("backward needs a scalar loss node")
        adj: dict[int, np.ndarray] = {loss: np.ones(())}
        for nid in range(loss, -1, -1):
            g = adj.pop(nid, None)
            node = self.nodes[nid]
            if g is None or not node.needs_grad or not node.inputs:
                if g is not None and node.kind == "leaf":
                    adj[nid] = g
                continue
            for i, gi in zip(node.inputs, self._vjp(nid, node, g)):
                if gi is None or not self.nodes[i].needs_grad:
                    continue
                gi = _unbroadcast(np.asarray(gi, dtype=np.float64), self.nodes[i].shape)
                adj[i] = adj[i] + gi if i in adj else gi
        grads = {}
        for name, nid in self.leaves.items():
            grads[name] = adj.get(nid, np.zeros(self.nodes[nid].shape))
        return grads

    def _vjp(self, nid, node, g):
        k, ins, ctx, val = node.kind, node.inputs, node.ctx, self.values
        if k == "add":
            return g, g
        if k == "sub":
            return g, -g
        if k == "hadamard":
            return g * val[ins[1]], g * val[ins[0]]
        if k == "scale":
            return (g * ctx["c"],)
        if k == "reshape":
            return (g.reshape(self.nodes[ins[0]].shape),)
        if k == "matvec":
            m, x = val[ins[0]], val[ins[1]]
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.reshape(-1, x.shape[-1])
            if ctx["transpose"]:
                return x2.T @ g2, g @ m.T
            return g2.T @ x2, g @ m
        if k == "matmul":
            a, b = val[ins[0]], val[ins[1]]
            return g @ b.T, a.T @ g
        if k == "conv1d":
            dx, dk = conv1d_backward(g, val[ins[0]].shape, val[ins[1]], ctx["flat"])
            return dx, dk
        if k == "relu":
            return (g * (val[ins[0]] > 0),)
        if k == "sigmoid":
            s = val[nid]
            return (g * s * (1.0 - s),)
        if k == "softplus":
            return (g * sigmoid(val[ins[0]]),)
        if k == "abs":
            return (g * np.sign(val[ins[0]]),)
        if k == "reciprocal":
            return (-g * val[nid] * val[nid],)
        if k == "affine_clamp":
            s = ctx["s"]
            return (g * ctx["span"] * s * (1.0 - s),)
        if k == "soft_threshold":
            act = ctx["active"]
            return g * act, -g * ctx["sign"] * act
        if k == "ss_threshold":
            keep, shrink = ctx["keep"], ctx["shrink"]
            return g * (keep | shrink), -g * ctx["sign"] * shrink
        if k == "multistage_threshold":
            t, th = val[ins[1]], val[ins[2]]
            mid, top, sg, mag = ctx["mid"], ctx["top"], ctx["sign"], ctx["mag"]
            gap = th - t
            dz = np.where(top, 1.0, np.where(mid, th / gap, 0.0))
            dt = np.where(mid, sg * th * (mag - th) / gap**2, 0.0)
            dth = np.where(mid, -sg * t * (mag - t) / gap**2, 0.0)
            return g * dz, g * dt, g * dth
        if k == "sum_sq":
            return (2.0 * g * val[ins[0]],)
        if k == "abs_sum":
            return (g * np.sign(val[ins[0]]),)
        raise ArgumentError(f"no adjoint rule for {k}")


# parameters -----------------------------------------------------------------

_KIND_CODES = {"free": 0, "interval": 1, "positive": 2, "simplex-pair": 3}


@dataclass
class Param:
    raw: np.ndarray
    constraint: tuple = ("free",)
    layer: int | None = None
    trainable: bool = True
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0

    def __post_init__(self):
        self.raw = np.array(self.raw, dtype=np.float64, copy=True)
        if self.m is None:
            self.m = np.zeros_like(self.raw)
        if self.v is None:
            self.v = np.zeros_like(self.raw)

    def bounds(self):
        if self.constraint[0] == "simplex-pair":
            return 0.0, 1.0
        return self.constraint[1], self.constraint[2]

    def effective(self):
        kind = self.constraint[0]
        if kind == "free":
            return self.raw.copy()
        if kind == "positive":
            return softplus(self.raw)
        lo, hi = self.bounds()
        return lo + (hi - lo) * sigmoid(self.raw)


class ParamStore:
    """Ordered mapping of named parameters with constraint annotations."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name, value, constraint=("free",), layer=None, trainable=True, raw=False):
        """Register ``name``; ``value`` is the effective value unless ``raw``."""
        constraint = tuple(constraint)
        if constraint[0] not in _KIND_CODES:
            raise ArgumentError(f"unknown constraint {constraint[0]!r}")
        if constraint[0] == "interval" and not constraint[1] < constraint[2]:
            raise ArgumentError(f"empty interval for {name}")
        value = np.asarray(value, dtype=np.float64)
        if not raw:
            value = to_raw(value, constraint)
        self._params[name] = Param(value, constraint, layer, trainable)
        return self

    def __getitem__(self, name):
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"missing parameter {name!r}") from None

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def effective(self, name):
        return self[name].effective()

    def set_effective(self, name, value):
        p = self[name]
        p.raw = to_raw(np.asarray(value, dtype=np.float64), p.constraint)

    def count(self, trainable_only=True):
        return sum(p.raw.size for p in self._params.values() if p.trainable or not trainable_only)

    def copy(self):
        out = ParamStore()
        for k, p in self._params.items():
            out._params[k] = Param(p.raw.copy(), p.constraint, p.layer, p.trainable,
                                   p.m.copy(), p.v.copy(), p.step)
        return out


def to_raw(value, constraint):
    kind = constraint[0]
    if kind == "free":
        return np.array(value, dtype=np.float64)
    if kind == "positive":
        if np.any(value <= 0):
            raise ArgumentError("positive parameter needs a positive value")
        # inverse softplus
        return np.where(value > 30, value, np.log(np.expm1(np.minimum(value, 30))))
    lo, hi = (0.0, 1.0) if kind == "simplex-pair" else constraint[1:3]
    return reparam_interval_inverse(value, lo, hi)


def reparam_interval(raw, lo, hi):
    """``lo + (hi - lo) * sigmoid(raw)``."""
    if not lo < hi:
        raise ArgumentError(f"need lo < hi, got {lo}, {hi}")
    return lo + (hi - lo) * sigmoid(raw)


def reparam_interval_inverse(value, lo, hi):
    value = np.asarray(value, dtype=np.float64)
    if np.any(value <= lo) or np.any(value >= hi):
        raise ArgumentError(f"value must lie strictly inside ({lo}, {hi})")
    s = (value - lo) / (hi - lo)
    return np.log(s) - np.log1p(-s)


def adam_step(store: ParamStore, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8, names=None):
    """Bias-corrected Adam on raw values; ``names`` limits the update set."""
    targets = list(grads) if names is None else [n for n in names if n in grads]
    for name in targets:
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    for name in targets:
        p = store[name]
        if not p.trainable:
            continue
        g = np.asarray(grads[name], dtype=np.float64).reshape(p.raw.shape)
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.raw = p.raw - lr * m_hat / (np.sqrt(v_hat) + eps)
    return store


def orthogonal_init(rows, cols, seed, index=0):
    """Rows (or columns, whichever is shorter) orthonormal; QR with sign fix."""
    if rows < 1 or cols < 1:
        raise ArgumentError("orthogonal_init needs positive dimensions")
    rng = stream(seed, "operator", index)
    big, small = max(rows, cols), min(rows, cols)
    q, r = np.linalg.qr(rng.standard_normal((big, small)))
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    return q if rows >= cols else q.T


# checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"ULP1"


def save_checkpoint(path, store: ParamStore):
    """ULP1: magic, u32 count, then per parameter: u16 name length, name,
    u8 dtype (1 = f64), u8 ndim, u32 dims, raw f64 payload, Adam m and v
    payloads, u64 step, u8 constraint kind, f64 lo, f64 hi, i32 layer
    (-1 for shared), u8 trainable. All little-endian."""
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<I", len(store))
    for name, p in store.items():
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", 1, p.raw.ndim)
        out += struct.pack(f"<{p.raw.ndim}I", *p.raw.shape)
        for arr in (p.raw, p.m, p.v):
            out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
        out += struct.pack("<Q", p.step)
        lo, hi = (p.bounds() if p.constraint[0] in ("interval", "simplex-pair") else (0.0, 0.0))
        out += struct.pack("<Bdd", _KIND_CODES[p.constraint[0]], lo, hi)
        out += struct.pack("<iB", -1 if p.layer is None else p.layer, int(p.trainable))
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    kinds = {v: k for k, v in _KIND_CODES.items()}
    pos = 4
    try:
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        store = ParamStore()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            dtype, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            if dtype != 1:
                raise FormatError(f"{path}: unsupported dtype code {dtype}")
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arrs = []
            for _ in range(3):
                arrs.append(np.frombuffer(data, "<f8", size, pos).reshape(shape).astype(np.float64))
                pos += 8 * size
            (step,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            kcode, lo, hi = struct.unpack_from("<Bdd", data, pos)
            pos += 17
            layer, trainable = struct.unpack_from("<iB", data, pos)
            pos += 5
            kind = kinds[kcode]
            constraint = ("interval", lo, hi) if kind == "interval" else (kind,)
            store._params[name] = Param(arrs[0], constraint, None if layer < 0 else layer,
                                        bool(trainable), arrs[1], arrs[2], step)
    except (struct.error, ValueError, KeyError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from None
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return store


__all__ = [
    "OP_KINDS", "Tape", "Param", "ParamStore", "adam_step", "orthogonal_init",
    "reparam_interval", "save_checkpoint", "load_checkpoint", "sigmoid", "softplus",
]
