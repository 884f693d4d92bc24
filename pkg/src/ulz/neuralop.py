"""Free-form operators inserted between the two proximal steps.

Each operator maps ``v`` (optionally together with the current iterate
``x``) to ``u``. Operators work on single vectors ``(N,)`` or batches
``(B, N)`` and can also be recorded on an autodiff tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tape, conv1d_forward, orthogonal_init
from .errors import ArgumentError, ConfigError

CVRL3_LAYERS = ((9, 1, 16), (9, 16, 16), (9, 16, 1))


@dataclass(frozen=True)
class ConvStackSpec:
    """Layers as ``(kernel_size, in_channels, out_channels)``."""

    layers: tuple = CVRL3_LAYERS
    relu_after: tuple = (0, 1)
    shortcut: bool = True
    shared: bool = True

    def __post_init__(self):
        if not self.layers:
            raise ArgumentError("a conv stack needs at least one layer")
        if self.layers[0][1] != 1 or self.layers[-1][2] != 1:
            raise ArgumentError("the stack must map one channel to one channel")
        for (_, _, c_out), (_, c_in, _) in zip(self.layers, self.layers[1:]):
            if c_out != c_in:
                raise ArgumentError("channel counts do not chain")

    @property
    def n_params(self):
        return sum(k * ci * co for k, ci, co in self.layers)

    def kernel_names(self, prefix="op"):
        return [f"{prefix}.k{i + 1}" for i in range(len(self.layers))]


def init_conv_params(store: ParamStore, spec: ConvStackSpec, seed, prefix="op", layer=None):
    """Orthogonal kernels on the ``(out, in * k)`` flattening."""
    for i, (name, (k, c_in, c_out)) in enumerate(zip(spec.kernel_names(prefix), spec.layers)):
        w = orthogonal_init(c_out, c_in * k, seed, index=hash_index(prefix, i))
        store.add(name, w.reshape(c_out, c_in, k), layer=layer)
    return store


def hash_index(prefix, i):
    # stable small integer per (prefix, layer) so kernels draw from distinct streams
    return sum(ord(ch) * 31**j for j, ch in enumerate(prefix)) % 100003 * 16 + i


def _kernels(spec, params, prefix):
    out = []
    for name in spec.kernel_names(prefix):
        if name not in params:
            raise ConfigError(f"missing parameter {name!r}")
        out.append(params.effective(name) if isinstance(params, ParamStore) else params[name])
    for (k, c_in, c_out), w in zip(spec.layers, out):
        if w.shape != (c_out, c_in, k):
            raise ConfigError(f"kernel shape {w.shape} does not match layer {(c_out, c_in, k)}")
    return out


def conv_stack_apply(v, kernels, relu_after=(0, 1)):
    """Residual branch ``D(v)`` on ``(N,)`` or ``(B, N)`` input."""
    h = np.asarray(v, dtype=np.float64)[..., None, :]
    for i, w in enumerate(kernels):
        h, _ = conv1d_forward(h, w)
        if i in relu_after:
            h = np.maximum(h, 0.0)
    return h[..., 0, :]


def conv_stack_record(tape: Tape, v, spec, params, prefix="op"):
    _kernels(spec, params, prefix)
    shape = tape.value(v).shape
    h = tape.reshape(v, shape[:-1] + (1, shape[-1]))
    for i, name in enumerate(spec.kernel_names(prefix)):
        h = tape.conv1d(h, tape.param(params, name))
        if i in spec.relu_after:
            h = tape.relu(h)
    return tape.reshape(h, shape)


def conv_residual_forward(v, spec: ConvStackSpec, params, tape: Tape, prefix="op"):
    """``u = v + D(v)`` (or ``D(v)`` without shortcut) recorded on ``tape``."""
    d = conv_stack_record(tape, v, spec, params, prefix)
    return tape.add(v, d) if spec.shortcut else d


def zero_operator(v, shortcut=True):
    """Residual branch identically zero."""
    v = np.asarray(v, dtype=np.float64)
    return v.copy() if shortcut else np.zeros_like(v)


def lipschitz_residual(v, x, inner: ConvStackSpec, params, tape: Tape, prefix="op"):
    """``u = D(v) - D(x) + v`` recorded on ``tape``."""
    if tape.value(v).shape != tape.value(x).shape:
        raise ArgumentError("v and x must have the same length")
    dv = conv_stack_record(tape, v, inner, params, prefix)
    dx = conv_stack_record(tape, x, inner, params, prefix)
    return tape.add(tape.sub(dv, dx), v)


def layer_norm_bound(kernels):
    """Upper bound on the Lipschitz constant of the conv stack.

    Each zero-padded conv is a sum over taps of a shift (norm <= 1) times a
    channel-mixing matrix; ReLU is 1-Lipschitz.
    """
    bound = 1.0
    for w in kernels:
        bound *= sum(np.linalg.norm(w[:, :, j], 2) for j in range(w.shape[2]))
    return float(bound)


@dataclass(frozen=True)
class EtaResult:
    eta: float | None
    in_T: bool


def eta_ratio(u, x, v, tol=1e-12):
    """``||u - x|| / ||v - x||``, or the in-T flag when ``||v - x|| <= tol``."""
    dv = float(np.linalg.norm(np.asarray(v) - np.asarray(x)))
    if dv <= tol:
        return EtaResult(None, True)
    return EtaResult(float(np.linalg.norm(np.asarray(u) - np.asarray(x))) / dv, False)


class ZeroOperator:
    """Numeric operator whose residual branch is zero."""

    kind = "zero"
    n_params = 0

    def __init__(self, shortcut=True):
        self.shortcut = shortcut

    def __call__(self, v, x=None, n=0):
        return zero_operator(v, self.shortcut)

    def record(self, tape, v, x=None, n=0):
        return v if self.shortcut else tape.scale(v, 0.0)


class ConvResidual:
    """``u = v + CvRL(v)`` with kernels taken from a parameter store."""

    kind = "conv"

    def __init__(self, spec: ConvStackSpec, params: ParamStore, prefix="op"):
        self.spec = spec
        self.params = params
        self.prefix = prefix
        _kernels(spec, params, self._prefix(0))

    def _prefix(self, n):
        return self.prefix if self.spec.shared else f"{self.prefix}{n}"

    @property
    def n_params(self):
        return self.spec.n_params

    def kernels(self, n=0):
        return _kernels(self.spec, self.params, self._prefix(n))

    def __call__(self, v, x=None, n=0):
        d = conv_stack_apply(v, self.kernels(n), self.spec.relu_after)
        return np.asarray(v) + d if self.spec.shortcut else d

    def record(self, tape, v, x=None, n=0):
        return conv_residual_forward(v, self.spec, self.params, tape, self._prefix(n))

    @classmethod
    def init(cls, seed, spec=None, store=None, prefix="op", K=1):
        spec = spec or ConvStackSpec()
        store = store if store is not None else ParamStore()
        if spec.shared:
            init_conv_params(store, spec, seed, prefix)
        else:
            for n in range(K):
                init_conv_params(store, spec, seed, f"{prefix}{n}", layer=n)
        return cls(spec, store, prefix)


class LipschitzResidual(ConvResidual):
    """``u = D(v) - D(x) + v``; the ratio ``eta`` is at most ``L_D + 1``."""

    kind = "lipschitz"

    def __call__(self, v, x=None, n=0):
        if x is None:
            raise ArgumentError("the Lipschitz residual needs the current iterate")
        ks = self.kernels(n)
        d = conv_stack_apply(v, ks, self.spec.relu_after) - conv_stack_apply(x, ks, self.spec.relu_after)
        return d + np.asarray(v)

    def record(self, tape, v, x=None, n=0):
        return lipschitz_residual(v, x, self.spec, self.params, tape, self._prefix(n))

    def eta_bound(self, n=0):
        return layer_norm_bound(self.kernels(n)) + 1.0


def make_operator(kind, seed, spec=None, store=None, K=1):
    if kind == "zero":
        return ZeroOperator()
    if kind == "conv":
        return ConvResidual.init(seed, spec, store, K=K)
    if kind == "lipschitz":
        op = ConvResidual.init(seed, spec, store, K=K)
        return LipschitzResidual(op.spec, op.params, op.prefix)
    raise ArgumentError(f"unknown operator kind {kind!r}")


__all__ = [
    "CVRL3_LAYERS", "ConvStackSpec", "ConvResidual", "LipschitzResidual", "ZeroOperator",
    "conv_residual_forward", "conv_stack_apply", "eta_ratio", "init_conv_params",
    "layer_norm_bound", "lipschitz_residual", "make_operator", "zero_operator",
]
