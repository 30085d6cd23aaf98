"""Small numpy neural-network core.

Only the handful of layer kinds the driving networks need are supported:
dense, 4x4/stride-2 convolution, leaky ReLU, column-restricted tanh and
sigmoid heads, flatten, and a concat that appends the non-image part of the
input to the flattened conv features.

A network input is always a 2-D array ``(batch, features)``.  When the network
has an image stem, the first ``C*H*W`` features are the image (row-major
``C, H, W``) and the remaining ``side_dim`` features are the continuous inputs
that the ``concat`` layer appends.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError, StateError

KERNEL = 4
STRIDE = 2
PADDING = 1
CONV_CHANNELS = (32, 64, 128, 256)
LEAKY_SLOPE = 0.01

MAGIC = b"GDCK"
FORMAT_VERSION = 1

_KIND_CODES = {
    "dense": 1,
    "conv2d": 2,
    "leaky_relu": 3,
    "tanh": 4,
    "sigmoid": 5,
    "flatten": 6,
    "concat": 7,
}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one layer.

    ``dims`` is kind specific:

    * dense: ``(in_features, out_features)``
    * conv2d: ``(in_channels, out_channels, kernel, stride, padding)``
    * tanh / sigmoid: ``(start, stop)`` column range the activation covers
    * concat: ``(side_dim,)``
    * others: ``()``
    """

    kind: str
    dims: tuple[int, ...] = ()
    slope: float = 0.0

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if len(self.dims) != 5 or self.dims[2:] != (KERNEL, STRIDE, PADDING):
                raise ConfigurationError("conv2d layers use kernel 4, stride 2, padding 1")
        if len(self.dims) > 5:
            raise ConfigurationError("at most 5 dims per layer")


def dense(n_in: int, n_out: int) -> LayerSpec:
    return LayerSpec("dense", (n_in, n_out))


def conv2d(c_in: int, c_out: int) -> LayerSpec:
    return LayerSpec("conv2d", (c_in, c_out, KERNEL, STRIDE, PADDING))


def leaky_relu(slope: float = LEAKY_SLOPE) -> LayerSpec:
    return LayerSpec("leaky_relu", (), float(slope))


def tanh(start: int = 0, stop: int = -1) -> LayerSpec:
    return LayerSpec("tanh", (start, stop))


def sigmoid(start: int = 0, stop: int = -1) -> LayerSpec:
    return LayerSpec("sigmoid", (start, stop))


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def concat(side_dim: int) -> LayerSpec:
    return LayerSpec("concat", (side_dim,))


def conv_output_size(size: int) -> int:
    return (size + 2 * PADDING - KERNEL) // STRIDE + 1


def _col_slice(dims, width):
    start, stop = dims
    if stop < 0:
        stop = width
    return slice(start, stop)


# ---------------------------------------------------------------------------
# layer math


def _im2col(xp, ho, wo):
    b, c = xp.shape[:2]
    cols = np.empty((b, c, KERNEL, KERNEL, ho, wo), dtype=xp.dtype)
    for i in range(KERNEL):
        for j in range(KERNEL):
            cols[:, :, i, j] = xp[:, :, i : i + STRIDE * ho : STRIDE, j : j + STRIDE * wo : STRIDE]
    return cols.reshape(b, c * KERNEL * KERNEL, ho * wo)


def _col2im(dcols, shape, ho, wo):
    b, c, h, w = shape
    dxp = np.zeros((b, c, h + 2 * PADDING, w + 2 * PADDING), dtype=dcols.dtype)
    dcols = dcols.reshape(b, c, KERNEL, KERNEL, ho, wo)
    for i in range(KERNEL):
        for j in range(KERNEL):
            dxp[:, :, i : i + STRIDE * ho : STRIDE, j : j + STRIDE * wo : STRIDE] += dcols[:, :, i, j]
    return dxp[:, :, PADDING : PADDING + h, PADDING : PADDING + w]


def _sigmoid(z):
    # split by sign so large |z| never overflows exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class Network:
    """Sequential network with optional image stem.

    ``params[i]`` / ``grads[i]`` are lists of arrays for layer ``i`` (``[W, b]``
    for dense and conv layers, empty otherwise).  Gradients accumulate across
    ``backward`` calls until :meth:`zero_grad`.
    """

    specs: list[LayerSpec]
    image_shape: tuple[int, int, int] | None = None
    side_dim: int = 0
    dtype: type = np.float32
    params: list[list[np.ndarray]] = field(default_factory=list)
    grads: list[list[np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        self.dtype = np.dtype(self.dtype).type
        if not self.params:
            self.params = [self._empty_params(s) for s in self.specs]
        self.grads = [[np.zeros_like(p) for p in ps] for ps in self.params]
        self._cache = None
        self._check_layout()

    def _empty_params(self, spec):
        if spec.kind == "dense":
            n_in, n_out = spec.dims
            return [np.zeros((n_out, n_in), self.dtype), np.zeros(n_out, self.dtype)]
        if spec.kind == "conv2d":
            c_in, c_out = spec.dims[:2]
            return [np.zeros((c_out, c_in, KERNEL, KERNEL), self.dtype), np.zeros(c_out, self.dtype)]
        return []

    def _check_layout(self):
        shape = self.image_shape
        width = None if shape else self.side_dim
        flat = shape is None
        for s in self.specs:
            if s.kind == "conv2d":
                if flat or s.dims[0] != shape[0]:
                    raise ConfigurationError(f"conv2d expects {s.dims[0]} channels, got {shape}")
                shape = (s.dims[1], conv_output_size(shape[1]), conv_output_size(shape[2]))
            elif s.kind == "flatten":
                width, flat = int(np.prod(shape)), True
            elif s.kind == "concat":
                if not flat or s.dims[0] != self.side_dim:
                    raise ConfigurationError("concat must follow flatten and match side_dim")
                width += s.dims[0]
            elif s.kind == "dense":
                if not flat or s.dims[0] != width:
                    raise ConfigurationError(f"dense expects {s.dims[0]} inputs, got {width}")
                width = s.dims[1]
        if not flat:
            raise ConfigurationError("network output must be flat")
        self.out_dim = width

    # -- construction ------------------------------------------------------

    @property
    def input_dim(self) -> int:
        img = int(np.prod(self.image_shape)) if self.image_shape else 0
        return img + self.side_dim

    def init(self, rng: np.random.Generator) -> "Network":
        """Uniform(+-sqrt(1/fan_in)) weights, zero biases."""
        for spec, ps in zip(self.specs, self.params):
            if not ps:
                continue
            w, b = ps
            fan_in = int(np.prod(w.shape[1:]))
            bound = np.sqrt(1.0 / fan_in)
            w[...] = rng.uniform(-bound, bound, size=w.shape)
            b[...] = 0.0
        return self

    def astype(self, dtype) -> "Network":
        return Network(
            list(self.specs),
            self.image_shape,
            self.side_dim,
            dtype,
            [[p.astype(dtype) for p in ps] for ps in self.params],
        )

    def copy(self) -> "Network":
        return self.astype(self.dtype)

    def parameters(self):
        for ps, gs in zip(self.params, self.grads):
            yield from zip(ps, gs)

    def num_params(self) -> int:
        return sum(p.size for p, _ in self.parameters())

    def zero_grad(self):
        for gs in self.grads:
            for g in gs:
                g.fill(0)

    def load_state(self, other: "Network"):
        """Copy parameter values from a congruent network."""
        if other.specs != self.specs:
            raise ConfigurationError("layer specs differ")
        for ps, qs in zip(self.params, other.params):
            for p, q in zip(ps, qs):
                p[...] = q

    # -- forward / backward ------------------------------------------------

    def _split_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ConfigurationError(f"expected input (batch, {self.input_dim}), got {x.shape}")
        if not self.image_shape:
            return x, None
        n_img = int(np.prod(self.image_shape))
        return x[:, :n_img].reshape((x.shape[0],) + tuple(self.image_shape)), x[:, n_img:]

    def _layer_forward(self, spec, ps, h, side):
        """Apply one layer; returns the output and what backward needs."""
        k = spec.kind
        if k == "dense":
            w, b = ps
            return h @ w.T + b, h
        if k == "conv2d":
            w, b = ps
            n, _, hh, ww = h.shape
            ho, wo = conv_output_size(hh), conv_output_size(ww)
            xp = np.pad(h, ((0, 0), (0, 0), (PADDING, PADDING), (PADDING, PADDING)))
            cols = _im2col(xp, ho, wo)
            out = np.matmul(w.reshape(w.shape[0], -1), cols) + b[:, None]
            return out.reshape(n, w.shape[0], ho, wo), (cols, h.shape)
        if k == "leaky_relu":
            return np.where(h > 0, h, h * self.dtype(spec.slope)), h > 0
        if k in ("tanh", "sigmoid"):
            sl = _col_slice(spec.dims, h.shape[1])
            h = h.copy()
            h[:, sl] = np.tanh(h[:, sl]) if k == "tanh" else _sigmoid(h[:, sl])
            return h, (sl, h[:, sl].copy())
        if k == "flatten":
            return h.reshape(h.shape[0], -1), h.shape
        if k == "concat":
            return np.concatenate([h, side], axis=1), h.shape[1]
        raise ConfigurationError(f"unknown layer kind {k!r}")

    def forward(self, x, cache: bool = True) -> np.ndarray:
        h, side = self._split_input(x)
        caches = []
        for spec, ps in zip(self.specs, self.params):
            h, c = self._layer_forward(spec, ps, h, side)
            caches.append(c)
        if cache:
            self._cache = caches
        return h

    def __call__(self, x):
        return self.forward(x, cache=False)

    def kink_distance(self, x) -> float:
        """Smallest |input| seen by any leaky ReLU for ``x`` (inf if none).

        Central differences are meaningless when a perturbation crosses a
        kink, so gradient checks draw inputs that keep this away from zero.
        """
        h, side = self._split_input(x)
        best = np.inf
        for spec, ps in zip(self.specs, self.params):
            if spec.kind == "leaky_relu":
                best = min(best, float(np.min(np.abs(h))))
            h, _ = self._layer_forward(spec, ps, h, side)
        return best

    def backward(self, output_grad) -> np.ndarray:
        """Accumulate parameter gradients and return d(loss)/d(input)."""
        if self._cache is None:
            raise StateError("backward called before forward")
        caches, self._cache = self._cache, None
        g = np.asarray(output_grad, dtype=self.dtype)
        side_grad = None
        for spec, gs, ps, c in zip(
            reversed(self.specs), reversed(self.grads), reversed(self.params), reversed(caches)
        ):
            k = spec.kind
            if k == "dense":
                w = ps[0]
                gs[0] += g.T @ c
                gs[1] += g.sum(axis=0)
                g = g @ w
            elif k == "conv2d":
                w = ps[0]
                cols, in_shape = c
                n = g.shape[0]
                g2 = g.reshape(n, w.shape[0], -1)
                gs[0] += np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
                gs[1] += g2.sum(axis=(0, 2))
                dcols = np.matmul(w.reshape(w.shape[0], -1).T, g2)
                g = _col2im(dcols, in_shape, g.shape[2], g.shape[3])
            elif k == "leaky_relu":
                g = np.where(c, g, g * self.dtype(spec.slope))
            elif k == "tanh":
                sl, y = c
                g = g.copy()
                g[:, sl] *= 1 - y * y
            elif k == "sigmoid":
                sl, y = c
                g = g.copy()
                g[:, sl] *= y * (1 - y)
            elif k == "flatten":
                g = g.reshape(c)
            elif k == "concat":
                side_grad = g[:, c:]
                g = g[:, :c]
        if self.image_shape:
            g = g.reshape(g.shape[0], -1)
            if side_grad is None:
                side_grad = np.zeros((g.shape[0], self.side_dim), self.dtype)
            return np.concatenate([g, side_grad], axis=1)
        return g


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class Adam:
    """Adam with bias correction over a network's parameter arrays."""

    net: Network
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    step_count: int = 0

    def __post_init__(self):
        self.m = [np.zeros_like(p) for p, _ in self.net.parameters()]
        self.v = [np.zeros_like(p) for p, _ in self.net.parameters()]

    def step(self):
        """Apply one update from the accumulated gradients, then zero them."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for (p, g), m, v in zip(self.net.parameters(), self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps_hat)).astype(p.dtype)
        self.net.zero_grad()


# ---------------------------------------------------------------------------
# checkpoints

_HEADER = struct.Struct("<4sH")
_LAYOUT = struct.Struct("<IIIIH")
_LAYER = struct.Struct("<B5if")
_COUNT = struct.Struct("<Q")


def _layout_bytes(net: Network) -> bytes:
    c, h, w = net.image_shape or (0, 0, 0)
    out = [_LAYOUT.pack(c, h, w, net.side_dim, len(net.specs))]
    for s in net.specs:
        dims = tuple(s.dims) + (0,) * (5 - len(s.dims))
        out.append(_LAYER.pack(_KIND_CODES[s.kind], *dims, s.slope))
    return b"".join(out)


def save_params(net: Network) -> bytes:
    flat = [p.astype("<f4").ravel() for p, _ in net.parameters()]
    data = np.concatenate(flat) if flat else np.zeros(0, "<f4")
    return b"".join(
        [
            _HEADER.pack(MAGIC, FORMAT_VERSION),
            _layout_bytes(net),
            _COUNT.pack(data.size),
            data.tobytes(),
        ]
    )


def load_params(net: Network, blob: bytes) -> None:
    """Fill ``net`` from :func:`save_params` output, validating the layout."""
    buf = io.BytesIO(blob)

    def read(n):
        chunk = buf.read(n)
        if len(chunk) != n:
            raise FormatError("checkpoint truncated")
        return chunk

    magic, version = _HEADER.unpack(read(_HEADER.size))
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    expected = _layout_bytes(net)
    if read(len(expected)) != expected:
        raise FormatError("checkpoint layer table does not match network")
    (count,) = _COUNT.unpack(read(_COUNT.size))
    if count != net.num_params():
        raise FormatError("checkpoint parameter count mismatch")
    data = np.frombuffer(read(4 * count), dtype="<f4")
    if buf.read(1):
        raise FormatError("trailing bytes after checkpoint")
    offset = 0
    for p, _ in net.parameters():
        p[...] = data[offset : offset + p.size].reshape(p.shape)
        offset += p.size


def read_layout(blob: bytes) -> tuple[tuple[int, int, int] | None, int, list[LayerSpec]]:
    """Decode the layer table of a checkpoint without loading parameters."""
    if len(blob) < _HEADER.size + _LAYOUT.size:
        raise FormatError("checkpoint truncated")
    magic, version = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    c, h, w, side, n = _LAYOUT.unpack_from(blob, _HEADER.size)
    offset = _HEADER.size + _LAYOUT.size
    if len(blob) < offset + n * _LAYER.size:
        raise FormatError("checkpoint truncated")
    specs = []
    for i in range(n):
        code, *dims, slope = _LAYER.unpack_from(blob, offset + i * _LAYER.size)
        kind = _CODE_KINDS.get(code)
        if kind is None:
            raise FormatError(f"unknown layer code {code}")
        ndims = {"dense": 2, "conv2d": 5, "tanh": 2, "sigmoid": 2, "concat": 1}.get(kind, 0)
        specs.append(LayerSpec(kind, tuple(dims[:ndims]), slope))
    return ((c, h, w) if c else None), side, specs


# ---------------------------------------------------------------------------
# finite-difference verification


def relative_error(a, b) -> float:
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def gradient_check(
    net: Network,
    x,
    rng: np.random.Generator,
    h: float = 1e-3,
    max_coords: int | None = None,
) -> dict[str, float]:
    """Compare backprop against central differences of ``sum(R * net(x))``.

    ``R`` is a fixed random projection of the output.  For large parameter
    arrays only ``max_coords`` randomly chosen coordinates are perturbed.
    Returns the norm-relative error per parameter array plus ``"input"``.
    """
    x = np.asarray(x, net.dtype)
    out = net.forward(x)
    proj = rng.standard_normal(out.shape).astype(net.dtype)
    net.zero_grad()
    dx = net.backward(proj)

    def loss(inp):
        return float(np.sum(np.asarray(net(inp), np.float64) * proj))

    errors = {}
    for li, (ps, gs) in enumerate(zip(net.params, net.grads)):
        for pi, (p, g) in enumerate(zip(ps, gs)):
            flat = p.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = rng.choice(flat.size, size=max_coords, replace=False)
            num = np.empty(idx.size)
            for n, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + h
                fp = loss(x)
                flat[i] = old - h
                fm = loss(x)
                flat[i] = old
                num[n] = (fp - fm) / (2 * h)
            errors[f"{li}.{net.specs[li].kind}.{'wb'[pi]}"] = relative_error(g.reshape(-1)[idx], num)
    xf = x.reshape(-1)
    idx = np.arange(xf.size)
    if max_coords is not None and xf.size > max_coords:
        idx = rng.choice(xf.size, size=max_coords, replace=False)
    num = np.empty(idx.size)
    for n, i in enumerate(idx):
        old = xf[i]
        xf[i] = old + h
        fp = loss(x)
        xf[i] = old - h
        fm = loss(x)
        xf[i] = old
        num[n] = (fp - fm) / (2 * h)
    errors["input"] = relative_error(dx.reshape(-1)[idx], num)
    net.zero_grad()
    return errors
