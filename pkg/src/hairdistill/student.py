"""The student field: positional encoding, an MLP with four heads, and
helpers to evaluate spatial gradients of the signed distance.

Two routes to the spatial gradient exist. :func:`grad_point` treats the
point as a tape leaf and runs a reverse pass; :func:`psi_forward` can also
push forward the three coordinate tangents alongside the activations, which
keeps the gradient a differentiable tensor so losses on it (tangency) can be
back-propagated into the parameters without second-order reverse mode.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import render

SOFTPLUS_BETA = 100.0
BETA_MIN = 1e-4
INIT_RADIUS = 0.4
CHECKPOINT_MAGIC = b"PSI1"


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class EncodingSpec:
    num_frequency_bands: int = 6
    include_raw_point: bool = True
    latent_dim: int = 12

    def __post_init__(self):
        if self.num_frequency_bands < 0 or self.latent_dim < 0:
            raise ValueError("num_frequency_bands and latent_dim must be non-negative")

    @property
    def point_dim(self) -> int:
        return 3 * (2 * self.num_frequency_bands + int(self.include_raw_point))

    @property
    def dim(self) -> int:
        return self.point_dim + self.latent_dim


def _latent_rows(w, n: int, spec: EncodingSpec) -> np.ndarray:
    w = np.asarray(w)
    if w.ndim == 1:
        if w.shape[0] != spec.latent_dim:
            raise DimensionError(f"latent has {w.shape[0]} entries, expected {spec.latent_dim}")
        return np.broadcast_to(w, (n, spec.latent_dim))
    if w.shape != (n, spec.latent_dim):
        raise DimensionError(f"latent block has shape {w.shape}, expected {(n, spec.latent_dim)}")
    return w


def encode(x, w, spec: EncodingSpec, dtype=None) -> np.ndarray:
    """Features [x, sin(2^j pi x), cos(2^j pi x) for j < L, w], shape (N, dim)."""
    x = np.asarray(x)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != 3:
        raise DimensionError("points must have three coordinates")
    dtype = dtype or (x.dtype if x.dtype in (np.float32, np.float64) else np.float64)
    x = x.astype(dtype, copy=False)
    parts = [x] if spec.include_raw_point else []
    for j in range(spec.num_frequency_bands):
        arg = (2.0 ** j * np.pi) * x
        parts += [np.sin(arg), np.cos(arg)]
    parts.append(_latent_rows(w, len(x), spec).astype(dtype, copy=False))
    feat = np.concatenate(parts, axis=1)
    return feat[0] if single else feat


def encode_tangents(x, spec: EncodingSpec, dtype=None) -> np.ndarray:
    """d feat / d x_k for k = 0, 1, 2, shape (3, N, dim)."""
    x = np.atleast_2d(np.asarray(x))
    dtype = dtype or (x.dtype if x.dtype in (np.float32, np.float64) else np.float64)
    n = len(x)
    out = np.zeros((3, n, spec.dim), dtype=dtype)
    col = 0
    if spec.include_raw_point:
        for k in range(3):
            out[k, :, k] = 1.0
        col = 3
    for j in range(spec.num_frequency_bands):
        f = 2.0 ** j * np.pi
        arg = f * x
        for k in range(3):
            out[k, :, col + k] = f * np.cos(arg[:, k])
            out[k, :, col + 3 + k] = -f * np.sin(arg[:, k])
        col += 6
    return out


@dataclass
class Trunk:
    """Fully connected softplus layers followed by a linear head."""

    weights: list
    biases: list

    @property
    def width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def depth(self) -> int:
        return len(self.weights) - 1

    def tensors(self) -> list:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def hidden(self, feat, tangents=None):
        """Last hidden activation (and its pushed-forward tangents)."""
        h, ht = feat, tangents
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            z = ad.matmul(h, W) + b
            if ht is not None:
                h, slope = ad.softplus_pair(z, SOFTPLUS_BETA)
                ht = slope * ad.matmul(ht, W)
            else:
                h = ad.softplus(z, SOFTPLUS_BETA)
        return h, ht

    def hidden_np(self, feat: np.ndarray) -> np.ndarray:
        h = feat
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = ad.softplus_np(h @ W.data + b.data, SOFTPLUS_BETA)
        return h


@dataclass
class PsiParams:
    """Two fully connected trunks over the same encoded input.

    The geometry trunk carries the s and c heads (evaluated at every render
    sample); the attribute trunk carries m_logit and o_raw (evaluated at
    surface points only). Keeping them apart stops the heavily weighted
    semantic and orientation losses from dragging the signed distance.
    """

    spec: EncodingSpec
    geometry: Trunk
    attributes: Trunk
    beta_raw: ad.Tensor

    @property
    def width(self) -> int:
        return self.geometry.width

    @property
    def depth(self) -> int:
        return self.geometry.depth

    @property
    def dtype(self):
        return self.beta_raw.data.dtype

    def tensors(self) -> list:
        """All trainable tensors in checkpoint (layer) order."""
        return [*self.geometry.tensors(), *self.attributes.tensors(), self.beta_raw]

    def beta(self):
        return ad.softplus(self.beta_raw) + BETA_MIN

    def beta_value(self) -> float:
        return float(ad.softplus_np(self.beta_raw.data)) + BETA_MIN

    def copy(self) -> "PsiParams":
        out = init_params(self.spec, self.width, self.depth, dtype=self.dtype,
                          attr_width=self.attributes.width)
        out.set_arrays([a.copy() for a in self.arrays()])
        return out

    def arrays(self) -> list:
        return [t.data for t in self.tensors()]

    def set_arrays(self, arrays) -> None:
        arrays = list(arrays)
        if len(arrays) != len(self.tensors()):
            raise ValueError("array count does not match the network layout")
        for t, a in zip(self.tensors(), arrays):
            a = np.asarray(a)
            if a.size != t.data.size:
                raise ValueError(f"array of size {a.size} cannot fill parameter of shape {t.data.shape}")
            t.data = np.array(a, dtype=t.data.dtype).reshape(t.data.shape)

    def save(self, path) -> None:
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path) -> "PsiParams":
        return load_checkpoint(path)


def _beta_raw_for(beta: float) -> float:
    return float(np.log(np.expm1(beta - BETA_MIN)))


def _trunk(rng, fan_in: int, width: int, depth: int, out: int, first_cols=None) -> tuple:
    weights, biases = [], []
    for layer in range(depth):
        w = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(width), (fan_in, width))
        if layer == 0 and first_cols is not None:
            keep = np.zeros(fan_in, dtype=bool)
            keep[first_cols] = True
            w[~keep] = 0.0
        weights.append(w)
        biases.append(np.zeros(width))
        fan_in = width
    weights.append(rng.normal(0.0, 0.1 / np.sqrt(width), (width, out)))
    biases.append(np.zeros(out))
    return weights, biases


def init_params(spec: EncodingSpec, width: int = 128, depth: int = 4, seed: int = 0,
                dtype=np.float32, init_radius: float = INIT_RADIUS, beta: float = 0.1,
                attr_width: int | None = None) -> PsiParams:
    """Geometric initialisation: s starts near init_radius - |x| inside-positive
    (negated under the negative-inside convention).

    The geometry trunk uses the usual sphere init for (soft)ReLU layers with
    only the raw-coordinate inputs active in the first layer.
    """
    if width < 1 or depth < 1:
        raise ValueError("width and depth must be positive")
    rng = np.random.default_rng(seed)
    cols = np.arange(3) if spec.include_raw_point else np.arange(0)
    gw, gb = _trunk(rng, spec.dim, width, depth, 4, first_cols=cols)
    sign = render.SDF_SIGN
    gw[-1][:, 0] = sign * rng.normal(-np.sqrt(np.pi) / np.sqrt(width), 1e-4, width)
    gb[-1][0] = sign * init_radius
    aw, ab = _trunk(rng, spec.dim, attr_width or width, depth, 4)
    cast = lambda arrs: [ad.Parameter(a.astype(dtype)) for a in arrs]
    return PsiParams(spec, Trunk(cast(gw), cast(gb)), Trunk(cast(aw), cast(ab)),
                     ad.Parameter(np.array(_beta_raw_for(beta), dtype=dtype)))


def fit_sphere(params: PsiParams, steps: int = 300, radius: float = INIT_RADIUS,
               seed: int = 0, batch: int = 2048, lr: float = 1e-3) -> PsiParams:
    """Regress s onto radius - |x| for random points and latents.

    Geometric initialisation alone is noisy for narrow trunks; a short fit
    makes the initial zero set a clean sphere for every latent.
    """
    rng = np.random.default_rng(seed)
    opt = Adam(params.geometry.tensors(), lr=lr)
    spec = params.spec
    for _ in range(steps):
        x = rng.uniform(-0.75, 0.75, (batch, 3)).astype(params.dtype)
        w = rng.uniform(-1.0, 1.0, (batch, spec.latent_dim)).astype(params.dtype)
        target = render.SDF_SIGN * (radius - np.linalg.norm(x, axis=1))
        with ad.GradientTape() as tape:
            s = geometry_forward(encode(x, w, spec, params.dtype), params)[0]
            loss = ad.mean(ad.absolute(s - target))
        opt.step(tape.gradient(loss, opt.tensors))
    return params


def zero_params(spec: EncodingSpec, width: int = 8, depth: int = 2, dtype=np.float64) -> PsiParams:
    p = init_params(spec, width, depth, dtype=dtype)
    p.set_arrays([np.zeros_like(a) for a in p.arrays()])
    return p


@dataclass
class FieldSample:
    """Per-point outputs; tensors when evaluated on a tape."""

    s: object
    c: object
    m: object
    o: object
    degenerate: np.ndarray
    m_logit: object = None
    grad_s: object = None  # (N, 3) when tangents were propagated
    extra: dict = field(default_factory=dict)


def _val(t):
    return t.data if isinstance(t, ad.Tensor) else t


def _check_feat(feat, params: PsiParams):
    if _val(feat).shape[-1] != params.spec.dim:
        raise DimensionError(f"feature width {_val(feat).shape[-1]} != {params.spec.dim}")


def geometry_forward(feat, params: PsiParams, tangents=None):
    """(s, c, grad_s); grad_s is None unless tangents (3, N, dim) are given."""
    _check_feat(feat, params)
    g = params.geometry
    h, ht = g.hidden(feat, tangents)
    out = ad.matmul(h, g.weights[-1]) + g.biases[-1]
    s = out[:, 0]
    c = ad.sigmoid(out[:, 1:4])
    grad_s = None
    if ht is not None:
        gs = ad.matmul(ht, g.weights[-1][:, 0:1])  # (3, N, 1)
        grad_s = ad.swapaxes(ad.reshape(gs, gs.shape[:2]), 0, 1)
    return s, c, grad_s


def attribute_forward(feat, params: PsiParams):
    """(m_logit, m, o, degenerate); o falls back to +y where |o_raw| <= 1e-8."""
    _check_feat(feat, params)
    a = params.attributes
    h, _ = a.hidden(feat)
    out = ad.matmul(h, a.weights[-1]) + a.biases[-1]
    m_logit = out[:, 0]
    m = ad.sigmoid(m_logit)
    o_raw = out[:, 1:4]
    raw = _val(o_raw)
    degenerate = np.sqrt((raw * raw).sum(axis=1)) <= 1e-8
    if degenerate.any():
        fallback = np.zeros_like(raw)
        fallback[:, 1] = 1.0
        o_raw = ad.where(degenerate[:, None], fallback, o_raw)
    o = o_raw / ad.norm(o_raw, axis=1, keepdims=True)
    return m_logit, m, o, degenerate


def psi_forward(feat, params: PsiParams, tangents=None) -> FieldSample:
    """Evaluate all four heads on features (N, dim).

    ``tangents`` (3, N, dim) are pushed forward through the geometry trunk to
    give ``grad_s`` = d s / d x. Orientation is o_raw / |o_raw|; rows with
    |o_raw| <= 1e-8 fall back to +y and are flagged ``degenerate``.
    """
    s, c, grad_s = geometry_forward(feat, params, tangents)
    m_logit, m, o, degenerate = attribute_forward(feat, params)
    return FieldSample(s, c, m, o, degenerate, m_logit, grad_s)


def evaluate(x, w, params: PsiParams, with_grad: bool = False, chunk: int = 65536) -> dict:
    """Numpy evaluation in chunks (no tape); returns arrays keyed s, c, m, o (, grad)."""
    x = np.atleast_2d(np.asarray(x))
    keys = ["s", "c", "m", "o", "degenerate"] + (["grad"] if with_grad else [])
    parts = {k: [] for k in keys}
    dt = params.dtype
    w = np.asarray(w)
    with ad.pause():
        for a in range(0, len(x), chunk):
            xb = x[a:a + chunk]
            wb = w if w.ndim == 1 else w[a:a + chunk]
            feat = encode(xb, wb, params.spec, dt)
            tan = encode_tangents(xb, params.spec, dt) if with_grad else None
            fs = psi_forward(feat, params, tan)
            parts["s"].append(_val(fs.s))
            parts["c"].append(_val(fs.c))
            parts["m"].append(_val(fs.m))
            parts["o"].append(_val(fs.o))
            parts["degenerate"].append(fs.degenerate)
            if with_grad:
                parts["grad"].append(_val(fs.grad_s))
    empty = {"s": (0,), "c": (0, 3), "m": (0,), "o": (0, 3), "degenerate": (0,), "grad": (0, 3)}
    return {k: np.concatenate(v) if v else np.zeros(empty[k], dtype=dt) for k, v in parts.items()}


def sdf_values(x, w, params: PsiParams, chunk: int = 65536) -> np.ndarray:
    """Signed distance only; skips every other head."""
    x = np.atleast_2d(np.asarray(x))
    out = np.empty(len(x), dtype=params.dtype)
    g = params.geometry
    w = np.asarray(w)
    for a in range(0, len(x), chunk):
        wb = w if w.ndim == 1 else w[a:a + chunk]
        h = g.hidden_np(encode(x[a:a + chunk], wb, params.spec, params.dtype))
        out[a:a + chunk] = h @ g.weights[-1].data[:, 0] + g.biases[-1].data[0]
    return out


def grad_point(x, w, params: PsiParams) -> np.ndarray:
    """Reverse-mode d s / d x through the encoding, shape (N, 3) (or (3,))."""
    x = np.asarray(x, dtype=params.dtype)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    spec = params.spec
    leaf = ad.Tensor(xs.copy(), requires_grad=True)
    with ad.GradientTape() as tape:
        parts = [leaf] if spec.include_raw_point else []
        for j in range(spec.num_frequency_bands):
            arg = leaf * (2.0 ** j * np.pi)
            parts += [ad.sin(arg), ad.cos(arg)]
        parts.append(_latent_rows(w, len(xs), spec).astype(params.dtype))
        feat = ad.concat(parts, axis=1)
        s = geometry_forward(feat, params)[0]
        total = ad.tsum(s)
    (g,) = tape.gradient(total, [leaf])
    return g[0] if single else g


# checkpoint -------------------------------------------------------------------

def save_checkpoint(path, params: PsiParams) -> None:
    """'PSI1', u64 header (L, raw, latent_dim, width, depth, attr_width, n_arrays),
    per array u64 ndim + dims, then every array as little-endian float32 in
    layer order (geometry trunk, attribute trunk, beta)."""
    arrays = params.arrays()
    spec = params.spec
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<7Q", spec.num_frequency_bands, int(spec.include_raw_point), spec.latent_dim,
                       params.width, params.depth, params.attributes.width, len(arrays))
    for a in arrays:
        buf += struct.pack("<Q", a.ndim)
        buf += struct.pack(f"<{a.ndim}Q", *a.shape)
    for a in arrays:
        buf += np.ascontiguousarray(a, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_checkpoint(path, dtype=np.float32) -> PsiParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a PSI1 checkpoint")
    off = 4
    L, raw, latent_dim, width, depth, attr_width, n = struct.unpack_from("<7Q", data, off)
    off += 56
    shapes = []
    for _ in range(n):
        (nd,) = struct.unpack_from("<Q", data, off)
        off += 8
        shapes.append(struct.unpack_from(f"<{nd}Q", data, off))
        off += 8 * nd
    params = init_params(EncodingSpec(L, bool(raw), latent_dim), width, depth, dtype=dtype,
                         attr_width=attr_width)
    arrays = []
    for shp in shapes:
        count = int(np.prod(shp)) if shp else 1
        arrays.append(np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shp))
        off += 4 * count
    params.set_arrays(arrays)
    return params


# optimiser ------------------------------------------------------------------

class Adam:
    """First/second-moment adaptive step over a list of tensors."""

    def __init__(self, tensors, lr: float = 1e-3, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.tensors = list(tensors)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]
        self.t = 0

    def step(self, grads, lr: float | None = None) -> None:
        self.t += 1
        lr = self.lr if lr is None else lr
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for t, g, m, v in zip(self.tensors, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            step = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            t.data = (t.data - step.astype(t.data.dtype)).astype(t.data.dtype)
