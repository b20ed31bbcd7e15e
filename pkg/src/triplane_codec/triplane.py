"""Tri-plane feature field: contraction, bilinear sampling and the plane autoencoder.

Planes are stored channel-last as one array of shape (3, R, R, C) in the
order xy, yz, xz. Plane rows index the first projected coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

PLANE_AXES = ((0, 1), (1, 2), (0, 2))
DOWNSAMPLE = 8


_TINY = np.nextafter(0.0, 1.0)


@dataclass(frozen=True)
class ContractParams:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise ValidationError(f"contract radius must be positive, got {self.radius}")


@dataclass
class TriPlaneGrid:
    planes: np.ndarray  # (3, R, R, C)

    def __post_init__(self):
        self.planes = np.asarray(self.planes, dtype=np.float64)
        p = self.planes
        if p.ndim != 4 or p.shape[0] != 3 or p.shape[1] != p.shape[2]:
            raise ValidationError(f"planes must be (3, R, R, C), got {p.shape}")
        if p.shape[1] < 2 or p.shape[3] < 1:
            raise ValidationError("need R >= 2 and C >= 1")
        if not np.all(np.isfinite(p)):
            raise ValidationError("plane entries must be finite")

    @property
    def resolution(self) -> int:
        return self.planes.shape[1]

    @property
    def channels(self) -> int:
        return self.planes.shape[3]

    @classmethod
    def random(cls, rng, resolution: int, channels: int, scale: float = 1e-2) -> "TriPlaneGrid":
        return cls(rng.uniform(-scale, scale, size=(3, resolution, resolution, channels)))


def contract(x, params: ContractParams) -> np.ndarray:
    """Map points (..., 3) into the open unit cube.

    Points inside the unit ball (after normalization) are kept, points outside
    are squashed radially into the ball of radius 2, then (v + 2) / 4.
    """
    u = (np.asarray(x, dtype=np.float64) - params.center) / params.radius
    # scale by the largest component first so huge inputs do not overflow the norm
    big = np.max(np.abs(u), axis=-1, keepdims=True)
    unit = u / np.where(big > 0, big, 1.0)
    norm = big * np.linalg.norm(unit, axis=-1, keepdims=True)
    outside = norm > 1.0
    direction = unit / np.where(outside, np.linalg.norm(unit, axis=-1, keepdims=True), 1.0)
    v = np.where(outside, (2.0 - 1.0 / np.where(outside, norm, 1.0)) * direction, u)
    # far points round onto the cube faces in fp64; keep them strictly inside
    return np.clip((v + 2.0) / 4.0, _TINY, 1.0 - np.finfo(np.float64).epsneg)


def project_to_planes(c) -> np.ndarray:
    """(..., 3) cube coordinates -> (..., 3, 2) plane coordinates for xy, yz, xz."""
    c = np.asarray(c, dtype=np.float64)
    return np.stack([c[..., list(ax)] for ax in PLANE_AXES], axis=-2)


class PlaneSampler:
    """Precomputed bilinear stencils for a fixed set of points.

    Holds, per point and plane, the four flat node indices and weights so
    repeated sampling during training costs only a gather.
    """

    def __init__(self, x, params: ContractParams, resolution: int):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        self._build(project_to_planes(contract(x, params)), resolution)

    @classmethod
    def from_plane_coords(cls, uv, resolution: int) -> "PlaneSampler":
        """Stencils for explicit plane coordinates uv of shape (M, 3, 2) in [0, 1]."""
        obj = cls.__new__(cls)
        obj._build(np.asarray(uv, dtype=np.float64).reshape(-1, 3, 2), resolution)
        return obj

    def _build(self, uv, resolution):
        self.resolution = r = resolution
        self.n_points = uv.shape[0]
        uv = np.clip(uv, 0.0, 1.0) * (r - 1)
        i0 = np.minimum(np.floor(uv).astype(np.int64), r - 2)
        frac = uv - i0
        fa, fb = frac[..., 0], frac[..., 1]
        ia, ib = i0[..., 0], i0[..., 1]
        base = np.arange(3)[None, :] * r * r + ia * r + ib
        # corner order: (0,0), (0,1), (1,0), (1,1)
        self.index = np.stack([base, base + 1, base + r, base + r + 1], axis=-1)  # (M, 3, 4)
        self.weight = np.stack(
            [(1 - fa) * (1 - fb), (1 - fa) * fb, fa * (1 - fb), fa * fb], axis=-1
        )

    def sample(self, planes: np.ndarray) -> np.ndarray:
        """(3, R, R, C) -> (M, 3C), concatenated in plane order."""
        c = planes.shape[-1]
        flat = planes.reshape(-1, c)
        w = self.weight[..., None]
        out = w[..., 0, :] * flat[self.index[..., 0]]
        for j in range(1, 4):
            out = out + w[..., j, :] * flat[self.index[..., j]]
        return out.reshape(self.n_points, 3 * c)

    def backward(self, upstream: np.ndarray, channels: int) -> np.ndarray:
        """Gradient w.r.t. planes given d(loss)/d(samples) of shape (M, 3C)."""
        r = self.resolution
        up = upstream.reshape(self.n_points, 3, 1, channels)
        contrib = self.weight[..., None] * up  # (M, 3, 4, C)
        slots = (self.index[..., None] * channels + np.arange(channels)).ravel()
        grad = np.bincount(slots, weights=contrib.ravel(), minlength=3 * r * r * channels)
        return grad.reshape(3, r, r, channels)


def sample_triplane(grid: TriPlaneGrid, x, params: ContractParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = PlaneSampler(x, params, grid.resolution).sample(grid.planes)
    return out[0] if x.ndim == 1 else out


def sample_triplane_grad(grid: TriPlaneGrid, x, params: ContractParams, upstream) -> np.ndarray:
    sampler = PlaneSampler(x, params, grid.resolution)
    return sampler.backward(np.atleast_2d(np.asarray(upstream, dtype=np.float64)), grid.channels)


def tri_rec_loss(original, reconstructed) -> float:
    a = original.planes if isinstance(original, TriPlaneGrid) else np.asarray(original)
    b = reconstructed.planes if isinstance(reconstructed, TriPlaneGrid) else np.asarray(reconstructed)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def tri_rec_loss_grad(original: np.ndarray, reconstructed: np.ndarray) -> np.ndarray:
    """d(loss)/d(reconstructed); the gradient w.r.t. original is its negation."""
    return np.sign(reconstructed - original) / original.size


# ---------------------------------------------------------------------------
# convolution primitives, channel-last (B, H, W, C), weights (Cout, Cin, 3, 3)


def _im2col(x, stride):
    """Patches as a contiguous (B, Ho, Wo, 9 * Cin) array ordered (ky, kx, ci)."""
    bsz, h, wd, cin = x.shape
    ho, wo = (h + stride - 1) // stride, (wd + stride - 1) // stride
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((bsz, ho, wo, 9, cin))
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, 3 * ky + kx] = xp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride, :]
    return cols.reshape(bsz, ho, wo, 9 * cin)


def _weight_matrix(w):
    return w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0])


def conv_forward(x, w, b, stride=1):
    return _im2col(x, stride) @ _weight_matrix(w) + b


def conv_forward_pinned(x, w, b, stride=1):
    """Same result as conv_forward with a fixed, BLAS-free accumulation order.

    Every output element is bias + sum over (ky, kx, ci) in that loop order
    using separate IEEE multiplies and adds, so the bits do not depend on
    the linear-algebra backend or thread count.
    """
    bsz, h, wd, cin = x.shape
    ho, wo = (h + stride - 1) // stride, (wd + stride - 1) // stride
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(b, (bsz, ho, wo, w.shape[0])).copy()
    for ky in range(3):
        for kx in range(3):
            xs = xp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride, :]
            for ci in range(cin):
                out += xs[..., ci:ci + 1] * w[:, ci, ky, kx]
    return out


def conv_backward(x, w, dout, stride=1):
    bsz, h, wd, cin = x.shape
    ho, wo, cout = dout.shape[1:]
    cols = _im2col(x, stride).reshape(-1, 9 * cin)
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(3, 3, cin, cout).transpose(3, 2, 0, 1)
    db = d2.sum(axis=0)
    dcols = (d2 @ _weight_matrix(w).T).reshape(bsz, ho, wo, 9, cin)
    dxp = np.zeros((bsz, h + 2, wd + 2, cin))
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride, :] += dcols[:, :, :, 3 * ky + kx]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2_backward(d):
    b, h, w, c = d.shape
    return d.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# ---------------------------------------------------------------------------
# plane autoencoder


@dataclass
class PlaneAutoencoder:
    """Three stride-2 conv layers down, three (upsample, conv) layers up."""

    enc_w: list = field(default_factory=list)
    enc_b: list = field(default_factory=list)
    dec_w: list = field(default_factory=list)
    dec_b: list = field(default_factory=list)

    @classmethod
    def init(cls, rng, channels: int) -> "PlaneAutoencoder":
        c = channels
        widths_enc = [(2 * c, c), (2 * c, 2 * c), (c, 2 * c)]
        widths_dec = [(2 * c, c), (2 * c, 2 * c), (c, 2 * c)]

        def layer(cout, cin):
            bound = 1.0 / np.sqrt(cin * 9)
            return rng.uniform(-bound, bound, size=(cout, cin, 3, 3)), np.zeros(cout)

        enc = [layer(*s) for s in widths_enc]
        dec = [layer(*s) for s in widths_dec]
        return cls([w for w, _ in enc], [b for _, b in enc], [w for w, _ in dec], [b for _, b in dec])

    @classmethod
    def zeros(cls, channels: int) -> "PlaneAutoencoder":
        ae = cls.init(np.random.default_rng(0), channels)
        for arr in ae.enc_w + ae.enc_b + ae.dec_w + ae.dec_b:
            arr[...] = 0.0
        return ae

    @property
    def channels(self) -> int:
        return self.enc_w[0].shape[1]

    def decoder_arrays(self):
        out = []
        for w, b in zip(self.dec_w, self.dec_b):
            out += [w, b]
        return out

    def decoder_size(self) -> int:
        return sum(a.size for a in self.decoder_arrays())

    def params(self) -> dict:
        d = {}
        for i in range(3):
            d[f"enc_w{i}"] = self.enc_w[i]
            d[f"enc_b{i}"] = self.enc_b[i]
            d[f"dec_w{i}"] = self.dec_w[i]
            d[f"dec_b{i}"] = self.dec_b[i]
        return d

    def copy(self) -> "PlaneAutoencoder":
        return PlaneAutoencoder([a.copy() for a in self.enc_w], [a.copy() for a in self.enc_b],
                                [a.copy() for a in self.dec_w], [a.copy() for a in self.dec_b])


def _check_plane_shape(planes, ae):
    if planes.ndim != 4 or planes.shape[0] != 3 or planes.shape[1] != planes.shape[2]:
        raise ValidationError(f"expected (3, R, R, C) planes, got {planes.shape}")
    if planes.shape[1] % DOWNSAMPLE:
        raise ValidationError(f"plane resolution {planes.shape[1]} not divisible by {DOWNSAMPLE}")
    if planes.shape[3] != ae.channels:
        raise ValidationError(f"plane channels {planes.shape[3]} != autoencoder channels {ae.channels}")


def encode_forward(planes, ae: PlaneAutoencoder):
    """Returns latent and the activations needed by encode_backward."""
    _check_plane_shape(planes, ae)
    acts = [planes]
    h = planes
    for i in range(3):
        h = conv_forward(h, ae.enc_w[i], ae.enc_b[i], stride=2)
        if i < 2:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, acts


def encode_backward(ae: PlaneAutoencoder, acts, dlatent):
    grads = {}
    d = dlatent
    for i in (2, 1, 0):
        if i < 2:
            d = d * (acts[i + 1] > 0)
        d, grads[f"enc_w{i}"], grads[f"enc_b{i}"] = conv_backward(acts[i], ae.enc_w[i], d, stride=2)
    return d, grads


def decode_forward(latent, ae: PlaneAutoencoder):
    if latent.ndim != 4 or latent.shape[0] != 3 or latent.shape[3] != ae.dec_w[0].shape[1]:
        raise ValidationError(f"latent shape {latent.shape} does not match decoder")
    ups = []
    h = latent
    for i in range(3):
        u = upsample2(h)
        ups.append(u)
        h = conv_forward(u, ae.dec_w[i], ae.dec_b[i])
        if i < 2:
            h = np.maximum(h, 0.0)
    return h, ups


def decode_backward(ae: PlaneAutoencoder, ups, dplanes):
    grads = {}
    d = dplanes
    for i in (2, 1, 0):
        if i < 2:
            # ups[i + 1] is the upsampled post-ReLU output of layer i
            d = d * (ups[i + 1][:, ::2, ::2, :] > 0)
        du, grads[f"dec_w{i}"], grads[f"dec_b{i}"] = conv_backward(ups[i], ae.dec_w[i], d)
        d = upsample2_backward(du)
    return d, grads


def encode_planes(grid, ae: PlaneAutoencoder) -> np.ndarray:
    planes = grid.planes if isinstance(grid, TriPlaneGrid) else np.asarray(grid, dtype=np.float64)
    return encode_forward(planes, ae)[0]


def decode_planes(latent, ae: PlaneAutoencoder, pinned: bool = False) -> TriPlaneGrid:
    """Decode latents into full-resolution planes.

    pinned=True uses the backend-independent accumulation order required for
    bit-exact agreement between encoder and decoder.
    """
    latent = np.asarray(latent, dtype=np.float64)
    if not pinned:
        return TriPlaneGrid(decode_forward(latent, ae)[0])
    if latent.ndim != 4 or latent.shape[0] != 3 or latent.shape[3] != ae.dec_w[0].shape[1]:
        raise ValidationError(f"latent shape {latent.shape} does not match decoder")
    h = latent
    for i in range(3):
        h = conv_forward_pinned(upsample2(h), ae.dec_w[i], ae.dec_b[i])
        if i < 2:
            h = np.maximum(h, 0.0)
    return TriPlaneGrid(h)


def compressed_plane_size(resolution: int, channels: int, ae: PlaneAutoencoder) -> int:
    """Number of stored values for latent plus decoder weights."""
    side = resolution // DOWNSAMPLE
    return 3 * side * side * channels + ae.decoder_size()
