"""Decoder-side context assembly, the distribution MLP, quantization and the entropy loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .anchors import FEATURE_DIM, SCALING_DIM, AnchorCloud
from .errors import SymbolRangeError, ValidationError
from .gaussian import bin_bits, coeff_probability, sigmoid, softplus
from .triplane import ContractParams, PlaneSampler, TriPlaneGrid, contract

SIGMA_MIN = 1e-6
DEFAULT_K = 4
DEFAULT_HIDDEN = 96
RAW_SYMBOL_MAX = 2**31 - 1
GROUPS = ("features", "scalings", "offsets")


# ---------------------------------------------------------------------------
# nearest neighbours


def _sq_dist(positions, i, j):
    d = positions[j] - positions[i]
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def brute_force_knn(positions, k):
    """O(N^2) reference: (N, min(k, N-1)) neighbours sorted by (distance, index)."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    kk = min(k, n - 1)
    out = np.empty((n, kk), dtype=np.int64)
    idx = np.arange(n)
    for i in range(n):
        d2 = _sq_dist(positions, i, idx)
        order = np.lexsort((idx, d2))
        out[i] = order[order != i][:kk]
    return out


class KnnIndex:
    """Exact K-nearest-neighbour queries over anchor positions.

    Candidate sets come from a k-d tree; candidates are then re-ranked by an
    explicitly computed squared distance with ties broken by smaller index.
    Rows whose K-th neighbour ties with the edge of the candidate set fall
    back to a full scan, so results never depend on the tree's own ordering.
    """

    def __init__(self, positions, k: int = DEFAULT_K):
        self.positions = np.asarray(positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[0] < 1 or self.positions.shape[1] != 3:
            raise ValidationError("positions must be (N>=1, 3)")
        self.k = k
        self._tree = cKDTree(self.positions)
        self._cache = {}

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def neighbors(self, k: int | None = None) -> np.ndarray:
        k = self.k if k is None else k
        if k not in self._cache:
            self._cache[k] = self._all_neighbors(k)
        return self._cache[k]

    def query(self, i: int, k: int | None = None) -> np.ndarray:
        if not 0 <= i < self.n:
            raise ValidationError(f"anchor index {i} out of range for N={self.n}")
        return self.neighbors(k)[i]

    def _all_neighbors(self, k):
        n = self.n
        kk = min(k, n - 1)
        if kk <= 0:
            return np.empty((n, 0), dtype=np.int64)
        m = min(kk + 3, n)
        _, cand = self._tree.query(self.positions, k=m)
        cand = np.asarray(cand).reshape(n, m)
        rows = np.arange(n)[:, None]
        d2 = _sq_dist(self.positions, rows, cand)
        d2 = np.where(cand == rows, np.inf, d2)
        order = _rowwise_lexsort(cand, d2)
        cand = np.take_along_axis(cand, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)
        out = cand[:, :kk].copy()
        if m < n:
            # the tree guarantees nothing about points beyond the candidate
            # set that tie with the last kept neighbour
            edge = np.max(np.where(np.isfinite(d2), d2, -np.inf), axis=1)
            suspect = ~(d2[:, kk - 1] < edge * (1 - 1e-12))
            for i in np.flatnonzero(suspect):
                all_idx = np.arange(n)
                dd = _sq_dist(self.positions, i, all_idx)
                o = np.lexsort((all_idx, dd))
                out[i] = o[o != i][:kk]
        return out


def _rowwise_lexsort(idx, d2):
    # sort by d2 then idx within each row
    order = np.argsort(idx, axis=1, kind="stable")
    d2s = np.take_along_axis(d2, order, axis=1)
    order2 = np.argsort(d2s, axis=1, kind="stable")
    return np.take_along_axis(order, order2, axis=1)


def build_knn_index(positions, k: int = DEFAULT_K) -> KnnIndex:
    return KnnIndex(positions, k)


# ---------------------------------------------------------------------------
# context assembly


class ContextPipeline:
    """Context vectors for every anchor, with the matching backward pass.

    Only positions and planes are read, never coded attributes.
    """

    def __init__(self, positions, params: ContractParams, resolution: int, index: KnnIndex):
        self.positions = np.asarray(positions, dtype=np.float64)
        self.n = self.positions.shape[0]
        self.k = index.k
        self.neighbors = index.neighbors()
        self.sampler = PlaneSampler(self.positions, params, resolution)
        self.contracted = contract(self.positions, params)

    def dim(self, channels: int) -> int:
        return (self.k + 1) * 3 * channels + 3

    def contexts(self, planes: np.ndarray) -> np.ndarray:
        c = planes.shape[-1]
        feats = self.sampler.sample(planes)  # (N, 3C)
        width = 3 * c
        out = np.zeros((self.n, self.dim(c)))
        out[:, :width] = feats
        kk = self.neighbors.shape[1]
        for j in range(kk):
            out[:, (j + 1) * width:(j + 2) * width] = feats[self.neighbors[:, j]]
        out[:, -3:] = self.contracted
        return out

    def backward(self, dctx: np.ndarray, channels: int) -> np.ndarray:
        width = 3 * channels
        dfeat = dctx[:, :width].copy()
        for j in range(self.neighbors.shape[1]):
            block = dctx[:, (j + 1) * width:(j + 2) * width]
            np.add.at(dfeat, self.neighbors[:, j], block)
        return self.sampler.backward(dfeat, channels)


def assemble_context(cloud: AnchorCloud, grid: TriPlaneGrid, params: ContractParams, index: KnnIndex, i: int):
    if not 0 <= i < cloud.n:
        raise ValidationError(f"anchor index {i} out of range for N={cloud.n}")
    pipe = ContextPipeline(cloud.positions, params, grid.resolution, index)
    return pipe.contexts(grid.planes)[i]


# ---------------------------------------------------------------------------
# distribution model


def group_dims(k: int):
    return {"features": FEATURE_DIM, "scalings": SCALING_DIM, "offsets": 3 * k}


@dataclass
class DistributionModel:
    """Two hidden ReLU layers; one output head per attribute group.

    The heads are stored as a single matrix whose columns are
    [mu for all coefficients, raw sigma for all coefficients], with
    coefficients ordered features, scalings, offsets.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    k: int

    @classmethod
    def init(cls, rng, in_dim: int, k: int, hidden: int = DEFAULT_HIDDEN, head_scale: float = 1.0):
        out_dim = 2 * (FEATURE_DIM + SCALING_DIM + 3 * k)

        def dense(fan_in, fan_out, scale=1.0):
            bound = scale / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)

        w1, b1 = dense(in_dim, hidden)
        w2, b2 = dense(hidden, hidden)
        w3, b3 = dense(hidden, out_dim, head_scale)
        return cls(w1, b1, w2, b2, w3, b3, k)

    @classmethod
    def zeros(cls, in_dim: int, k: int, hidden: int = DEFAULT_HIDDEN):
        m = cls.init(np.random.default_rng(0), in_dim, k, hidden)
        for name in m.param_names():
            getattr(m, name)[...] = 0.0
        return m

    @staticmethod
    def param_names():
        return ("w1", "b1", "w2", "b2", "w3", "b3")

    def params(self) -> dict:
        return {name: getattr(self, name) for name in self.param_names()}

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def coeff_dim(self) -> int:
        return self.w3.shape[1] // 2

    def copy(self) -> "DistributionModel":
        return DistributionModel(*(getattr(self, n).copy() for n in self.param_names()), k=self.k)

    def forward(self, ctx):
        """Returns mu, sigma (N, D) and the cache used by backward."""
        ctx = np.atleast_2d(np.asarray(ctx, dtype=np.float64))
        if ctx.shape[1] != self.in_dim:
            raise ValidationError(f"context dim {ctx.shape[1]} != model input {self.in_dim}")
        z1 = ctx @ self.w1 + self.b1
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ self.w2 + self.b2
        h2 = np.maximum(z2, 0.0)
        out = h2 @ self.w3 + self.b3
        d = self.coeff_dim
        mu, raw = out[:, :d], out[:, d:]
        sigma = softplus(raw) + SIGMA_MIN
        return mu, sigma, (ctx, h1, h2, raw)

    def backward(self, cache, dmu, dsigma):
        ctx, h1, h2, raw = cache
        dout = np.concatenate([dmu, dsigma * sigmoid(raw)], axis=1)
        g = {"w3": h2.T @ dout, "b3": dout.sum(axis=0)}
        dh2 = (dout @ self.w3.T) * (h2 > 0)
        g["w2"] = h1.T @ dh2
        g["b2"] = dh2.sum(axis=0)
        dh1 = (dh2 @ self.w2.T) * (h1 > 0)
        g["w1"] = ctx.T @ dh1
        g["b1"] = dh1.sum(axis=0)
        dctx = dh1 @ self.w1.T
        return g, dctx

    def forward_pinned(self, ctx):
        """Forward pass with a fixed accumulation order and no BLAS calls."""
        ctx = np.atleast_2d(np.asarray(ctx, dtype=np.float64))
        if ctx.shape[1] != self.in_dim:
            raise ValidationError(f"context dim {ctx.shape[1]} != model input {self.in_dim}")
        h1 = np.maximum(_dense_pinned(ctx, self.w1, self.b1), 0.0)
        h2 = np.maximum(_dense_pinned(h1, self.w2, self.b2), 0.0)
        out = _dense_pinned(h2, self.w3, self.b3)
        d = self.coeff_dim
        return out[:, :d], softplus(out[:, d:]) + SIGMA_MIN

    def split(self, arr):
        """Split (N, D) columns into the three attribute groups."""
        dims = group_dims(self.k)
        a = dims["features"]
        b = a + dims["scalings"]
        return {"features": arr[:, :a], "scalings": arr[:, a:b], "offsets": arr[:, b:]}


def _dense_pinned(x, w, b):
    out = np.broadcast_to(b, (x.shape[0], w.shape[1])).copy()
    for j in range(w.shape[0]):
        out += x[:, j:j + 1] * w[j]
    return out


def predict_distribution(model: DistributionModel, ctx):
    """Per-group (mu, sigma) for one context vector or a batch."""
    single = np.asarray(ctx).ndim == 1
    mu, sigma, _ = model.forward(ctx)
    mus, sigmas = model.split(mu), model.split(sigma)
    if single:
        return {g: (mus[g][0], sigmas[g][0]) for g in GROUPS}
    return {g: (mus[g], sigmas[g]) for g in GROUPS}


# ---------------------------------------------------------------------------
# quantization


@dataclass(frozen=True)
class QuantConfig:
    features: float = 0.05
    scalings: float = 0.01
    offsets: float = 0.01

    def __post_init__(self):
        for g in GROUPS:
            if not getattr(self, g) > 0:
                raise ValidationError(f"quantization step for {g} must be positive")

    def step(self, group: str) -> float:
        return getattr(self, group)

    def vector(self, k: int) -> np.ndarray:
        """Quantization step for each coefficient column."""
        dims = group_dims(k)
        return np.concatenate([np.full(dims[g], self.step(g)) for g in GROUPS])

    def as_tuple(self):
        return (self.features, self.scalings, self.offsets)


def quantize_train(v, q, u):
    """Additive-noise proxy for rounding: v + u * q with u in [-1/2, 1/2]."""
    return np.asarray(v, dtype=np.float64) + np.asarray(u, dtype=np.float64) * q


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_eval(v, q, bound: int = RAW_SYMBOL_MAX):
    """Hard quantization. Returns (integer symbols, reconstruction s * q)."""
    s = round_half_away(np.asarray(v, dtype=np.float64) / q)
    if np.any(np.abs(s) > bound):
        raise SymbolRangeError(f"quantized symbol exceeds +/-{bound}")
    s = s.astype(np.int64)
    return s, s * q


def dequantize(s, q):
    return np.asarray(s, dtype=np.int64) * q


def attribute_matrix(cloud: AnchorCloud) -> np.ndarray:
    """(N, D) coded coefficients ordered features, scalings, offsets."""
    g = cloud.attribute_groups()
    return np.concatenate([g[name] for name in GROUPS], axis=1)


# ---------------------------------------------------------------------------
# entropy loss


@dataclass
class EntropyResult:
    bits: float
    group_bits: dict
    grads: dict | None = None


def entropy_loss(cloud: AnchorCloud, model: DistributionModel, grid: TriPlaneGrid, params: ContractParams,
                 index: KnnIndex, qcfg: QuantConfig, noise=None, ae=None, with_grad: bool = False):
    """Total bits of all coded coefficients under the predicted Gaussians.

    noise: None (bins centred on the exact values), an (N, D) array of
    uniform draws in [-1/2, 1/2], or a numpy Generator to draw them from.
    ae: if given, contexts are sampled from the autoencoder's reconstruction
    of the grid and gradients flow into its parameters.
    """
    from .triplane import decode_backward, decode_forward, encode_backward, encode_forward

    values = attribute_matrix(cloud)
    qvec = qcfg.vector(cloud.k)
    if isinstance(noise, np.random.Generator):
        noise = noise.uniform(-0.5, 0.5, size=values.shape)
    centers = values if noise is None else quantize_train(values, qvec, noise)

    planes = grid.planes
    if ae is not None:
        latent, enc_acts = encode_forward(planes, ae)
        planes, ups = decode_forward(latent, ae)
    pipe = ContextPipeline(cloud.positions, params, grid.resolution, index)
    ctx = pipe.contexts(planes)
    mu, sigma, cache = model.forward(ctx)
    if not with_grad:
        bits = bin_bits(centers, mu, sigma, qvec)
        return EntropyResult(float(bits.sum()), _group_sums(model, bits))
    bits, dmu, dsigma = bin_bits(centers, mu, sigma, qvec, grad=True)
    grads, dctx = model.backward(cache, dmu, dsigma)
    dplanes = pipe.backward(dctx, grid.channels)
    if ae is not None:
        dlatent, dec_grads = decode_backward(ae, ups, dplanes)
        dplanes, enc_grads = encode_backward(ae, enc_acts, dlatent)
        grads.update(dec_grads)
        grads.update(enc_grads)
    grads["grid"] = dplanes
    return EntropyResult(float(bits.sum()), _group_sums(model, bits), grads)


def _group_sums(model, bits):
    return {g: float(v.sum()) for g, v in model.split(bits).items()}


def hard_codelength(symbols, mu, sigma, qvec) -> np.ndarray:
    """Ideal bits of integer symbols under the predicted bins (hard rounding)."""
    p = coeff_probability(symbols, mu, sigma, qvec)
    return -np.log2(p)


def channel_gaussian_codelength(symbols, qvec) -> np.ndarray:
    """Ideal bits under one Gaussian per column fitted to the dequantized values.

    The context-free reference: every coefficient of a column shares the
    column's mean and standard deviation (floored at the step size).
    """
    symbols = np.asarray(symbols, dtype=np.float64)
    qvec = np.broadcast_to(np.asarray(qvec, dtype=np.float64), symbols.shape[1:])
    values = symbols * qvec
    mu = values.mean(axis=0)
    sigma = np.maximum(values.std(axis=0), qvec)
    return hard_codelength(symbols, mu, sigma, qvec)
