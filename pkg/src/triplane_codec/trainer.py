"""Joint optimisation of planes, plane autoencoder, distribution model and masks."""

from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .anchors import AnchorCloud, bounds_from_positions
from .context import (
    DEFAULT_HIDDEN,
    DEFAULT_K,
    GROUPS,
    ContextPipeline,
    DistributionModel,
    KnnIndex,
    QuantConfig,
    attribute_matrix,
    channel_gaussian_codelength,
    group_dims,
    hard_codelength,
    quantize_eval,
)
from .errors import TrainingError, ValidationError
from .gaussian import bin_bits, inverse_softplus
from .masking import MaskParams, mask_backward, mask_loss, mask_loss_grad
from .triplane import (
    ContractParams,
    PlaneAutoencoder,
    TriPlaneGrid,
    decode_backward,
    decode_forward,
    decode_planes,
    encode_backward,
    encode_forward,
    encode_planes,
)

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class TrainConfig:
    total_steps: int = 2000
    seed: int = 0
    resolution: int = 128
    channels: int = 16
    hidden: int = DEFAULT_HIDDEN
    knn: int = DEFAULT_K
    q_features: float = 0.05
    q_scalings: float = 0.01
    q_offsets: float = 0.01
    lambda_e: float = 1.0
    lambda_m: float = 5e-4
    lambda_w: float = 0.0
    # plane values sit around 1e-2 while the entropy term is ~5 bits per
    # coefficient; at 1 the reconstruction term is too weak for the latent
    # to reproduce the planes
    lambda_tc: float = 20.0
    # entropy divisor; 0 means N * (38 + 3k), i.e. bits per coefficient
    eps: float = 0.0
    fidelity_features: float = 1.0
    fidelity_scalings: float = 1.0
    fidelity_offsets: float = 1.0
    lr_grid_start: float = 5e-3
    lr_grid_end: float = 1e-5
    lr_mask_start: float = 1e-2
    lr_mask_end: float = 1e-4
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    warmup_fraction: float = 0.1
    use_masks: bool = True
    mask_threshold: float = 0.5
    mask_init_logit: float = 2.0
    deterministic: bool = False
    threads: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValidationError("total_steps must be >= 1")
        if self.eps < 0:
            raise ValidationError("eps must be positive (or 0 for the default normalisation)")
        for f in ("lambda_e", "lambda_m", "lambda_w", "lambda_tc"):
            if getattr(self, f) < 0:
                raise ValidationError(f"{f} must be nonnegative")
        if self.resolution % 8 or self.resolution < 8:
            raise ValidationError("resolution must be a positive multiple of 8")
        if not 0 <= self.warmup_fraction < 1:
            raise ValidationError("warmup_fraction must lie in [0, 1)")

    @property
    def qcfg(self) -> QuantConfig:
        return QuantConfig(self.q_features, self.q_scalings, self.q_offsets)

    def entropy_divisor(self, n: int, k: int) -> float:
        return self.eps if self.eps > 0 else float(n * (38 + 3 * k))

    @property
    def warmup_steps(self) -> int:
        return int(self.warmup_fraction * self.total_steps)

    def lr(self, group: str, step: int) -> float:
        a, b = {
            "grid": (self.lr_grid_start, self.lr_grid_end),
            "mask": (self.lr_mask_start, self.lr_mask_end),
        }.get(group, (self.lr_start, self.lr_end))
        t = step / max(self.total_steps - 1, 1)
        return a * (b / a) ** min(t, 1.0)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


@dataclass
class LossParts:
    fidelity: float = 0.0
    entropy: float = 0.0  # bits
    mask: float = 0.0
    wavelet: float = 0.0
    tri_rec: float = 0.0


def total_loss(parts: LossParts, cfg: TrainConfig, step: int = 0, divisor: float | None = None) -> float:
    for name, value in asdict(parts).items():
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss component '{name}' at step {step}")
    eps = divisor if divisor is not None else (cfg.eps or 1.0)
    return (
        parts.fidelity
        + cfg.lambda_e * parts.entropy / eps
        + cfg.lambda_m * parts.mask
        + cfg.lambda_w * parts.wavelet
        + cfg.lambda_tc * parts.tri_rec
    )


@dataclass
class TrainState:
    grid: np.ndarray
    ae: PlaneAutoencoder
    model: DistributionModel
    masks: MaskParams
    contract: ContractParams
    qcfg: QuantConfig
    knn: int
    step: int = 0
    moments: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def params(self) -> dict:
        p = {"grid": self.grid}
        p.update({f"model.{k}": v for k, v in self.model.params().items()})
        p.update({f"ae.{k}": v for k, v in self.ae.params().items()})
        p["mask.anchor"] = self.masks.anchor_logits
        p["mask.offset"] = self.masks.offset_logits
        return p

    @property
    def resolution(self) -> int:
        return self.grid.shape[1]

    @property
    def channels(self) -> int:
        return self.grid.shape[3]

    def copy(self) -> "TrainState":
        return TrainState(
            self.grid.copy(), self.ae.copy(), self.model.copy(), self.masks.copy(), self.contract, self.qcfg,
            self.knn, self.step, {k: (m.copy(), v.copy()) for k, (m, v) in self.moments.items()},
            list(self.history),
        )


def param_group(name: str) -> str:
    if name == "grid":
        return "grid"
    if name.startswith("mask."):
        return "mask"
    return name.split(".")[0]


def init_state(cloud: AnchorCloud, cfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    b = bounds_from_positions(cloud.positions)
    params = ContractParams(b.center, b.radius)
    grid = TriPlaneGrid.random(rng, cfg.resolution, cfg.channels).planes
    ae = PlaneAutoencoder.init(rng, cfg.channels)
    in_dim = (cfg.knn + 1) * 3 * cfg.channels + 3
    model = DistributionModel.init(rng, in_dim, cloud.k, cfg.hidden, head_scale=0.1)
    # start from the context-free per-channel Gaussian
    values = attribute_matrix(cloud)
    qvec = cfg.qcfg.vector(cloud.k)
    d = model.coeff_dim
    model.b3[:d] = values.mean(axis=0)
    model.b3[d:] = inverse_softplus(np.maximum(values.std(axis=0), qvec))
    masks = MaskParams.full(cloud.n, cloud.k, cfg.mask_init_logit, cfg.mask_threshold)
    return TrainState(grid, ae, model, masks, params, cfg.qcfg, cfg.knn)


class Objective:
    """Forward and hand-derived backward pass of the training loss for one cloud."""

    def __init__(self, cloud: AnchorCloud, cfg: TrainConfig, state: TrainState, index: KnnIndex | None = None):
        self.cloud = cloud
        self.cfg = cfg
        self.n, self.k = cloud.n, cloud.k
        index = index or KnnIndex(cloud.positions, state.knn)
        self.pipe = ContextPipeline(cloud.positions, state.contract, state.resolution, index)
        self.values = attribute_matrix(cloud)
        self.qvec = cfg.qcfg.vector(self.k)
        self.d = self.values.shape[1]
        self.divisor = cfg.entropy_divisor(self.n, self.k)
        dims = group_dims(self.k)
        self.fid_w = np.concatenate([np.full(dims[g], getattr(cfg, f"fidelity_{g}")) for g in GROUPS])
        self.n_fixed = dims["features"] + dims["scalings"]
        self.masked_err = np.abs(self.values) / self.qvec

    def _coeff_mask(self, anchor_m, offset_m):
        slot = np.repeat(offset_m, 3, axis=1)
        return anchor_m[:, None] * np.concatenate([np.ones((self.n, self.n_fixed)), slot], axis=1)

    def evaluate(self, state: TrainState, phase2: bool, noise=None, with_grad: bool = True,
                 use_masks: bool | None = None, mask_values=None):
        """Returns (total, LossParts, grads or None).

        noise: (N, D) uniform draws in [-1/2, 1/2] or None for no proxy noise.
        mask_values: optional (anchor (N,), offset (N, k)) real-valued masks
        overriding the hard masks; used to check the mask gradient path.
        """
        cfg = self.cfg
        use_masks = (cfg.use_masks and phase2) if use_masks is None else use_masks
        grid = state.grid
        if phase2:
            latent, enc_acts = encode_forward(grid, state.ae)
            planes, ups = decode_forward(latent, state.ae)
        else:
            planes = grid
        ctx = self.pipe.contexts(planes)
        mu, sigma, cache = state.model.forward(ctx)
        if noise is None:
            centers, keep_err = self.values, np.zeros_like(self.values)
        else:
            centers, keep_err = self.values + noise * self.qvec, np.abs(noise)
        res = bin_bits(centers, mu, sigma, self.qvec, grad=with_grad)
        bits = res[0] if with_grad else res

        if mask_values is not None:
            am, om = mask_values
        elif use_masks:
            am, om = (m.astype(np.float64) for m in state.masks.hard())
        else:
            am, om = np.ones(self.n), np.ones((self.n, self.k))
        cmask = self._coeff_mask(am, om)

        per_coeff = self.fid_w / (self.n * self.d)
        parts = LossParts(
            fidelity=float(np.sum(per_coeff * (cmask * keep_err + (1 - cmask) * self.masked_err))),
            entropy=float(np.sum(cmask * bits)),
            mask=mask_loss(state.masks) if use_masks else 0.0,
            tri_rec=float(np.mean(np.abs(grid - planes))) if phase2 else 0.0,
        )
        total = total_loss(parts, cfg, state.step, self.divisor)
        if not with_grad:
            return total, parts, None

        _, dmu_b, dsig_b = res
        scale = cfg.lambda_e / self.divisor
        g_model, dctx = state.model.backward(cache, scale * cmask * dmu_b, scale * cmask * dsig_b)
        dplanes = self.pipe.backward(dctx, state.channels)
        grads = {f"model.{k}": v for k, v in g_model.items()}
        if phase2:
            dtri = cfg.lambda_tc * np.sign(planes - grid) / grid.size
            dlatent, g_dec = decode_backward(state.ae, ups, dplanes + dtri)
            dgrid, g_enc = encode_backward(state.ae, enc_acts, dlatent)
            grads.update({f"ae.{k}": v for k, v in {**g_dec, **g_enc}.items()})
            grads["grid"] = dgrid - dtri
        else:
            grads["grid"] = dplanes
            grads.update({f"ae.{k}": np.zeros_like(v) for k, v in state.ae.params().items()})

        dcm = scale * bits + per_coeff * (keep_err - self.masked_err)
        slot = np.concatenate([np.ones((self.n, self.n_fixed)), np.repeat(om, 3, axis=1)], axis=1)
        d_am = np.sum(dcm * slot, axis=1)
        d_om = (dcm[:, self.n_fixed:] * am[:, None]).reshape(self.n, self.k, 3).sum(axis=2)
        grads["mask.values"] = (d_am, d_om)
        if use_masks:
            ga, go = mask_loss_grad(state.masks)
            grads["mask.anchor"] = mask_backward(state.masks.anchor_logits, d_am) + cfg.lambda_m * ga
            grads["mask.offset"] = mask_backward(state.masks.offset_logits, d_om) + cfg.lambda_m * go
        else:
            grads["mask.anchor"] = np.zeros_like(state.masks.anchor_logits)
            grads["mask.offset"] = np.zeros_like(state.masks.offset_logits)
        return total, parts, grads


def optimizer_step(state: TrainState, grads: dict, lr) -> TrainState:
    """Bias-corrected Adam update, in place. `lr` is a float or a callable(group) -> float."""
    params = state.params()
    for name, g in grads.items():
        if name in params and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name} at step {state.step}")
    t = state.step + 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m, v = state.moments.get(name, (np.zeros_like(p), np.zeros_like(p)))
        m = BETA1 * m + (1 - BETA1) * g
        v = BETA2 * v + (1 - BETA2) * g * g
        state.moments[name] = (m, v)
        rate = lr(param_group(name)) if callable(lr) else lr
        mhat = m / (1 - BETA1**t)
        vhat = v / (1 - BETA2**t)
        p -= rate * mhat / (np.sqrt(vhat) + ADAM_EPS)
    state.step = t
    return state


@contextlib.contextmanager
def _thread_limit(cfg: TrainConfig):
    n = 1 if cfg.deterministic else (cfg.threads or None)
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def fit(cloud: AnchorCloud, cfg: TrainConfig, state: TrainState | None = None, callback=None) -> TrainState:
    """Run cfg.total_steps optimisation steps; returns the trained state.

    The first warmup_fraction of steps use exact bins on the raw planes
    (autoencoder trained on reconstruction only); afterwards proxy noise,
    masks and the autoencoder path are switched on.
    """
    state = state or init_state(cloud, cfg)
    if state.masks.anchor_logits.shape != (cloud.n,):
        raise ValidationError("state masks do not match the cloud")
    obj = Objective(cloud, cfg, state)
    rng = np.random.default_rng([cfg.seed, 7])
    with _thread_limit(cfg):
        for step in range(state.step, cfg.total_steps):
            phase2 = step >= cfg.warmup_steps
            noise = rng.uniform(-0.5, 0.5, size=obj.values.shape) if phase2 else None
            good = state.copy()
            try:
                total, parts, grads = obj.evaluate(state, phase2, noise)
                if not phase2:
                    _warm_autoencoder(state, cfg, grads)
                optimizer_step(state, grads, lambda g, s=step: cfg.lr(g, s))
            except (TrainingError, FloatingPointError) as exc:
                raise TrainingError(str(exc), checkpoint=good) from exc
            rec = {"step": step, "phase": 2 if phase2 else 1, "total": total, **asdict(parts)}
            state.history.append(rec)
            if callback is not None:
                callback(rec)
    return state


def _warm_autoencoder(state: TrainState, cfg: TrainConfig, grads: dict):
    """During warm-up, fit the autoencoder to the current planes without touching them."""
    latent, acts = encode_forward(state.grid, state.ae)
    planes, ups = decode_forward(latent, state.ae)
    dtri = cfg.lambda_tc * np.sign(planes - state.grid) / state.grid.size
    dlatent, g_dec = decode_backward(state.ae, ups, dtri)
    _, g_enc = encode_backward(state.ae, acts, dlatent)
    grads.update({f"ae.{k}": v for k, v in {**g_dec, **g_enc}.items()})


def codelength_comparison(cloud: AnchorCloud, state: TrainState) -> dict:
    """Ideal attribute bits per anchor: trained model versus per-column Gaussian.

    Both figures are computed from the same hard-quantized symbols of every
    coefficient (masks ignored), with contexts taken from the autoencoder's
    reconstruction of the planes as the decoder would see them.
    """
    qvec = state.qcfg.vector(cloud.k)
    symbols, _ = quantize_eval(attribute_matrix(cloud), qvec)
    planes = decode_planes(encode_planes(state.grid, state.ae), state.ae).planes
    index = KnnIndex(cloud.positions, state.knn)
    ctx = ContextPipeline(cloud.positions, state.contract, state.resolution, index).contexts(planes)
    mu, sigma, _ = state.model.forward(ctx)
    model_bits = float(hard_codelength(symbols, mu, sigma, qvec).sum()) / cloud.n
    base_bits = float(channel_gaussian_codelength(symbols, qvec).sum()) / cloud.n
    return {"model": model_bits, "baseline": base_bits, "gain": 1.0 - model_bits / base_bits}


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(loss_fn, params: dict, grads: dict, n_coords: int = 50, rng=None, atol: float = 1e-10,
               rel_step: float = 1e-6, roundoff: bool = True) -> dict:
    """Central-difference check of analytic gradients.

    loss_fn() must read the arrays in `params` (perturbed in place).
    Returns {name: max relative error}, relative to the finite-difference
    value with `atol` as the floor of the denominator. Each discrepancy is
    first reduced by the rounding error of the difference quotient,
    8 * eps * |loss| / step, so coordinates whose true derivative sits
    below what fp64 differencing can resolve do not dominate the report.
    roundoff=False reports the raw discrepancy; the step is
    rel_step * max(1, |theta|).
    """
    eps = np.finfo(np.float64).eps
    rng = rng or np.random.default_rng(0)
    report = {}
    for name, p in params.items():
        flat = p.reshape(-1)
        g = np.asarray(grads[name]).reshape(-1)
        coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        worst = 0.0
        for i in coords:
            old = flat[i]
            h = rel_step * max(1.0, abs(old))
            flat[i] = old + h
            fp = loss_fn()
            up = flat[i]
            flat[i] = old - h
            fm = loss_fn()
            down = flat[i]
            flat[i] = old
            # divide by the step actually taken, not the nominal one
            fd = (fp - fm) / (up - down)
            slack = 8 * eps * max(abs(fp), abs(fm)) / (up - down) if roundoff else 0.0
            err = max(abs(g[i] - fd) - slack, 0.0) / max(abs(fd), atol)
            worst = max(worst, err)
        report[name] = worst
    return report


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainState, path, cfg: TrainConfig | None = None):
    arrays = {f"p/{k}": v for k, v in state.params().items()}
    for k, (m, v) in state.moments.items():
        arrays[f"m/{k}"] = m
        arrays[f"v/{k}"] = v
    meta = {
        "center": state.contract.center.tolist(),
        "radius": state.contract.radius,
        "q": list(state.qcfg.as_tuple()),
        "knn": state.knn,
        "k": state.model.k,
        "step": state.step,
        "mask_threshold": state.masks.threshold,
        "history": state.history,
        "config": asdict(cfg) if cfg else None,
    }
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> TrainState:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        p = {k[2:]: z[k].copy() for k in z.files if k.startswith("p/")}
        moments = {k[2:]: (z[k].copy(), z["v/" + k[2:]].copy()) for k in z.files if k.startswith("m/")}
    ae = PlaneAutoencoder(
        [p[f"ae.enc_w{i}"] for i in range(3)], [p[f"ae.enc_b{i}"] for i in range(3)],
        [p[f"ae.dec_w{i}"] for i in range(3)], [p[f"ae.dec_b{i}"] for i in range(3)],
    )
    model = DistributionModel(*(p[f"model.{n}"] for n in DistributionModel.param_names()), k=meta["k"])
    masks = MaskParams(p["mask.anchor"], p["mask.offset"], meta["mask_threshold"])
    state = TrainState(
        p["grid"], ae, model, masks, ContractParams(np.array(meta["center"]), meta["radius"]),
        QuantConfig(*meta["q"]), meta["knn"], meta["step"], moments, meta["history"],
    )
    return state


def checkpoint_config(path) -> TrainConfig | None:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
    return TrainConfig(**meta["config"]) if meta.get("config") else None


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
