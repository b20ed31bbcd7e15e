"""Self-describing compressed scene container and the encode/decode pipeline.

Layout (little-endian, sections 8-byte aligned, CRC32 per section)::

    header      fixed struct, ends with a CRC32 of the preceding bytes
    table       7 entries: offset u64, length u64, crc u32, flags u32, estimated bits f64
    sections    masks, positions, planes, model, features, scalings, offsets
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..anchors import AnchorCloud
from ..context import GROUPS, ContextPipeline, DistributionModel, KnnIndex, QuantConfig, attribute_matrix, quantize_eval
from ..errors import CorruptionError, FormatError, TruncatedError, ValidationError
from ..gaussian import coeff_probability
from ..masking import MaskParams, apply_masks
from ..triplane import DOWNSAMPLE, ContractParams, PlaneAutoencoder, decode_planes, encode_planes
from .binmodel import GaussianBinModels, decode_symbols, encode_symbols

MAGIC = b"TCGS"
VERSION = 1
SECTIONS = ("masks", "positions", "planes", "model", "features", "scalings", "offsets")
POS_LEVELS = 65535

# magic, version, N, N_orig, k, K, R, C, H, n_sections, q(3 x f32), reserved,
# center(3 x f64), radius, pos_lo(3 x f64), pos_hi(3 x f64)
_HEADER = struct.Struct("<4sIQQIIIIII3fI3dd3d3d")
_HEADER_CRC = struct.Struct("<I")
_ENTRY = struct.Struct("<QQIId")


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _pad8(b: bytes) -> bytes:
    return b + b"\0" * (-len(b) % 8)


@dataclass
class SectionInfo:
    name: str
    offset: int
    length: int
    crc: int
    est_bits: float = 0.0


@dataclass
class SceneStats:
    n_anchors: int
    n_input: int
    k: int
    total_bytes: int
    sections: list = field(default_factory=list)
    table_digests: dict = field(default_factory=dict)

    def section(self, name) -> SectionInfo:
        return next(s for s in self.sections if s.name == name)

    @property
    def attribute_bytes(self) -> int:
        return sum(self.section(g).length for g in GROUPS)

    @property
    def estimated_attribute_bits(self) -> float:
        return sum(self.section(g).est_bits for g in GROUPS)

    @property
    def bits_per_anchor(self) -> float:
        return self.total_bytes * 8 / self.n_input

    @property
    def attribute_bits_per_anchor(self) -> float:
        return self.attribute_bytes * 8 / self.n_input

    @property
    def raw_bytes(self) -> int:
        return 4 * self.n_input * (3 + 38 + 3 * self.k)

    def rows(self):
        """(section, bytes, estimated bytes or None) per section."""
        out = []
        for s in self.sections:
            est = s.est_bits / 8 if s.name in GROUPS else None
            out.append((s.name, s.length, est))
        return out


@dataclass
class DecodedScene:
    cloud: AnchorCloud
    stats: SceneStats
    anchor_keep: np.ndarray  # (N_orig,) bool
    offset_keep: np.ndarray  # (N, k) bool
    symbols: dict


# ---------------------------------------------------------------------------
# section payloads


def _bitmap(bits: np.ndarray) -> bytes:
    return np.packbits(bits.astype(np.uint8).ravel(), bitorder="little").tobytes()


def _unbitmap(data: bytes, count: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=count, bitorder="little").astype(bool)


def _quantize_positions(pos):
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    ext = hi - lo
    scale = np.where(ext > 0, POS_LEVELS / np.where(ext > 0, ext, 1.0), 0.0)
    qp = np.clip(np.floor((pos - lo) * scale + 0.5), 0, POS_LEVELS).astype(np.uint16)
    return qp, lo, hi


def dequantize_positions(qp, lo, hi):
    step = (np.asarray(hi) - np.asarray(lo)) / POS_LEVELS
    return np.asarray(lo) + qp.astype(np.float64) * step


def _plane_payload(latent, ae: PlaneAutoencoder) -> bytes:
    r = latent.shape[1] * DOWNSAMPLE
    c = latent.shape[3]
    parts = [struct.pack("<II", r, c), latent.astype("<f4").tobytes()]
    for w, b in zip(ae.dec_w, ae.dec_b):
        parts += [w.astype("<f4").tobytes(), b.astype("<f4").tobytes()]
    return b"".join(parts)


def _parse_planes(data: bytes):
    r, c = struct.unpack_from("<II", data)
    if r % DOWNSAMPLE or r == 0 or c == 0:
        raise FormatError(f"bad plane dimensions R={r} C={c}")
    pos = 8
    side = r // DOWNSAMPLE

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        if pos + 4 * n > len(data):
            raise TruncatedError("plane section shorter than declared")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 4 * n
        return arr

    latent = take((3, side, side, c))
    widths = [(2 * c, c), (2 * c, 2 * c), (c, 2 * c)]
    dec_w, dec_b = [], []
    for cout, cin in widths:
        dec_w.append(take((cout, cin, 3, 3)))
        dec_b.append(take((cout,)))
    ae = PlaneAutoencoder([], [], dec_w, dec_b)
    return r, c, latent, ae


def _model_payload(model: DistributionModel) -> bytes:
    arrays = [getattr(model, n) for n in model.param_names()]
    table = [struct.pack("<I", len(arrays))]
    for a in arrays:
        table.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
    return b"".join(table) + b"".join(a.astype("<f4").tobytes() for a in arrays)


def _parse_model(data: bytes, k: int) -> DistributionModel:
    (count,) = struct.unpack_from("<I", data)
    if count != 6:
        raise FormatError(f"model section holds {count} arrays, expected 6")
    pos = 4
    shapes = []
    for _ in range(count):
        (nd,) = struct.unpack_from("<I", data, pos)
        shapes.append(struct.unpack_from(f"<{nd}I", data, pos + 4))
        pos += 4 + 4 * nd
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        if pos + 4 * n > len(data):
            raise TruncatedError("model section shorter than declared")
        arrays.append(np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float64))
        pos += 4 * n
    return DistributionModel(*arrays, k=k)


# ---------------------------------------------------------------------------
# decoder-side reconstruction, shared by both directions


def predict_from_decoded(positions, contract: ContractParams, knn: int, latent, ae: PlaneAutoencoder,
                         model: DistributionModel):
    """(mu, sigma) for every coefficient, computed only from decoder-available sections."""
    planes = decode_planes(latent, ae, pinned=True).planes
    index = KnnIndex(positions, knn)
    pipe = ContextPipeline(positions, contract, planes.shape[1], index)
    ctx = pipe.contexts(planes)
    return model.forward_pinned(ctx)


def _group_columns(k):
    a, b = 32, 35
    return {"features": slice(0, a), "scalings": slice(a, b), "offsets": slice(b, b + 3 * k)}


def _coded_entries(group, arr, offset_keep):
    """Select coded coefficients of a group in row-major order."""
    if group != "offsets":
        return arr.reshape(-1)
    n, k = offset_keep.shape
    return arr.reshape(n, k, 3)[offset_keep].reshape(-1)


# ---------------------------------------------------------------------------
# public API


def compress_scene(cloud: AnchorCloud, state, with_digests: bool = False):
    """Encode a cloud with a trained state. Returns (bytes, SceneStats)."""
    if getattr(state, "step", 0) < 1:
        raise ValidationError("state has not been trained")
    masks = state.masks
    if masks.anchor_logits.shape != (cloud.n,) or masks.offset_logits.shape != (cloud.n, cloud.k):
        raise ValidationError("trained masks do not match the cloud")
    pruned = apply_masks(cloud, masks)
    sub = pruned.cloud
    n, k = sub.n, sub.k
    qcfg = QuantConfig(*_f32(state.qcfg.as_tuple()))
    contract = state.contract

    qp, lo, hi = _quantize_positions(sub.positions)
    positions = dequantize_positions(qp, lo, hi)
    latent = _f32(encode_planes(state.grid, state.ae))
    ae = PlaneAutoencoder([], [], [_f32(w) for w in state.ae.dec_w], [_f32(b) for b in state.ae.dec_b])
    model = DistributionModel(*(_f32(getattr(state.model, p)) for p in DistributionModel.param_names()),
                              k=state.model.k)
    mu, sigma = predict_from_decoded(positions, contract, state.knn, latent, ae, model)

    anchor_keep, _ = masks.hard()
    payloads = {
        "masks": _bitmap(anchor_keep) + _bitmap(pruned.offset_keep),
        "positions": qp.astype("<u2").tobytes(),
        "planes": _plane_payload(latent, ae),
        "model": _model_payload(model),
    }
    est = {}
    digests = {}
    values = attribute_matrix(sub)
    cols = _group_columns(k)
    for g in GROUPS:
        q = qcfg.step(g)
        s, _ = quantize_eval(values[:, cols[g]], q)
        s = _coded_entries(g, s, pruned.offset_keep)
        m = _coded_entries(g, mu[:, cols[g]], pruned.offset_keep)
        sd = _coded_entries(g, sigma[:, cols[g]], pruned.offset_keep)
        models = GaussianBinModels(m, sd, q)
        payloads[g] = encode_symbols(s, models)
        est[g] = float(-np.log2(coeff_probability(s, m, sd, q)).sum())
        if with_digests:
            digests[g] = models.table_digest()

    header = _HEADER.pack(
        MAGIC, VERSION, n, cloud.n, k, state.knn, latent.shape[1] * DOWNSAMPLE, latent.shape[3],
        model.hidden, len(SECTIONS), *qcfg.as_tuple(), 0, *contract.center, contract.radius, *lo, *hi,
    )
    header += _HEADER_CRC.pack(zlib.crc32(header))
    offset = len(_pad8(header + b"\0" * (_ENTRY.size * len(SECTIONS))))
    entries, body, infos = [], [], []
    for name in SECTIONS:
        data = payloads[name]
        crc = zlib.crc32(data)
        entries.append(_ENTRY.pack(offset, len(data), crc, 0, est.get(name, 0.0)))
        infos.append(SectionInfo(name, offset, len(data), crc, est.get(name, 0.0)))
        padded = _pad8(data)
        body.append(padded)
        offset += len(padded)
    blob = _pad8(header + b"".join(entries)) + b"".join(body)
    stats = SceneStats(n, cloud.n, k, len(blob), infos, digests)
    return blob, stats


def read_header(blob: bytes):
    need = _HEADER.size + _HEADER_CRC.size
    if len(blob) < need:
        raise CorruptionError("file shorter than the container header")
    fields_ = _HEADER.unpack_from(blob)
    if fields_[0] != MAGIC:
        raise CorruptionError(f"bad magic {fields_[0]!r}")
    if fields_[1] != VERSION:
        raise CorruptionError(f"unsupported container version {fields_[1]}")
    (crc,) = _HEADER_CRC.unpack_from(blob, _HEADER.size)
    if crc != zlib.crc32(blob[:_HEADER.size]):
        raise CorruptionError("header checksum mismatch")
    (_, _, n, n_orig, k, knn, r, c, h, nsec, q1, q2, q3, _, cx, cy, cz, radius,
     lx, ly, lz, hx, hy, hz) = fields_
    if nsec != len(SECTIONS):
        raise CorruptionError(f"expected {len(SECTIONS)} sections, header says {nsec}")
    hdr = dict(n=n, n_orig=n_orig, k=k, knn=knn, resolution=r, channels=c, hidden=h,
               q=(q1, q2, q3), center=np.array([cx, cy, cz]), radius=radius,
               pos_lo=np.array([lx, ly, lz]), pos_hi=np.array([hx, hy, hz]))
    pos = need
    infos = []
    for name in SECTIONS:
        if pos + _ENTRY.size > len(blob):
            raise CorruptionError("section table truncated")
        off, length, crc, _, est = _ENTRY.unpack_from(blob, pos)
        infos.append(SectionInfo(name, off, length, crc, est))
        pos += _ENTRY.size
    return hdr, infos


def read_stats(blob: bytes) -> SceneStats:
    hdr, infos = read_header(blob)
    stats = SceneStats(hdr["n"], hdr["n_orig"], hdr["k"], len(blob), infos)
    return stats


def decompress_scene(blob: bytes, with_digests: bool = False) -> DecodedScene:
    hdr, infos = read_header(blob)
    end = max(i.offset + i.length + (-i.length % 8) for i in infos)
    if len(blob) < end:
        raise CorruptionError(f"file is {len(blob)} bytes, sections end at {end}")
    data = {}
    for info in infos:
        if info.offset + info.length > len(blob):
            raise CorruptionError(f"section '{info.name}' extends past the end of the file")
        chunk = bytes(blob[info.offset:info.offset + info.length])
        if zlib.crc32(chunk) != info.crc:
            raise CorruptionError(f"checksum mismatch in section '{info.name}'")
        data[info.name] = chunk

    n, n_orig, k = hdr["n"], hdr["n_orig"], hdr["k"]
    try:
        bitmap_a = (n_orig + 7) // 8
        anchor_keep = _unbitmap(data["masks"][:bitmap_a], n_orig)
        offset_keep = _unbitmap(data["masks"][bitmap_a:], n * k).reshape(n, k)
        if len(data["positions"]) != 6 * n:
            raise FormatError("position section has the wrong size")
        qp = np.frombuffer(data["positions"], dtype="<u2").reshape(n, 3)
        r, c, latent, ae = _parse_planes(data["planes"])
        model = _parse_model(data["model"], k)
    except (ValueError, struct.error, FormatError, TruncatedError) as exc:
        raise CorruptionError(f"malformed section: {exc}") from exc

    positions = dequantize_positions(qp, hdr["pos_lo"], hdr["pos_hi"])
    contract = ContractParams(hdr["center"], hdr["radius"])
    mu, sigma = predict_from_decoded(positions, contract, hdr["knn"], latent, ae, model)
    qcfg = QuantConfig(*hdr["q"])
    cols = _group_columns(k)
    recon = {}
    symbols = {}
    digests = {}
    for info in infos:
        g = info.name
        if g not in GROUPS:
            continue
        q = qcfg.step(g)
        m = _coded_entries(g, mu[:, cols[g]], offset_keep)
        sd = _coded_entries(g, sigma[:, cols[g]], offset_keep)
        models = GaussianBinModels(m, sd, q)
        try:
            s = decode_symbols(data[g], models, len(models))
        except TruncatedError as exc:
            raise CorruptionError(f"section '{g}': {exc}") from exc
        symbols[g] = s
        if with_digests:
            digests[g] = models.table_digest()
        info.est_bits = float(-np.log2(coeff_probability(s, m, sd, q)).sum())
        if g == "offsets":
            tmp = np.zeros((n, k, 3))
            tmp[offset_keep] = (s * q).reshape(-1, 3)
            full = tmp.reshape(n, 3 * k)
        else:
            full = (s * q).reshape(n, -1)
        recon[g] = full
    cloud = AnchorCloud(positions, recon["features"], recon["scalings"], recon["offsets"].reshape(n, k, 3))
    stats = SceneStats(n, n_orig, k, len(blob), infos, digests)
    return DecodedScene(cloud, stats, anchor_keep, offset_keep, symbols)


def expected_reconstruction(cloud: AnchorCloud, qcfg: QuantConfig):
    """Attribute values a lossless decode must reproduce: quantize_eval of the input."""
    q = QuantConfig(*_f32(qcfg.as_tuple()))
    return {
        "features": quantize_eval(cloud.features, q.features)[1],
        "scalings": quantize_eval(cloud.scalings, q.scalings)[1],
        "offsets": quantize_eval(cloud.offsets, q.offsets)[1],
    }
