"""The ``.birf`` snapshot format.

All integers and floats are little-endian. Layout::

    offset  field
    0       magic            4s   b"BIRF"
    4       format_version   u16
    6       flags            u16  bit 0: MLP weights stored as float16
    8       header_size      u32  total header bytes, header_crc32 included
    12      feature_dim      u8
    13      n_levels_3d      u8
    14      n_levels_2d      u8
    15      pe_freqs         u8
    16      embedding_width  u16
    18      (reserved)       u16  zero
    20      levels           (n_levels_3d + n_levels_2d) x (resolution u32, table_size u32)
    ..      density mlp      input u16, output u16, hidden u16, hidden_layers u8, activation u8
    ..      color mlp        same layout
    ..      scene transform  scale f64, offset 3 x f64
    ..      background       3 x f32
    ..      grid_bytes       u64
    ..      mlp_bytes        u64
    ..      payload_crc32    u32  CRC-32 of the whole payload
    ..      header_crc32     u32  CRC-32 of every header byte before this field

The payload follows immediately: one packed bit array per grid level (3D
levels ascending, then the xy, xz and yz plane levels, each ascending),
each ``ceil(entries * F / 8)`` bytes with +1 -> 1, LSB first; then every
MLP tensor (density W0, b0, W1, b1, then color W0, b0, ...) row-major as
float32 or float16.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binarize import BinaryTensor, PackedBits, pack_bits, sign_forward, unpack_bits
from .errors import (
    BadMagicError,
    ChecksumError,
    SerializationError,
    SnapshotError,
    TruncatedSnapshotError,
    VersionMismatchError,
)
from .field import FieldModel
from .grid import PLANES, GridConfig, GridLevelConfig, HybridGrid, payload_bits
from .nn_core import MlpSpec, ParamTensor
from .render import WHITE, SceneTransform

MAGIC = b"BIRF"
FORMAT_VERSION = 1
FLAG_FP16 = 1
MB = 2**20

_PREFIX = struct.Struct("<4sHHI")
_COUNTS = struct.Struct("<BBBBHH")
_LEVEL = struct.Struct("<II")
_MLP = struct.Struct("<HHHBB")
_TAIL = struct.Struct("<d3d3fQQI")
_ACTIVATIONS = ("none", "sigmoid")


@dataclass(frozen=True)
class SnapshotHeader:
    version: int
    flags: int
    grid_config: GridConfig
    pe_freqs: int
    embedding_width: int
    density_spec: MlpSpec
    color_spec: MlpSpec
    scene_transform: SceneTransform
    background: tuple[float, float, float]
    grid_bytes: int
    mlp_bytes: int
    payload_crc32: int
    header_size: int

    @property
    def fp16(self) -> bool:
        return bool(self.flags & FLAG_FP16)

    @property
    def payload_bytes(self) -> int:
        return self.grid_bytes + self.mlp_bytes

    @property
    def file_size(self) -> int:
        return self.header_size + self.payload_bytes


def _header_size(n3: int, n2: int) -> int:
    return _PREFIX.size + _COUNTS.size + _LEVEL.size * (n3 + n2) + 2 * _MLP.size + _TAIL.size + 4


def _encode_header(h: SnapshotHeader) -> bytes:
    cfg = h.grid_config
    n3, n2 = len(cfg.levels_3d), len(cfg.levels_2d)
    parts = [
        _PREFIX.pack(MAGIC, h.version, h.flags, _header_size(n3, n2)),
        _COUNTS.pack(cfg.feature_dim, n3, n2, h.pe_freqs, h.embedding_width, 0),
    ]
    for lv in cfg.levels_3d + cfg.levels_2d:
        parts.append(_LEVEL.pack(lv.resolution, lv.table_size))
    for spec in (h.density_spec, h.color_spec):
        parts.append(
            _MLP.pack(spec.input_width, spec.output_width, spec.hidden_width, spec.hidden_layers, _ACTIVATIONS.index(spec.output_activation))
        )
    st = h.scene_transform
    parts.append(_TAIL.pack(st.scale, *st.offset, *h.background, h.grid_bytes, h.mlp_bytes, h.payload_crc32))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _decode_header(buf: bytes) -> SnapshotHeader:
    if len(buf) < _PREFIX.size:
        raise TruncatedSnapshotError("file too short for a snapshot header")
    magic, version, flags, size = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r} (expected {MAGIC!r})")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(version, FORMAT_VERSION)
    if len(buf) < size:
        raise TruncatedSnapshotError(f"header claims {size} bytes, only {len(buf)} available")
    (stored_crc,) = struct.unpack_from("<I", buf, size - 4)
    if zlib.crc32(buf[: size - 4]) != stored_crc:
        raise ChecksumError("header checksum mismatch")
    off = _PREFIX.size
    fdim, n3, n2, pe_freqs, emb, _ = _COUNTS.unpack_from(buf, off)
    off += _COUNTS.size
    if size != _header_size(n3, n2):
        raise SnapshotError(f"header size {size} inconsistent with {n3}+{n2} levels")
    levels = []
    for i in range(n3 + n2):
        res, tsize = _LEVEL.unpack_from(buf, off)
        off += _LEVEL.size
        levels.append(GridLevelConfig(3 if i < n3 else 2, res, tsize, fdim))
    specs = []
    for _ in range(2):
        iw, ow, hw, hl, act = _MLP.unpack_from(buf, off)
        off += _MLP.size
        specs.append(MlpSpec(iw, ow, hw, hl, _ACTIVATIONS[act]))
    scale, ox, oy, oz, br, bg, bb, grid_bytes, mlp_bytes, pcrc = _TAIL.unpack_from(buf, off)
    return SnapshotHeader(
        version,
        flags,
        GridConfig(tuple(levels[:n3]), tuple(levels[n3:]), fdim),
        pe_freqs,
        emb,
        specs[0],
        specs[1],
        SceneTransform(scale, (ox, oy, oz)),
        (br, bg, bb),
        grid_bytes,
        mlp_bytes,
        pcrc,
        size,
    )


def _mlp_dtype(fp16: bool) -> str:
    return "<f2" if fp16 else "<f4"


def _grid_bytes(config: GridConfig) -> int:
    return sum((lv.bits + 7) // 8 for lv in config.levels_3d) + 3 * sum((lv.bits + 7) // 8 for lv in config.levels_2d)


def _mlp_bytes(model: FieldModel, fp16: bool) -> int:
    return (model.density_spec.param_count() + model.color_spec.param_count()) * (2 if fp16 else 4)


def encode_snapshot(
    model: FieldModel,
    scene_transform: SceneTransform = SceneTransform(),
    background=WHITE,
    fp16: bool = False,
) -> bytes:
    """Serialize ``model`` to the ``.birf`` byte layout."""
    chunks = []
    for t, lv in zip(model.grid.tensors(), model.grid.level_configs()):
        if t.shape != (lv.entries, lv.feature_dim):
            raise SerializationError(f"{t.name}: shape {t.shape} != ({lv.entries}, {lv.feature_dim})")
        chunks.append(pack_bits(sign_forward(t.latent)).data)
    grid_payload = b"".join(chunks)
    dt = _mlp_dtype(fp16)
    mlp_payload = b"".join(np.ascontiguousarray(p.values, dtype=dt).tobytes() for p in model.mlp_params())
    if len(mlp_payload) != _mlp_bytes(model, fp16):
        raise SerializationError("MLP parameter shapes do not match their specs")
    payload = grid_payload + mlp_payload
    header = SnapshotHeader(
        FORMAT_VERSION,
        FLAG_FP16 if fp16 else 0,
        model.grid.config,
        model.pe_freqs,
        model.embedding_width,
        model.density_spec,
        model.color_spec,
        scene_transform,
        tuple(float(np.float32(c)) for c in background),
        len(grid_payload),
        len(mlp_payload),
        zlib.crc32(payload),
        _header_size(len(model.grid.config.levels_3d), len(model.grid.config.levels_2d)),
    )
    return _encode_header(header) + payload


def save(model: FieldModel, path, scene_transform: SceneTransform = SceneTransform(), background=WHITE, fp16: bool = False) -> int:
    """Write a snapshot file; returns the number of bytes written."""
    data = encode_snapshot(model, scene_transform, background, fp16)
    Path(path).write_bytes(data)
    return len(data)


def decode_snapshot(data: bytes) -> tuple[FieldModel, SnapshotHeader]:
    h = _decode_header(data)
    payload = data[h.header_size :]
    if len(payload) != h.payload_bytes:
        raise TruncatedSnapshotError(f"payload is {len(payload)} bytes, header expects {h.payload_bytes}")
    if zlib.crc32(payload) != h.payload_crc32:
        raise ChecksumError("payload checksum mismatch")
    cfg = h.grid_config
    if h.grid_bytes != _grid_bytes(cfg):
        raise SnapshotError("grid payload length inconsistent with the grid config")
    off = 0
    tensors = []
    names = [f"grid3d.{i}" for i in range(len(cfg.levels_3d))]
    for p in PLANES:
        names += [f"plane_{p}.{i}" for i in range(len(cfg.levels_2d))]
    for name, lv in zip(names, list(cfg.levels_3d) + list(cfg.levels_2d) * 3):
        n = (lv.bits + 7) // 8
        signs = unpack_bits(PackedBits(lv.bits, payload[off : off + n]))
        tensors.append(BinaryTensor(name, signs.reshape(lv.entries, lv.feature_dim)))
        off += n
    n3, n2 = len(cfg.levels_3d), len(cfg.levels_2d)
    grid = HybridGrid(cfg, tensors[:n3], {p: tensors[n3 + k * n2 : n3 + (k + 1) * n2] for k, p in enumerate(PLANES)})
    dt = np.dtype(_mlp_dtype(h.fp16))
    mlp = []
    for spec, prefix in ((h.density_spec, "density"), (h.color_spec, "color")):
        widths = spec.layer_widths
        params = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            for name, shape in ((f"{prefix}.W{i}", (a, b)), (f"{prefix}.b{i}", (b,))):
                count = int(np.prod(shape))
                arr = np.frombuffer(payload, dtype=dt, count=count, offset=off).reshape(shape)
                off += count * dt.itemsize
                params.append(ParamTensor(name, arr.astype(np.float32)))
        mlp.append(params)
    if off != len(payload):
        raise SnapshotError("payload length does not match the model layout")
    model = FieldModel(grid, h.density_spec, mlp[0], h.color_spec, mlp[1], h.pe_freqs, h.embedding_width)
    return model, h


def load_with_header(path) -> tuple[FieldModel, SnapshotHeader]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"snapshot {p} not found")
    return decode_snapshot(p.read_bytes())


def load(path) -> FieldModel:
    """Inference-ready model whose grid latents are the stored ±1 values."""
    return load_with_header(path)[0]


def read_header(path, verify: bool = True) -> SnapshotHeader:
    """Parse the header; with ``verify`` the payload CRC is checked by streaming."""
    with open(path, "rb") as fh:
        head = fh.read(_PREFIX.size)
        if len(head) < _PREFIX.size:
            raise TruncatedSnapshotError("file too short for a snapshot header")
        _, _, _, size = _PREFIX.unpack(head)
        h = _decode_header(head + fh.read(max(size - _PREFIX.size, 0)))
        if verify:
            crc, n = 0, 0
            while chunk := fh.read(1 << 20):
                crc = zlib.crc32(chunk, crc)
                n += len(chunk)
            if n != h.payload_bytes:
                raise TruncatedSnapshotError(f"payload is {n} bytes, header expects {h.payload_bytes}")
            if crc != h.payload_crc32:
                raise ChecksumError("payload checksum mismatch")
    return h


@dataclass(frozen=True)
class SizeReport:
    grid_bits: int
    grid_bytes: int
    mlp_bytes: int
    mlp_bytes_fp16: int
    mlp_bytes_fp32: int
    header_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.header_bytes + self.grid_bytes + self.mlp_bytes

    @property
    def grid_mb(self) -> float:
        return self.grid_bytes / MB

    @property
    def total_mb(self) -> float:
        return self.total_bytes / MB

    def to_text(self) -> str:
        return (
            f"grid payload : {self.grid_bits} bits = {self.grid_bytes} bytes = {self.grid_mb:.4f} MB\n"
            f"MLP weights  : {self.mlp_bytes} bytes stored "
            f"(fp32 {self.mlp_bytes_fp32 / MB:.4f} MB, fp16 {self.mlp_bytes_fp16 / MB:.4f} MB)\n"
            f"header       : {self.header_bytes} bytes\n"
            f"total        : {self.total_bytes} bytes = {self.total_mb:.4f} MB\n"
        )


def report_size(model: FieldModel, fp16: bool = False) -> SizeReport:
    """Byte breakdown of the snapshot ``save`` would write for ``model``."""
    cfg = model.grid.config
    return SizeReport(
        payload_bits(cfg),
        _grid_bytes(cfg),
        _mlp_bytes(model, fp16),
        _mlp_bytes(model, True),
        _mlp_bytes(model, False),
        _header_size(len(cfg.levels_3d), len(cfg.levels_2d)),
    )


def report_from_header(h: SnapshotHeader) -> SizeReport:
    n_params = h.density_spec.param_count() + h.color_spec.param_count()
    return SizeReport(
        payload_bits(h.grid_config), h.grid_bytes, h.mlp_bytes, 2 * n_params, 4 * n_params, h.header_size
    )
