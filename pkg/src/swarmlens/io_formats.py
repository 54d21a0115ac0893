"""Bit-exact binary containers: Middlebury .flo, PGM/PPM, checkpoints.

All multi-byte fields are little-endian regardless of platform. Flows
are stored as float32 (the container's limit) and widened to float64 in
memory; checkpoints keep float64 so determinism tests can compare
byte-for-byte. Every writer goes through a temp-file-then-rename so
partial files never appear under the target name.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedFormatError, ValidationError
from .flow import FlowField, GrayImage

FLO_MAGIC = b"PIEH"  # float32 202021.25, little-endian
CHECKPOINT_MAGIC = b"SWLM"
CHECKPOINT_VERSION = 1


def write_bytes_atomic(path, data: bytes) -> None:
    """Write to a sibling temp file, then rename over the target."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# Middlebury .flo (two channels) and the single-channel map variant


def flo_bytes(field: FlowField) -> bytes:
    h, w = field.u.shape
    header = FLO_MAGIC + np.array([w, h], dtype="<i4").tobytes()
    inter = np.empty((h, w, 2), dtype="<f4")
    inter[..., 0] = field.u
    inter[..., 1] = field.v
    if not np.isfinite(inter).all():
        raise ValidationError("flow values exceed float32 range")
    return header + inter.tobytes()


def write_flo(field: FlowField, path) -> None:
    """Store a flow field as magic, int32 w/h, interleaved float32 (u, v)."""
    write_bytes_atomic(path, flo_bytes(field))


def _parse_flo_header(data: bytes, path) -> tuple[int, int]:
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header ({len(data)} bytes)")
    if data[:4] != FLO_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    w, h = (int(x) for x in np.frombuffer(data[4:12], dtype="<i4"))
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: non-positive dims {w}x{h}")
    return w, h


def read_flo(path) -> FlowField:
    data = Path(path).read_bytes()
    w, h = _parse_flo_header(data, path)
    expected = 12 + 8 * w * h
    if len(data) != expected:
        raise FormatError(f"{path}: {len(data)} bytes, header implies {expected}")
    inter = np.frombuffer(data[12:], dtype="<f4").reshape(h, w, 2)
    return FlowField(inter[..., 0].astype(np.float64), inter[..., 1].astype(np.float64))


def map_bytes(values: np.ndarray) -> bytes:
    """Single-channel float map in the .flo header layout."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValidationError(f"map must be 2-D, got shape {values.shape}")
    h, w = values.shape
    payload = values.astype("<f4")
    if not np.isfinite(payload).all():
        raise ValidationError("map values exceed float32 range")
    return FLO_MAGIC + np.array([w, h], dtype="<i4").tobytes() + payload.tobytes()


def write_map(values: np.ndarray, path) -> None:
    write_bytes_atomic(path, map_bytes(values))


def read_map(path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h = _parse_flo_header(data, path)
    expected = 12 + 4 * w * h
    if len(data) != expected:
        raise FormatError(f"{path}: {len(data)} bytes, header implies {expected}")
    return np.frombuffer(data[12:], dtype="<f4").reshape(h, w).astype(np.float64)


# ---------------------------------------------------------------------------
# netpbm: binary PGM (P5) frames and PPM (P6) overlays, maxval 255


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def pgm_bytes(image: GrayImage) -> bytes:
    h, w = image.pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + _quantize(image.pixels).tobytes()


def write_pgm(image: GrayImage, path) -> None:
    write_bytes_atomic(path, pgm_bytes(image))


def ppm_bytes(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValidationError(f"expected 3xHxW rgb, got shape {rgb.shape}")
    h, w = rgb.shape[1:]
    pixels = _quantize(rgb).transpose(1, 2, 0)  # interleave to RGB RGB ...
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels).tobytes()


def write_ppm(rgb: np.ndarray, path) -> None:
    write_bytes_atomic(path, ppm_bytes(rgb))


def _read_netpbm_tokens(data: bytes, path, count: int) -> tuple[list[int], int]:
    """Read `count` whitespace-separated integers after the magic, skipping comments.

    Returns the values and the offset of the first raster byte (one
    whitespace character past the last token).
    """
    pos = 2  # past the 2-byte magic
    values: list[int] = []
    while len(values) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            eol = data.find(b"\n", pos)
            if eol == -1:
                raise FormatError(f"{path}: unterminated comment in header")
            pos = eol + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise FormatError(f"{path}: bad header token {token!r}")
        values.append(int(token))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace before raster data")
    return values, pos + 1


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 2:
        raise FormatError(f"{path}: empty file")
    if data[:2] in (b"P1", b"P2", b"P3"):
        raise UnsupportedFormatError(f"{path}: ASCII netpbm variant "
                                     f"{data[:2].decode()} not supported")
    if data[:2] != magic:
        raise FormatError(f"{path}: bad magic {data[:2]!r}")
    (w, h, maxval), offset = _read_netpbm_tokens(data, path, 3)
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: non-positive dims {w}x{h}")
    expected = offset + w * h * channels
    if len(data) != expected:
        raise FormatError(f"{path}: {len(data)} bytes, header implies {expected}")
    return np.frombuffer(data[offset:], dtype=np.uint8).reshape(h, w, channels)


def read_pgm(path) -> GrayImage:
    raster = _read_netpbm(path, b"P5", 1)
    return GrayImage(raster[..., 0].astype(np.float64) / 255.0)


def read_ppm(path) -> np.ndarray:
    raster = _read_netpbm(path, b"P6", 3)
    return raster.transpose(2, 0, 1).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# checkpoint container


def checkpoint_bytes(constants: dict, params: list[tuple[str, np.ndarray]]) -> bytes:
    """Serialize constants (canonical JSON) plus named float64 tensors.

    The constants block records the parameter name order so truncated
    or reordered files are detectable on load.
    """
    constants = dict(constants)
    constants["params"] = [name for name, _ in params]
    blob = json.dumps(constants, sort_keys=True, separators=(",", ":")).encode()
    parts = [CHECKPOINT_MAGIC,
             np.array([CHECKPOINT_VERSION, len(blob)], dtype="<u4").tobytes(),
             blob]
    for name, arr in params:
        arr = np.asarray(arr, dtype=np.float64)
        encoded = name.encode()
        parts.append(np.array([len(encoded)], dtype="<u4").tobytes())
        parts.append(encoded)
        parts.append(np.array([arr.ndim] + list(arr.shape), dtype="<u4").tobytes())
        parts.append(arr.astype("<f8").tobytes())
    return b"".join(parts)


def write_checkpoint(constants: dict, params: list[tuple[str, np.ndarray]], path) -> None:
    write_bytes_atomic(path, checkpoint_bytes(constants, params))


class _Cursor:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated (wanted {n} bytes at "
                              f"offset {self.pos}, file has {len(self.data)})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def take_u32(self, count: int = 1) -> list[int]:
        return [int(x) for x in np.frombuffer(self.take(4 * count), dtype="<u4")]


def parse_checkpoint(data: bytes, path="<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    cur = _Cursor(data, path)
    if cur.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    version, blob_len = cur.take_u32(2)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        constants = json.loads(cur.take(blob_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: constants block is not valid JSON: {exc}") from exc
    expected_names = constants.get("params")
    if not isinstance(expected_names, list):
        raise FormatError(f"{path}: constants block lacks the parameter name list")
    params: dict[str, np.ndarray] = {}
    for expected in expected_names:
        (name_len,) = cur.take_u32()
        name = cur.take(name_len).decode()
        if name != expected:
            raise FormatError(f"{path}: parameter order mismatch: "
                              f"expected {expected!r}, found {name!r}")
        (rank,) = cur.take_u32()
        dims = cur.take_u32(rank)
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = cur.take(8 * n)
        params[name] = np.frombuffer(payload, dtype="<f8").astype(
            np.float64).reshape(dims)
    if cur.pos != len(data):
        raise FormatError(f"{path}: {len(data) - cur.pos} trailing bytes")
    return constants, params


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return parse_checkpoint(Path(path).read_bytes(), path)
