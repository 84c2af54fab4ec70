"""Bit-exact persistence: dataset containers, checkpoints, images, configs.

Datasets pack the binary maps eight cells per byte; ground-truth flow, when
present, is stored as little-endian float32 with NaN marking undefined
cells. Checkpoints store named float32 parameter blocks after a JSON echo
of the architecture. All writes go through a temp file and an atomic
rename.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
from pathlib import Path

import numpy as np

from .grids import GridPair
from .model import ModelParams, params_from_arrays
from .sim import SCENARIOS, SequenceSample

DATASET_MAGIC = b"LFD1"
CHECKPOINT_MAGIC = b"LFW1"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<HHHHIH")  # version, rows, cols, seq_len, seq_count, flags
FLAG_GT_FLOW = 0x0001
_SCENARIO_SHIFT = 1


class FormatError(ValueError):
    """A file does not conform to its declared container format."""


class ConfigError(ValueError):
    """A configuration file could not be parsed or lacks a usable value."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CompatibilityError(ValueError):
    """Inputs that are individually valid but cannot be combined."""


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# dataset container


def _map_bytes(rows: int, cols: int) -> int:
    return math.ceil(rows * cols / 8)


def _pack_map(grid: np.ndarray) -> bytes:
    return np.packbits(grid.astype(np.uint8).ravel()).tobytes()


def _unpack_map(raw: bytes, rows: int, cols: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=rows * cols)
    return bits.reshape(rows, cols).astype(np.float64)


def dataset_file_size(rows: int, cols: int, seq_len: int, seq_count: int, has_gt_flow: bool) -> int:
    """Exact byte size implied by a header; readers reject files that differ.

    Each sequence stores seq_len + 1 frames (the trailing one is the
    held-out next map) of two packed maps, then per step two float32 flow
    fields (backward, forward)."""
    frame = 2 * _map_bytes(rows, cols)
    per_seq = (seq_len + 1) * frame
    if has_gt_flow:
        per_seq += seq_len * 2 * 2 * rows * cols * 4
    return len(DATASET_MAGIC) + _HEADER.size + seq_count * per_seq


def save_dataset(path, samples: list, scenario: str) -> None:
    if not samples:
        raise FormatError("refusing to write an empty dataset")
    if scenario not in SCENARIOS:
        raise FormatError(f"unknown scenario {scenario!r}")
    seq_len = len(samples[0].frames)
    rows, cols = samples[0].frames[0].occupancy.shape
    has_flow = bool(samples[0].gt_flow_backward)
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    flags = (FLAG_GT_FLOW if has_flow else 0) | (SCENARIOS.index(scenario) << _SCENARIO_SHIFT)
    buf.write(_HEADER.pack(FORMAT_VERSION, rows, cols, seq_len, len(samples), flags))
    for sample in samples:
        if len(sample.frames) != seq_len or bool(sample.gt_flow_backward) != has_flow:
            raise FormatError("all sequences in a dataset must share length and flow presence")
        for frame in [*sample.frames, sample.gt_next]:
            buf.write(_pack_map(frame.occupancy))
            buf.write(_pack_map(frame.visibility))
        if has_flow:
            for t in range(seq_len):
                buf.write(sample.gt_flow_backward[t].astype("<f4").tobytes())
                buf.write(sample.gt_flow_forward[t].astype("<f4").tobytes())
    atomic_write(path, buf.getvalue())


def load_dataset(path) -> tuple[list, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a dataset file (bad magic)")
    if len(raw) < len(DATASET_MAGIC) + _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    version, rows, cols, seq_len, seq_count, flags = _HEADER.unpack_from(raw, len(DATASET_MAGIC))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    has_flow = bool(flags & FLAG_GT_FLOW)
    scenario_id = flags >> _SCENARIO_SHIFT
    if scenario_id >= len(SCENARIOS):
        raise FormatError(f"{path}: unknown scenario id {scenario_id}")
    expected = dataset_file_size(rows, cols, seq_len, seq_count, has_flow)
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, header implies {expected}")

    offset = len(DATASET_MAGIC) + _HEADER.size
    mb = _map_bytes(rows, cols)
    flow_bytes = 2 * rows * cols * 4
    samples = []
    for _ in range(seq_count):
        frames = []
        for _f in range(seq_len + 1):
            occ = _unpack_map(raw[offset : offset + mb], rows, cols)
            offset += mb
            vis = _unpack_map(raw[offset : offset + mb], rows, cols)
            offset += mb
            frames.append(GridPair(occ, vis))
        flows_b, flows_f = [], []
        if has_flow:
            for _t in range(seq_len):
                fb = np.frombuffer(raw[offset : offset + flow_bytes], dtype="<f4")
                offset += flow_bytes
                ff = np.frombuffer(raw[offset : offset + flow_bytes], dtype="<f4")
                offset += flow_bytes
                flows_b.append(fb.reshape(2, rows, cols).astype(np.float64))
                flows_f.append(ff.reshape(2, rows, cols).astype(np.float64))
        samples.append(
            SequenceSample(
                frames=frames[:seq_len],
                gt_next=frames[seq_len],
                gt_flow_backward=flows_b,
                gt_flow_forward=flows_f,
                scenario=SCENARIOS[scenario_id],
            )
        )
    meta = {
        "rows": rows,
        "cols": cols,
        "seq_len": seq_len,
        "seq_count": seq_count,
        "has_gt_flow": has_flow,
        "scenario": SCENARIOS[scenario_id],
    }
    return samples, meta


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, epoch: int, rows: int, cols: int, optimizer: str = "sgd-momentum") -> None:
    arch = params.architecture()
    arch["rows"] = rows
    arch["cols"] = cols
    arch_json = json.dumps(arch, sort_keys=True).encode()
    opt = optimizer.encode()
    named = params.named_parameters()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HIB", FORMAT_VERSION, epoch, len(opt)))
    buf.write(opt)
    buf.write(struct.pack("<I", len(arch_json)))
    buf.write(arch_json)
    buf.write(struct.pack("<H", len(named)))
    for name, tensor in named:
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        shape = tensor.data.shape
        buf.write(struct.pack("<B", len(shape)))
        buf.write(struct.pack(f"<{len(shape)}I", *shape))
        buf.write(tensor.data.astype("<f4").tobytes())
    atomic_write(path, buf.getvalue())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    try:
        version, epoch, opt_len = struct.unpack_from("<HIB", raw, offset)
        offset += struct.calcsize("<HIB")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        optimizer = raw[offset : offset + opt_len].decode()
        offset += opt_len
        (arch_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        arch = json.loads(raw[offset : offset + arch_len].decode())
        offset += arch_len
        (count,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset : offset + name_len].decode()
            offset += name_len
            (rank,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            n = int(np.prod(shape))
            chunk = raw[offset : offset + 4 * n]
            if len(chunk) != 4 * n:
                raise FormatError(f"{path}: parameter {name} is truncated")
            data = np.frombuffer(chunk, dtype="<f4")
            offset += 4 * n
            arrays[name] = data.reshape(shape)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from exc
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    params = params_from_arrays(arrays, kind=arch.get("kind", "flow"))
    meta = {"epoch": epoch, "optimizer": optimizer, "architecture": arch}
    return params, meta


# ---------------------------------------------------------------------------
# images


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 image from an (H, W, 3) uint8 array."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise FormatError("write_ppm expects an (H, W, 3) uint8 array")
    h, w = image.shape[:2]
    atomic_write(path, f"P6\n{w} {h}\n255\n".encode() + image.tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 image; float inputs are clipped from [0, 1] to 8 bits."""
    if image.dtype != np.uint8:
        image = (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    h, w = image.shape
    atomic_write(path, f"P5\n{w} {h}\n255\n".encode() + image.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise FormatError(f"{path}: not a P6 image")
    fields, idx = [], 2
    while len(fields) < 3:
        while idx < len(raw) and raw[idx : idx + 1].isspace():
            idx += 1
        start = idx
        while idx < len(raw) and not raw[idx : idx + 1].isspace():
            idx += 1
        fields.append(int(raw[start:idx]))
    idx += 1  # single whitespace after maxval
    w, h, _maxval = fields
    return np.frombuffer(raw[idx : idx + w * h * 3], dtype=np.uint8).reshape(h, w, 3)


# ---------------------------------------------------------------------------
# key = value configuration files


class Config:
    """Parsed key = value file with typed accessors."""

    def __init__(self, values: dict, source: str = "<config>"):
        self.values = values
        self.source = source

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "Config":
        values: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"expected 'key = value', got {stripped!r}", lineno)
            key, _, value = stripped.partition("=")
            key = key.strip()
            value = value.strip()
            if not key or not value:
                raise ConfigError(f"empty key or value in {stripped!r}", lineno)
            values[key] = value
        return cls(values, source)

    @classmethod
    def load(cls, path) -> "Config":
        return cls.parse(Path(path).read_text(), source=str(path))

    def has(self, key: str) -> bool:
        return key in self.values

    def get_str(self, key: str, default: str | None = None) -> str:
        if key not in self.values:
            if default is None:
                raise ConfigError(f"{self.source}: missing required key {key!r}")
            return default
        return self.values[key]

    def _convert(self, key: str, caster, kind: str):
        try:
            return caster(self.values[key])
        except ValueError as exc:
            raise ConfigError(f"{self.source}: key {key!r} is not a valid {kind}: {self.values[key]!r}") from exc

    def get_int(self, key: str, default: int | None = None) -> int:
        if key not in self.values:
            if default is None:
                raise ConfigError(f"{self.source}: missing required key {key!r}")
            return default
        return self._convert(key, int, "integer")

    def get_float(self, key: str, default: float | None = None) -> float:
        if key not in self.values:
            if default is None:
                raise ConfigError(f"{self.source}: missing required key {key!r}")
            return default
        return self._convert(key, float, "number")

    def get_bool(self, key: str, default: bool) -> bool:
        if key not in self.values:
            return default
        value = self.values[key].lower()
        if value in ("1", "true", "yes", "on"):
            return True
        if value in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{self.source}: key {key!r} is not a boolean: {value!r}")

    def get_range(self, key: str, default: tuple | None = None) -> tuple:
        """A 'lo..hi', 'lo-hi', or single-number range, e.g. speeds = 0.5-1.5."""
        if key not in self.values:
            if default is None:
                raise ConfigError(f"{self.source}: missing required key {key!r}")
            return default
        value = self.values[key]
        try:
            if ".." in value:
                lo, _, hi = value.partition("..")
                return (float(lo), float(hi))
            try:
                v = float(value)
                return (v, v)
            except ValueError:
                pass
            lo, _, hi = value.rpartition("-")
            return (float(lo), float(hi))
        except ValueError as exc:
            raise ConfigError(f"{self.source}: key {key!r} is not a range: {value!r}") from exc

    def get_grid(self, key: str = "grid", default: tuple | None = None) -> tuple:
        """Grid dims as 'N' or 'RxC'."""
        if key not in self.values:
            if default is None:
                raise ConfigError(f"{self.source}: missing required key {key!r}")
            return default
        value = self.values[key]
        try:
            if "x" in value:
                r, c = value.split("x")
                return (int(r), int(c))
            n = int(value)
            return (n, n)
        except ValueError as exc:
            raise ConfigError(f"{self.source}: key {key!r} is not a grid size: {value!r}") from exc
