"""Synthetic data generation, normalization and on-disk formats.

Binary layouts (all integers unsigned 32-bit little-endian, all reals IEEE
binary64 little-endian):

``FMAT1`` matrix
    ``b"FMAT1\\0"``, rows, cols, then ``rows * cols`` reals in row-major order.

``FMPK1`` parameter pack
    ``b"FMPK1\\0"``, count, then per parameter: name length, UTF-8 name,
    ndim, ``ndim`` dims, then the values in row-major order.

A dataset directory holds FMAT1 files plus ``manifest.json`` listing them.
"""
from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .factormer import ModelConfig, NFactormerParams, params_from_arrays

MATRIX_MAGIC = b"FMAT1\x00"
PACK_MAGIC = b"FMPK1\x00"
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
HIST_BINS = 100

_U32 = struct.Struct("<I")
_U32_MAX = 2**32 - 1


class FormatError(ValueError):
    """A file does not follow the expected layout."""


class ManifestError(FormatError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    """One block of synthetic matrices ``V = W H^T + noise``.

    ``lam`` is the *mean* of the exponential entries of ``W`` and ``H``;
    the default ``1/sqrt(rank)`` gives ``E[V] = rank * lam**2 = 1``.
    """

    count: int
    row_range: tuple[int, int]
    col_range: tuple[int, int]
    rank: int
    lam: float | None = None
    sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "row_range", tuple(int(v) for v in self.row_range))
        object.__setattr__(self, "col_range", tuple(int(v) for v in self.col_range))
        if self.lam is None:
            object.__setattr__(self, "lam", 1.0 / math.sqrt(self.rank) if self.rank > 0 else None)
        if self.count < 0:
            raise ValueError(f"count must be >= 0, got {self.count}")
        for label, (lo, hi) in (("row_range", self.row_range), ("col_range", self.col_range)):
            if not 1 <= lo <= hi:
                raise ValueError(f"{label} must satisfy 1 <= low <= high, got {(lo, hi)}")
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")

    def to_dict(self):
        out = asdict(self)
        out["row_range"] = list(self.row_range)
        out["col_range"] = list(self.col_range)
        return out


def synthetic_matrix(spec: SyntheticSpec, block: int, index: int) -> np.ndarray:
    """Matrix ``index`` of block ``block``; depends only on (seed, block, index)."""
    rng = np.random.default_rng([spec.seed, block, index])
    m = int(rng.integers(spec.row_range[0], spec.row_range[1] + 1))
    n = int(rng.integers(spec.col_range[0], spec.col_range[1] + 1))
    W = rng.exponential(spec.lam, size=(m, spec.rank))
    H = rng.exponential(spec.lam, size=(n, spec.rank))
    V = W @ H.T
    if spec.sigma > 0:
        V += rng.normal(0.0, spec.sigma, size=(m, n))
    return V


def gen_synthetic(out_dir, blocks, seed=None) -> dict:
    """Write every block's matrices to ``out_dir`` and return the manifest.

    ``blocks`` is a :class:`SyntheticSpec` or a sequence of them sharing one
    rank. ``seed``, if given, overrides the seed of every block.
    """
    if isinstance(blocks, SyntheticSpec):
        blocks = [blocks]
    blocks = list(blocks)
    if not blocks:
        raise ValueError("at least one block is required")
    if seed is not None:
        blocks = [SyntheticSpec(**{**b.to_dict(), "seed": seed}) for b in blocks]
    ranks = {b.rank for b in blocks}
    if len(ranks) != 1:
        raise ValueError(f"all blocks must share one rank, got {sorted(ranks)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    total = sum(b.count for b in blocks)
    width = max(5, len(str(max(total - 1, 0))))
    files = []
    k = 0
    for b_idx, spec in enumerate(blocks):
        for i in range(spec.count):
            name = f"mat_{k:0{width}d}.fmat"
            save_matrix(out / name, synthetic_matrix(spec, b_idx, i))
            files.append(name)
            k += 1
    manifest = {
        "version": MANIFEST_VERSION,
        "rank": blocks[0].rank,
        "seed": blocks[0].seed,
        "blocks": [b.to_dict() for b in blocks],
        "files": files,
    }
    _write_json(out / MANIFEST_NAME, manifest)
    return manifest


def normalize_mean_one(M) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.size == 0:
        raise ValueError("cannot normalize an empty matrix")
    mu = float(M.mean())
    if not mu > 0:
        raise ValueError(f"matrix mean must be positive to normalize, got {mu}")
    return M / mu


# -- FMAT1 ------------------------------------------------------------------

def save_matrix(path, M) -> None:
    M = np.asarray(M)
    if M.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {M.shape}")
    rows, cols = M.shape
    if rows == 0 or cols == 0:
        raise ValueError(f"matrix dimensions must be positive, got {M.shape}")
    if rows > _U32_MAX or cols > _U32_MAX:
        raise ValueError(f"matrix dimensions {M.shape} do not fit in 32 bits")
    payload = np.ascontiguousarray(M, dtype="<f8").tobytes()
    Path(path).write_bytes(MATRIX_MAGIC + _U32.pack(rows) + _U32.pack(cols) + payload)


def load_matrix(path) -> np.ndarray:
    data = _read_bytes(path)
    return decode_matrix(data, str(path))


def decode_matrix(data: bytes, label="<bytes>") -> np.ndarray:
    header = len(MATRIX_MAGIC) + 8
    if len(data) < header:
        raise FormatError(f"{label}: file too short for an FMAT1 header ({len(data)} bytes)")
    if data[:len(MATRIX_MAGIC)] != MATRIX_MAGIC:
        raise FormatError(f"{label}: bad magic {data[:len(MATRIX_MAGIC)]!r}, expected FMAT1")
    rows = _U32.unpack_from(data, 6)[0]
    cols = _U32.unpack_from(data, 10)[0]
    if rows == 0 or cols == 0:
        raise FormatError(f"{label}: zero dimension {rows}x{cols}")
    expected = rows * cols * 8
    body = len(data) - header
    if body < expected:
        raise FormatError(f"{label}: truncated, {rows}x{cols} needs {expected} data bytes, found {body}")
    if body > expected:
        raise FormatError(f"{label}: {body - expected} trailing bytes after {rows}x{cols} data")
    return np.frombuffer(data, dtype="<f8", count=rows * cols, offset=header).reshape(rows, cols).astype(np.float64)


def load_csv_matrix(path) -> np.ndarray:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, record in enumerate(csv.reader(fh), start=1):
            if not record or all(not cell.strip() for cell in record):
                continue
            try:
                rows.append([float(cell) for cell in record])
            except ValueError as err:
                raise FormatError(f"{path}:{lineno}: non-numeric cell ({err})") from None
            if len(rows[-1]) != len(rows[0]):
                raise FormatError(f"{path}:{lineno}: ragged row with {len(rows[-1])} cells, expected {len(rows[0])}")
    if not rows:
        raise FormatError(f"{path}: no data")
    M = np.array(rows, dtype=np.float64)
    if not np.isfinite(M).all():
        raise FormatError(f"{path}: non-finite entries")
    return M


def load_any_matrix(path) -> np.ndarray:
    """FMAT1 if the file starts with the FMAT1 magic, otherwise CSV."""
    with open(path, "rb") as fh:
        head = fh.read(len(MATRIX_MAGIC))
    if head == MATRIX_MAGIC:
        return load_matrix(path)
    return load_csv_matrix(path)


# -- FMPK1 ------------------------------------------------------------------

def encode_pack(named) -> bytes:
    """Serialize ``[(name, array), ...]`` (or a mapping) in FMPK1 layout."""
    items = list(named.items()) if hasattr(named, "items") else list(named)
    parts = [PACK_MAGIC, _U32.pack(len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float64)
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(dim) for dim in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_pack(data: bytes, label="<bytes>") -> dict:
    if data[:len(PACK_MAGIC)] != PACK_MAGIC:
        raise FormatError(f"{label}: bad magic, expected FMPK1")
    pos = len(PACK_MAGIC)

    def u32():
        nonlocal pos
        if pos + 4 > len(data):
            raise FormatError(f"{label}: truncated at byte {pos}")
        value = _U32.unpack_from(data, pos)[0]
        pos += 4
        return value

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(data):
            raise FormatError(f"{label}: truncated at byte {pos}")
        chunk = data[pos:pos + nbytes]
        pos += nbytes
        return chunk

    out = {}
    for _ in range(u32()):
        try:
            name = take(u32()).decode("utf-8")
        except UnicodeDecodeError as err:
            raise FormatError(f"{label}: parameter name is not UTF-8") from err
        if name in out:
            raise FormatError(f"{label}: duplicate parameter {name!r}")
        shape = tuple(u32() for _ in range(u32()))
        count = math.prod(shape)
        out[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise FormatError(f"{label}: {len(data) - pos} trailing bytes")
    return out


def save_checkpoint(path, params: NFactormerParams, cfg: ModelConfig, kind: str) -> None:
    """Write the FMPK1 pack to ``path`` and the model config to ``path + '.json'``."""
    named = [(name, t.value) for name, t in params.named_parameters()]
    Path(path).write_bytes(encode_pack(named))
    _write_json(config_path(path), {"kind": kind, "model": cfg.to_dict()})


def load_checkpoint(path, cfg: ModelConfig | None = None, kind: str | None = None):
    """Return ``(params, cfg, kind)``; shapes are validated against ``cfg``.

    ``cfg`` and ``kind`` default to the values in the sidecar config file.
    """
    arrays = decode_pack(_read_bytes(path), str(path))
    if cfg is None or kind is None:
        meta = _read_json(config_path(path))
        try:
            cfg = cfg or ModelConfig.from_dict(meta["model"])
            kind = kind or meta["kind"]
        except (KeyError, TypeError, ValueError) as err:
            raise FormatError(f"{config_path(path)}: invalid checkpoint config ({err})") from err
    return params_from_arrays(arrays, cfg, kind), cfg, kind


def config_path(path) -> Path:
    return Path(str(path) + ".json")


# -- datasets ---------------------------------------------------------------

def read_manifest(directory) -> dict:
    directory = Path(directory)
    if not (directory / MANIFEST_NAME).is_file():
        raise ManifestError(f"{directory}: no {MANIFEST_NAME}")
    manifest = _read_json(directory / MANIFEST_NAME)
    if not isinstance(manifest, dict):
        raise ManifestError(f"{directory / MANIFEST_NAME}: expected a JSON object")
    for key in ("version", "rank", "seed", "blocks", "files"):
        if key not in manifest:
            raise ManifestError(f"{directory / MANIFEST_NAME}: missing field {key!r}")
    if manifest["version"] != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {manifest['version']!r}")
    files = manifest["files"]
    if not isinstance(files, list) or not all(isinstance(f, str) for f in files):
        raise ManifestError("manifest 'files' must be a list of relative paths")
    missing = [f for f in files if not (directory / f).is_file()]
    if missing:
        raise ManifestError(f"{len(missing)} listed file(s) missing, first: {missing[0]}")
    return manifest


def load_dataset(directory) -> list[tuple[str, np.ndarray]]:
    """``[(file name, V), ...]`` in manifest order."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    return [(name, load_matrix(directory / name)) for name in manifest["files"]]


@dataclass
class DatasetStats:
    count: int
    mean: float
    variance: float
    maximum: float
    bin_edges: np.ndarray
    bin_counts: np.ndarray

    def write_histogram_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["bin_low", "bin_high", "count"])
            for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.bin_counts):
                writer.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def dataset_stats(dataset, bins=HIST_BINS) -> DatasetStats:
    """Entry mean, variance and a histogram over ``[0, max]``.

    Negative entries (noise) are counted in the first bin so the counts sum
    to the number of entries.
    """
    mats = [np.asarray(V, dtype=np.float64).ravel() for _, V in dataset]
    if not mats or not sum(v.size for v in mats):
        raise ValueError("dataset is empty")
    values = np.concatenate(mats)
    top = float(values.max())
    hi = top if top > 0 else 1.0
    counts, edges = np.histogram(np.clip(values, 0.0, hi), bins=bins, range=(0.0, hi))
    return DatasetStats(values.size, float(values.mean()), float(values.var()), top, edges, counts)


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError as err:
        raise FormatError(f"{path}: no such file") from err


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as err:
        raise FormatError(f"{path}: no such file") from err
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: invalid JSON ({err})") from err


def _write_json(path, obj) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
