"""SNRG tensor files, the synthetic audio-visual dataset and model checkpoints.

SNRG layout (little-endian)::

    "SNRG" | u16 version=1 | u8 dtype (0 f32, 1 binary byte) | u8 ndim |
    ndim × u32 dims | row-major payload
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .tensor import SpikeTensor, Tensor

MAGIC = b"SNRG"
VERSION = 1
DTYPE_F32 = 0
DTYPE_BINARY = 1
MAX_NDIM = 16
MAX_ELEMENTS = 2**34
_ITEMSIZE = {DTYPE_F32: 4, DTYPE_BINARY: 1}


class SnrgFormatError(ValueError):
    """Malformed SNRG bytes; ``offset`` is where parsing failed."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset
        self.reason = message


def encode_tensor(data: Tensor | np.ndarray, dtype: str = "auto") -> bytes:
    arr = data.data if isinstance(data, Tensor) else np.asarray(data)
    if dtype == "auto":
        dtype = "binary" if isinstance(data, SpikeTensor) else "f32"
    if arr.ndim > MAX_NDIM:
        raise ValueError(f"at most {MAX_NDIM} dims are supported")
    if dtype == "binary":
        if np.count_nonzero((arr != 0) & (arr != 1)):
            raise ValueError("binary dtype needs a 0/1 tensor")
        code, payload = DTYPE_BINARY, arr.astype("u1").tobytes()
    elif dtype == "f32":
        code, payload = DTYPE_F32, np.ascontiguousarray(arr, dtype="<f4").tobytes()
    else:
        raise ValueError(f"unknown dtype {dtype!r}")
    header = MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + payload


def decode_tensor(buf: bytes, *, exact: bool = True) -> tuple[np.ndarray, int, int]:
    """Parse one SNRG record; returns (array, dtype code, bytes consumed).

    With ``exact`` set, bytes after the payload are an error.
    """
    size = len(buf)
    if size < 4 or buf[:4] != MAGIC:
        raise SnrgFormatError("bad magic", 0)
    if size < 8:
        raise SnrgFormatError("truncated header", size)
    version, code, ndim = struct.unpack_from("<HBB", buf, 4)
    if version != VERSION:
        raise SnrgFormatError(f"unsupported version {version}", 4)
    if code not in _ITEMSIZE:
        raise SnrgFormatError(f"unknown dtype {code}", 6)
    if ndim > MAX_NDIM:
        raise SnrgFormatError(f"ndim {ndim} exceeds {MAX_NDIM}", 7)
    end = 8 + 4 * ndim
    if size < end:
        raise SnrgFormatError("truncated dimension list", size)
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    count = 1
    for i, d in enumerate(dims):
        if d == 0:
            raise SnrgFormatError(f"dimension {i} is zero", 8 + 4 * i)
        count *= d
        if count > MAX_ELEMENTS:
            raise SnrgFormatError("dimension product overflows", 8 + 4 * i)
    nbytes = count * _ITEMSIZE[code]
    if size < end + nbytes:
        raise SnrgFormatError(f"payload truncated: need {nbytes} bytes, have {size - end}", size)
    if exact and size > end + nbytes:
        raise SnrgFormatError("trailing bytes after payload", end + nbytes)
    if code == DTYPE_F32:
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=end).reshape(dims)
    else:
        raw = np.frombuffer(buf, dtype="u1", count=count, offset=end)
        bad = np.flatnonzero(raw > 1)
        if bad.size:
            raise SnrgFormatError("binary payload byte is not 0 or 1", end + int(bad[0]))
        arr = raw.reshape(dims)
    return arr.astype(np.float32), code, end + nbytes


def write_tensor(path: str | Path, t: Tensor | np.ndarray, dtype: str = "auto") -> None:
    Path(path).write_bytes(encode_tensor(t, dtype))


def read_tensor(path: str | Path) -> Tensor:
    arr, code, _ = decode_tensor(Path(path).read_bytes())
    return SpikeTensor(arr) if code == DTYPE_BINARY else Tensor(arr)


# -- synthetic dataset --------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    """Correlated two-modality classification data.

    Args:
        cross_modal_correlation: ρ, probability that the audio sample is drawn
            from the video class; otherwise its class is uniform random.
        noise_sigma: std of independent Gaussian noise added per timestep.
        signal_gain: amplitude of the class patterns.
    """

    num_classes: int = 4
    samples_per_class: int = 50
    hw: tuple[int, int] = (32, 32)
    timesteps: int = 2
    cross_modal_correlation: float = 0.9
    noise_sigma: float = 1.0
    signal_gain: float = 1.0
    video_channels: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.cross_modal_correlation <= 1.0:
            raise ValueError("cross_modal_correlation must lie in [0,1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.num_classes < 2 or self.samples_per_class < 1 or self.timesteps < 1:
            raise ValueError("need >= 2 classes, >= 1 sample per class and >= 1 timestep")

    @property
    def num_samples(self) -> int:
        return self.num_classes * self.samples_per_class

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DatasetSpec":
        data = dict(data)
        if "hw" in data:
            data["hw"] = tuple(data["hw"])
        return cls(**data)


@dataclass
class Dataset:
    video: np.ndarray  # [S, T, Cv, H, W]
    audio: np.ndarray  # [S, T, 1, H, W]
    labels: np.ndarray  # [S] int
    audio_labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> "Dataset":
        al = self.audio_labels[idx] if self.audio_labels is not None else None
        return Dataset(self.video[idx], self.audio[idx], self.labels[idx], al)


def _video_pattern(rng: np.random.Generator, channels: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    out = np.zeros((channels, h, w))
    for c in range(channels):
        for _ in range(3):
            fy, fx = rng.integers(1, 4, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            out[c] += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    return out / np.abs(out).max()


def _audio_pattern(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    # Rows are frequency bins, columns are frames: a few class-specific bands.
    freq = np.arange(h)[:, None]
    frames = np.linspace(0, 1, w)[None, :]
    out = np.zeros((h, w))
    for _ in range(2):
        centre = rng.uniform(0.1, 0.9) * h
        width = rng.uniform(0.04, 0.1) * h
        rate = rng.integers(1, 4)
        out += np.exp(-0.5 * ((freq - centre) / width) ** 2) * np.cos(2 * np.pi * rate * frames + rng.uniform(0, 6.3))
    return (out / np.abs(out).max())[None]


def _schedules(rng: np.random.Generator, num_classes: int, timesteps: int) -> np.ndarray:
    """Per-class on/off amplitude over time (on = 1, off = a weak 0.25)."""
    sched = np.ones((num_classes, timesteps))
    if timesteps > 1:
        for c in range(num_classes):
            bits = (np.arange(timesteps) + c) % 2 == 0 if c % 2 else np.ones(timesteps, bool)
            bits = np.roll(bits, c // 2)
            sched[c] = np.where(bits, 1.0, 0.25)
    return sched


def class_patterns(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Noise-free (video, audio, schedule) templates per class."""
    h, w = spec.hw
    video = np.stack(
        [_video_pattern(np.random.default_rng([spec.seed, 0, c]), spec.video_channels, h, w) for c in range(spec.num_classes)]
    )
    audio = np.stack([_audio_pattern(np.random.default_rng([spec.seed, 1, c]), h, w) for c in range(spec.num_classes)])
    return video, audio, _schedules(np.random.default_rng([spec.seed, 2]), spec.num_classes, spec.timesteps)


def generate_sample(spec: DatasetSpec, index: int, patterns=None) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Sample ``index`` depends only on (seed, index), never on generation order."""
    pv, pa, sched = patterns if patterns is not None else class_patterns(spec)
    rng = np.random.default_rng([spec.seed, 3, index])
    label = index % spec.num_classes
    if rng.random() < spec.cross_modal_correlation:
        audio_label = label
    else:
        audio_label = int(rng.integers(spec.num_classes))
    g, sigma = spec.signal_gain, spec.noise_sigma
    t = spec.timesteps
    video = g * sched[label][:, None, None, None] * pv[label][None]
    audio = g * sched[audio_label][:, None, None, None] * pa[audio_label][None]
    video = video + sigma * rng.standard_normal(video.shape)
    audio = audio + sigma * rng.standard_normal(audio.shape)
    assert video.shape[0] == t
    return video.astype(np.float32), audio.astype(np.float32), label, audio_label


def generate_dataset(spec: DatasetSpec) -> Dataset:
    patterns = class_patterns(spec)
    samples = [generate_sample(spec, i, patterns) for i in range(spec.num_samples)]
    return Dataset(
        np.stack([s[0] for s in samples]),
        np.stack([s[1] for s in samples]),
        np.array([s[2] for s in samples], dtype=np.int64),
        np.array([s[3] for s in samples], dtype=np.int64),
    )


def split_indices(labels: np.ndarray, fractions=(0.7, 0.15, 0.15)) -> dict[str, np.ndarray]:
    """Per-class 70/15/15 split, deterministic in sample order."""
    out: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n_train = int(len(idx) * fractions[0] + 0.5)
        n_val = int(len(idx) * fractions[1] + 0.5)
        out["train"] += idx[:n_train].tolist()
        out["val"] += idx[n_train : n_train + n_val].tolist()
        out["test"] += idx[n_train + n_val :].tolist()
    return {k: np.array(sorted(v), dtype=np.int64) for k, v in out.items()}


def make_splits(spec: DatasetSpec) -> dict[str, Dataset]:
    ds = generate_dataset(spec)
    return {k: ds.subset(v) for k, v in split_indices(ds.labels).items()}


def save_dataset(root: str | Path, spec: DatasetSpec) -> dict[str, Dataset]:
    root = Path(root)
    splits = make_splits(spec)
    for name, ds in splits.items():
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        write_tensor(d / "video.snrg", ds.video, "f32")
        write_tensor(d / "audio.snrg", ds.audio, "f32")
        write_tensor(d / "labels.snrg", ds.labels.astype(np.float32), "f32")
    manifest = {"spec": spec.to_dict(), "splits": {k: len(v) for k, v in splits.items()}}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return splits


def load_split(root: str | Path, split: str) -> Dataset:
    d = Path(root) / split
    if not d.is_dir():
        raise FileNotFoundError(f"no split {split!r} under {root}")
    labels = read_tensor(d / "labels.snrg").data.astype(np.int64)
    return Dataset(read_tensor(d / "video.snrg").data, read_tensor(d / "audio.snrg").data, labels)


def load_manifest(root: str | Path) -> DatasetSpec:
    return DatasetSpec.from_dict(json.loads((Path(root) / "manifest.json").read_text())["spec"])


def directory_digest(root: str | Path) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# -- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"SNRGCKPT"


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray], header: dict[str, Any]) -> None:
    """One file: magic, u32 JSON length, JSON header with a manifest, SNRG records."""
    records, manifest, offset = [], [], 0
    for name, arr in state.items():
        rec = encode_tensor(np.asarray(arr), "f32")
        manifest.append({"name": name, "offset": offset, "length": len(rec)})
        records.append(rec)
        offset += len(rec)
    head = json.dumps({**header, "manifest": manifest}, sort_keys=True).encode()
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<I", len(head)) + head + b"".join(records))


def load_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise SnrgFormatError("bad checkpoint magic", 0)
    if len(buf) < 12:
        raise SnrgFormatError("truncated checkpoint header", len(buf))
    (hlen,) = struct.unpack_from("<I", buf, 8)
    if len(buf) < 12 + hlen:
        raise SnrgFormatError("truncated checkpoint header", len(buf))
    try:
        header = json.loads(buf[12 : 12 + hlen])
    except ValueError as err:
        raise SnrgFormatError(f"checkpoint header is not JSON: {err}", 12) from err
    base = 12 + hlen
    state = {}
    for entry in header.pop("manifest"):
        start = base + entry["offset"]
        try:
            arr, _, _ = decode_tensor(buf[start : start + entry["length"]])
        except SnrgFormatError as err:
            raise SnrgFormatError(f"tensor {entry['name']!r}: {err.reason}", start + err.offset) from err
        state[entry["name"]] = arr
    return header, state
