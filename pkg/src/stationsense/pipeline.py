"""Raw frame streams -> labeled / unlabeled sample sets.

Preprocessing order is fixed: subcarrier selection, per-frame power
normalization, then window averaging. Missing stations (no frames in the
window) become zero placeholders with an explicit flag.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    CsiFrame,
    LabeledSample,
    MaskSet,
    MultiStationSample,
    StationSample,
)
from .synth import CsiStream, Scenario, Trajectory

DEGENERATE_POWER_FLOOR = 1e-12

# 64-subcarrier default: drop lower/upper guards and DC, keep 52.
DEFAULT_DROP_64 = frozenset(range(0, 6)) | {32} | frozenset(range(59, 64))


def default_keep_list(k_raw: int = 64) -> list:
    if k_raw == 64:
        return [i for i in range(64) if i not in DEFAULT_DROP_64]
    return list(range(k_raw))


@dataclass(frozen=True)
class WindowSpec:
    width_s: float
    rate_hz: float

    def __post_init__(self):
        if self.width_s <= 0 or self.rate_hz <= 0:
            raise ValueError("window width and rate must be positive")


def select_subcarriers(frame: CsiFrame, keep: Sequence[int]) -> np.ndarray:
    """Complex magnitudes at the kept subcarrier indices."""
    values = np.asarray(frame.values)
    keep = np.asarray(keep, dtype=int)
    if keep.min() < 0 or keep.max() >= len(values):
        raise IndexError(f"keep indices out of range for k_raw={len(values)}")
    return np.abs(values[keep])


def normalize_power(a: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Scale so mean squared amplitude is 1. Returns (vector, degenerate).

    Near-zero-power input yields the all-zero vector with degenerate=True
    instead of dividing by ~0.
    """
    a = np.asarray(a, dtype=float)
    mean_power = np.mean(a**2)
    if mean_power < DEGENERATE_POWER_FLOOR:
        return np.zeros_like(a), True
    return a / np.sqrt(mean_power), False


def _normalize_rows(amps: np.ndarray) -> Tuple[np.ndarray, int]:
    """Row-wise normalize_power for a (n, K) amplitude matrix."""
    mean_power = np.mean(amps**2, axis=1)
    degenerate = mean_power < DEGENERATE_POWER_FLOOR
    scale = np.where(degenerate, 1.0, np.sqrt(mean_power))
    out = amps / scale[:, None]
    out[degenerate] = 0.0
    return out, int(degenerate.sum())


@dataclass(frozen=True)
class PreprocessedStream:
    """Selected + normalized amplitude time series for one station."""

    station: int
    timestamps: np.ndarray  # strictly increasing
    amps: np.ndarray  # (n_frames, K)
    n_degenerate: int = 0


def preprocess_stream(stream: CsiStream, keep: Sequence[int]) -> PreprocessedStream:
    keep = np.asarray(keep, dtype=int)
    if len(stream) == 0:
        return PreprocessedStream(stream.station, stream.timestamps, np.zeros((0, len(keep))))
    amps = np.abs(stream.values[:, keep])
    norm, n_deg = _normalize_rows(amps)
    return PreprocessedStream(stream.station, stream.timestamps, norm, n_deg)


def window_bounds(timestamps: np.ndarray, centers: np.ndarray, width_s: float):
    """Index ranges [lo, hi) of frames inside each inclusive window."""
    lo = np.searchsorted(timestamps, centers - width_s / 2, side="left")
    hi = np.searchsorted(timestamps, centers + width_s / 2, side="right")
    return lo, hi


def aggregate_window(ps: PreprocessedStream, center: float, spec: WindowSpec) -> StationSample:
    """Arithmetic mean of preprocessed frames in the inclusive window, or the
    missing placeholder when the window holds no frames."""
    lo, hi = window_bounds(ps.timestamps, np.asarray([center]), spec.width_s)
    lo, hi = int(lo[0]), int(hi[0])
    k = ps.amps.shape[1]
    if hi <= lo:
        return StationSample.absent(k)
    # mean over a fresh buffer: summation order (and hence the exact float
    # result) then matches a boolean-mask scan regardless of view alignment
    return StationSample.observed(ps.amps[lo:hi].copy().mean(axis=0))


def detect_missing(x: MultiStationSample) -> MaskSet:
    """Exactly the stations carrying the missing placeholder."""
    return x.observed_missing


@dataclass
class Dataset:
    """Array-backed sample collection for one split."""

    split: str  # train | val | test | unlabeled
    x: np.ndarray  # (n, N_d, K) float32
    missing: np.ndarray  # (n, N_d) bool
    labels: Optional[np.ndarray]  # (n,) float32 or None
    timestamps: np.ndarray  # (n,) float64 reference timestamps
    provenance: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def n_stations(self) -> int:
        return self.x.shape[1]

    @property
    def k(self) -> int:
        return self.x.shape[2]

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def sample(self, i: int):
        stations = tuple(
            StationSample.absent(self.k)
            if self.missing[i, d]
            else StationSample.observed(self.x[i, d].astype(float))
            for d in range(self.n_stations)
        )
        ms = MultiStationSample(stations)
        if self.labeled:
            return LabeledSample(ms, float(self.labels[i]))
        return ms

    def samples(self) -> list:
        return [self.sample(i) for i in range(self.n)]

    def subset(self, idx: np.ndarray, split: Optional[str] = None) -> "Dataset":
        return Dataset(
            split=split or self.split,
            x=self.x[idx],
            missing=self.missing[idx],
            labels=None if self.labels is None else self.labels[idx],
            timestamps=self.timestamps[idx],
            provenance=dict(self.provenance),
        )


def scenario_hash(scenario: Scenario) -> str:
    payload = json.dumps(
        {
            "n_stations": scenario.n_stations,
            "k_raw": scenario.k_raw,
            "carrier_hz": scenario.carrier_hz,
            "bandwidth_hz": scenario.bandwidth_hz,
            "room_extent": list(scenario.room_extent),
            "ap_position": list(scenario.ap_position),
            "station_positions": [list(p) for p in scenario.station_positions],
            "duration_s": scenario.duration_s,
            "mean_rate_hz": scenario.mean_rate_hz,
            "outage": [scenario.outage.mean_gap_s, scenario.outage.mean_len_s],
            "noise_std": scenario.noise_std,
            "scatter_coeff": scenario.scatter_coeff,
        },
        sort_keys=True,
    )
    return hashlib.md5(payload.encode()).hexdigest()


def _reference_centers(duration_s: float, spec: WindowSpec) -> np.ndarray:
    half = spec.width_s / 2
    n = int(np.floor((duration_s - spec.width_s) * spec.rate_hz)) + 1
    if n <= 0:
        raise ValueError("run too short for the window width")
    return half + np.arange(n) / spec.rate_hz


def _aggregate_all(
    pstreams: List[PreprocessedStream], centers: np.ndarray, spec: WindowSpec
) -> Tuple[np.ndarray, np.ndarray]:
    n = len(centers)
    n_d = len(pstreams)
    k = pstreams[0].amps.shape[1]
    x = np.zeros((n, n_d, k), dtype=np.float32)
    missing = np.zeros((n, n_d), dtype=bool)
    for d, ps in enumerate(pstreams):
        lo, hi = window_bounds(ps.timestamps, centers, spec.width_s)
        for i in range(n):
            if hi[i] > lo[i]:
                x[i, d] = ps.amps[lo[i] : hi[i]].copy().mean(axis=0)
            else:
                missing[i, d] = True
    return x, missing


def split_counts(n: int, ratios: Tuple[float, float, float]) -> Tuple[int, int, int]:
    n_train = int(n * ratios[0] / sum(ratios))
    n_val = int(n * ratios[1] / sum(ratios))
    return n_train, n_val, n - n_train - n_val


def build_labeled_dataset(
    streams: List[CsiStream],
    traj: Trajectory,
    spec: WindowSpec,
    split_ratios: Tuple[float, float, float] = (7.0, 1.5, 1.5),
    keep: Optional[Sequence[int]] = None,
    provenance: Optional[dict] = None,
) -> Tuple[Dataset, Dataset, Dataset]:
    """Windowed, labeled samples split time-contiguously into train/val/test."""
    if not streams:
        raise ValueError("no streams")
    if keep is None:
        keep = default_keep_list(streams[0].values.shape[1] if len(streams[0]) else 64)
    pstreams = [preprocess_stream(s, keep) for s in streams]
    centers = _reference_centers(traj.duration_s, spec)
    x, missing = _aggregate_all(pstreams, centers, spec)
    labels = np.asarray(traj.label(centers), dtype=np.float32)
    prov = dict(provenance or {})
    prov["split_ratios"] = list(split_ratios)
    n_train, n_val, n_test = split_counts(len(centers), split_ratios)
    out = []
    bounds = [(0, n_train, "train"), (n_train, n_train + n_val, "val"), (n_train + n_val, len(centers), "test")]
    for a, b, name in bounds:
        out.append(
            Dataset(
                split=name,
                x=x[a:b],
                missing=missing[a:b],
                labels=labels[a:b],
                timestamps=centers[a:b],
                provenance=dict(prov),
            )
        )
    return tuple(out)


def build_unlabeled_dataset(
    streams: List[CsiStream],
    spec: WindowSpec,
    label_rate_hz: float,
    train_end_s: float,
    keep: Optional[Sequence[int]] = None,
    provenance: Optional[dict] = None,
) -> Dataset:
    """Unlabeled samples at the (higher) SSL rate, restricted to the
    training-time span to avoid leakage into val/test ranges."""
    if spec.rate_hz <= label_rate_hz:
        raise ValueError(
            f"unlabeled rate {spec.rate_hz} Hz must exceed label rate {label_rate_hz} Hz"
        )
    if keep is None:
        keep = default_keep_list(streams[0].values.shape[1] if len(streams[0]) else 64)
    pstreams = [preprocess_stream(s, keep) for s in streams]
    centers = _reference_centers(train_end_s, spec)
    x, missing = _aggregate_all(pstreams, centers, spec)
    return Dataset(
        split="unlabeled",
        x=x,
        missing=missing,
        labels=None,
        timestamps=centers,
        provenance=dict(provenance or {}),
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_MAGIC = b"MSDS"
_FORMAT_VERSION = 1
_SPLIT_CODES = {"train": 0, "val": 1, "test": 2, "unlabeled": 3}
_SPLIT_NAMES = {v: k for k, v in _SPLIT_CODES.items()}


class DatasetFormatError(Exception):
    pass


def save_dataset(d: Dataset, path) -> None:
    """Versioned binary file: header, float32 records (amplitudes, missing
    flags, optional label per sample), timestamps, trailing CRC32."""
    buf = bytearray()
    buf += _MAGIC
    shash = bytes.fromhex(d.provenance.get("scenario_hash", "0" * 32))
    seed = int(d.provenance.get("seed", 0))
    buf += struct.pack(
        "<IIIQBB16sQ",
        _FORMAT_VERSION,
        d.n_stations,
        d.k,
        d.n,
        1 if d.labeled else 0,
        _SPLIT_CODES.get(d.split, 3),
        shash,
        seed,
    )
    x = np.ascontiguousarray(d.x, dtype="<f4")
    miss = np.ascontiguousarray(d.missing, dtype=np.uint8)
    labels = None if d.labels is None else np.ascontiguousarray(d.labels, dtype="<f4")
    for i in range(d.n):
        buf += x[i].tobytes()
        buf += miss[i].tobytes()
        if labels is not None:
            buf += labels[i].tobytes()
    buf += np.ascontiguousarray(d.timestamps, dtype="<f8").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    with open(path, "wb") as f:
        f.write(bytes(buf))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 + 46 + 4 or raw[:4] != _MAGIC:
        raise DatasetFormatError("not a dataset file (bad magic or truncated)")
    (crc_stored,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc_stored:
        raise DatasetFormatError("checksum failure")
    version, n_d, k, n, labeled, split_code, shash, seed = struct.unpack(
        "<IIIQBB16sQ", raw[4 : 4 + 46]
    )
    if version != _FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {version}")
    rec_size = n_d * k * 4 + n_d + (4 if labeled else 0)
    body = raw[4 + 46 : -4]
    expected = n * rec_size + n * 8
    if len(body) != expected:
        raise DatasetFormatError(
            f"payload size {len(body)} does not match header (expected {expected})"
        )
    x = np.zeros((n, n_d, k), dtype=np.float32)
    missing = np.zeros((n, n_d), dtype=bool)
    labels = np.zeros(n, dtype=np.float32) if labeled else None
    off = 0
    for i in range(n):
        x[i] = np.frombuffer(body, "<f4", n_d * k, off).reshape(n_d, k)
        off += n_d * k * 4
        missing[i] = np.frombuffer(body, np.uint8, n_d, off).astype(bool)
        off += n_d
        if labeled:
            labels[i] = np.frombuffer(body, "<f4", 1, off)[0]
            off += 4
    timestamps = np.frombuffer(body, "<f8", n, off).copy()
    return Dataset(
        split=_SPLIT_NAMES.get(split_code, "unlabeled"),
        x=x,
        missing=missing,
        labels=labels,
        timestamps=timestamps,
        provenance={"scenario_hash": shash.hex(), "seed": seed},
    )


def export_csv(d: Dataset, path) -> None:
    """Flat CSV for inspection: timestamp, label, missing flags, amplitudes."""
    cols = ["timestamp"]
    if d.labeled:
        cols.append("label")
    cols += [f"missing_{i}" for i in range(d.n_stations)]
    cols += [f"s{di}_k{ki}" for di in range(d.n_stations) for ki in range(d.k)]
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for i in range(d.n):
            row = [repr(float(d.timestamps[i]))]
            if d.labeled:
                row.append(repr(float(d.labels[i])))
            row += [str(int(v)) for v in d.missing[i]]
            row += [repr(float(v)) for v in d.x[i].ravel()]
            f.write(",".join(row) + "\n")
