"""KPI preprocessing: timestamp alignment, missing-value policy, IQR pruning,
sequence construction and per-channel standardisation.

Frames keep values in 64-bit with ``MISSING`` (NaN) marking empty cells, so
that the legal imputed value -1 is never confused with an absent one.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

MISSING = float("nan")
TIMESTAMP_COLUMN = "timestamp_ms"
DEFAULT_WINDOW_MS = 20
DEFAULT_STEP_MS = 20


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


def is_missing(values) -> np.ndarray:
    return np.isnan(values)


# ---------------------------------------------------------------------------
# schema


@dataclasses.dataclass(frozen=True)
class KpiChannel:
    name: str
    unit: str
    kind: str  # "continuous" or "discrete-index"
    low: float
    high: float

    def __post_init__(self):
        if self.kind not in ("continuous", "discrete-index"):
            raise SchemaError(f"{self.name}: unknown kind {self.kind!r}")
        if not self.low <= self.high:
            raise SchemaError(f"{self.name}: empty observed range {self.low}..{self.high}")


@dataclasses.dataclass(frozen=True)
class KpiSchema:
    channels: tuple[KpiChannel, ...]
    impute_channel: str | None = "Packet Delay"
    impute_value: float = -1.0

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.channels)

    def __len__(self) -> int:
        return len(self.channels)

    def check_columns(self, columns: Sequence[str]) -> None:
        unknown = [c for c in columns if c not in self.names]
        if unknown:
            raise SchemaError(f"unknown channel(s) {unknown}; schema has {list(self.names)}")
        if tuple(columns) != self.names:
            missing = [c for c in self.names if c not in columns]
            raise SchemaError(f"columns {list(columns)} do not match schema; missing {missing}")

    def to_json(self) -> dict:
        return {"channels": [dataclasses.asdict(c) for c in self.channels],
                "impute_channel": self.impute_channel, "impute_value": self.impute_value}

    @classmethod
    def from_json(cls, doc: Mapping) -> "KpiSchema":
        chans = tuple(KpiChannel(**c) for c in doc["channels"])
        return cls(chans, doc.get("impute_channel", "Packet Delay"), doc.get("impute_value", -1.0))

    @classmethod
    def generic(cls, names: Sequence[str]) -> "KpiSchema":
        """Unconstrained continuous channels, no imputation column unless present."""
        chans = tuple(KpiChannel(n, "", "continuous", -np.inf, np.inf) for n in names)
        return cls(chans, "Packet Delay" if "Packet Delay" in names else None)


# Observed ranges from the O-RAN testbed summary table.
TABLE1 = KpiSchema((
    KpiChannel("Spectral Efficiency", "bps/Hz", "continuous", 0.00, 3.74),
    KpiChannel("RSRP", "dBm", "continuous", -102, -75),
    KpiChannel("SINR", "dB", "continuous", 9.43, 24.33),
    KpiChannel("MIMO Rank", "", "discrete-index", 1, 2),
    KpiChannel("MCS", "index", "discrete-index", 0, 27),
    KpiChannel("RB Number", "RBs", "discrete-index", 2, 25),
    KpiChannel("CQI", "index", "discrete-index", 0, 13),
    KpiChannel("RSRQ", "dB", "continuous", -14.00, -6.40),
    KpiChannel("PMI", "index", "discrete-index", 0, 3),
    KpiChannel("UE RSSI", "dBm", "continuous", -70, -60),
    KpiChannel("UE Buffer Status", "bytes", "continuous", 0, 2944),
    KpiChannel("BLER", "%", "continuous", 0, 78.00),
    KpiChannel("Packet Delay", "ms", "continuous", 0, 3048.06),
))


# ---------------------------------------------------------------------------
# frames


@dataclasses.dataclass(eq=False)
class KpiFrame:
    timestamps: np.ndarray  # int64 ms, ascending
    columns: tuple[str, ...]
    values: np.ndarray  # float64 [rows, K], NaN = MISSING

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64).reshape(-1)
        self.columns = tuple(self.columns)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(
            len(self.timestamps), len(self.columns))
        if np.any(np.diff(self.timestamps) < 0):
            raise DataError("timestamps must be sorted ascending")

    def __len__(self) -> int:
        return len(self.timestamps)

    def take(self, rows) -> "KpiFrame":
        return KpiFrame(self.timestamps[rows], self.columns, self.values[rows])

    def streams(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Per-column (timestamps, values) with missing cells left out."""
        out = {}
        for j, name in enumerate(self.columns):
            keep = ~is_missing(self.values[:, j])
            out[name] = (self.timestamps[keep], self.values[keep, j])
        return out


def _parse_cell(text: str) -> float:
    text = text.strip()
    if text == "":
        return MISSING
    v = float(text)
    if not np.isfinite(v):
        raise DataError(f"non-finite cell {text!r}")
    return v


def read_csv(path) -> KpiFrame:
    """Read the ``timestamp_ms,<KPI>...`` dialect; empty cells become MISSING."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or header[0].strip() != TIMESTAMP_COLUMN:
            raise SchemaError(f"{path}: first column must be {TIMESTAMP_COLUMN!r}")
        columns = [h.strip() for h in header[1:]]
        ts, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(rec)}")
            try:
                ts.append(int(rec[0]))
                rows.append([_parse_cell(c) for c in rec[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    order = np.argsort(np.asarray(ts, dtype=np.int64), kind="stable")
    values = np.asarray(rows, dtype=np.float64).reshape(len(ts), len(columns))
    return KpiFrame(np.asarray(ts, dtype=np.int64)[order], columns, values[order])


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else repr(float(v))


def write_csv(frame: KpiFrame, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([TIMESTAMP_COLUMN, *frame.columns])
        for t, row in zip(frame.timestamps, frame.values):
            w.writerow([int(t), *(_fmt(v) for v in row)])


# ---------------------------------------------------------------------------
# alignment


def moving_average_align(streams: Mapping[str, tuple[Sequence[int], Sequence[float]]],
                         window: int = DEFAULT_WINDOW_MS, step: int = DEFAULT_STEP_MS,
                         columns: Sequence[str] | None = None) -> KpiFrame:
    """Average each KPI's raw events over windows ``[t, t + window)``.

    Windows start at the earliest event and advance by ``step`` until a window
    ends past the last event. Each row is stamped with its window start; a
    KPI with no events in a window is MISSING there.
    """
    if window <= 0 or step <= 0:
        raise ValueError(f"window and step must be positive, got {window}, {step}")
    columns = tuple(columns) if columns is not None else tuple(streams)
    prepared = []
    for name in columns:
        t, v = streams.get(name, ((), ()))
        t = np.asarray(t, dtype=np.int64)
        v = np.asarray(v, dtype=np.float64)
        if np.any(np.diff(t) < 0):
            raise DataError(f"stream {name!r} is not sorted by timestamp")
        prepared.append((t, v))
    nonempty = [t for t, _ in prepared if len(t)]
    if not nonempty:
        return KpiFrame(np.zeros(0, np.int64), columns, np.zeros((0, len(columns))))
    t0 = min(int(t[0]) for t in nonempty)
    t_last = max(int(t[-1]) for t in nonempty)
    starts = np.arange(t0, t_last + 1, step, dtype=np.int64)
    values = np.full((len(starts), len(columns)), MISSING)
    for j, (t, v) in enumerate(prepared):
        if not len(t):
            continue
        lo = np.searchsorted(t, starts, side="left")
        hi = np.searchsorted(t, starts + window, side="left")
        n = hi - lo
        has = n > 0
        # segment sums via reduceat over interleaved (lo, hi) pairs; odd slots are discarded
        padded = np.append(v, 0.0)
        pairs = np.stack([lo[has], hi[has]], axis=1).reshape(-1)
        sums = np.add.reduceat(padded, pairs)[::2]
        values[has, j] = sums / n[has]
    return KpiFrame(starts, columns, values)


def align_frame(frame: KpiFrame, window: int = DEFAULT_WINDOW_MS,
                step: int = DEFAULT_STEP_MS) -> KpiFrame:
    return moving_average_align(frame.streams(), window, step, frame.columns)


# ---------------------------------------------------------------------------
# padding and IQR filtering


@dataclasses.dataclass(frozen=True)
class IqrBounds:
    q1: float
    q3: float
    lower: float
    upper: float

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1

    def inside(self, values) -> np.ndarray:
        values = np.asarray(values)
        return (values >= self.lower) & (values <= self.upper)


def iqr_bounds(values, q_low: float = 0.10, q_high: float = 0.90,
               k: float = 1.5) -> IqrBounds:
    """Pruning thresholds from the 10th/90th quantiles (linear interpolation)."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    values = values[np.isfinite(values)]
    if values.size < 2:
        raise DataError(f"need at least 2 finite samples for IQR bounds, got {values.size}")
    q1, q3 = np.quantile(values, [q_low, q_high], method="linear")
    iqr = q3 - q1
    return IqrBounds(float(q1), float(q3), float(q1 - k * iqr), float(q3 + k * iqr))


@dataclasses.dataclass
class FilterResult:
    frame: KpiFrame
    dropped_missing: int
    dropped_iqr: int
    bounds: dict[str, IqrBounds]


def impute_and_drop(frame: KpiFrame, schema: KpiSchema) -> tuple[KpiFrame, int]:
    """Impute a lone missing delay cell; drop any row missing another KPI."""
    schema.check_columns(frame.columns)
    miss = is_missing(frame.values)
    values = frame.values.copy()
    if schema.impute_channel in frame.columns:
        j = frame.columns.index(schema.impute_channel)
        others = np.delete(miss, j, axis=1).any(axis=1)
        fill = miss[:, j] & ~others
        values[fill, j] = schema.impute_value
        miss = is_missing(values)
    keep = ~miss.any(axis=1)
    out = KpiFrame(frame.timestamps[keep], frame.columns, values[keep])
    return out, int((~keep).sum())


def compute_bounds(frames: Iterable[KpiFrame]) -> dict[str, IqrBounds]:
    frames = list(frames)
    columns = frames[0].columns
    stacked = np.concatenate([f.values for f in frames], axis=0)
    return {name: iqr_bounds(stacked[:, j]) for j, name in enumerate(columns)}


def iqr_prune(frame: KpiFrame, bounds: Mapping[str, IqrBounds]) -> tuple[KpiFrame, int]:
    """Drop rows holding any value outside its channel's bounds."""
    keep = np.ones(len(frame), dtype=bool)
    for j, name in enumerate(frame.columns):
        keep &= bounds[name].inside(frame.values[:, j])
    return frame.take(keep), int((~keep).sum())


def pad_and_filter(frame: KpiFrame, schema: KpiSchema,
                   bounds: Mapping[str, IqrBounds] | None = None) -> FilterResult:
    """Missing-value policy followed by one IQR pruning pass.

    Bounds are computed from the padded frame unless supplied (for pooling
    bounds over several files, see :func:`compute_bounds`).
    """
    padded, dropped_missing = impute_and_drop(frame, schema)
    if bounds is None:
        bounds = compute_bounds([padded]) if len(padded) >= 2 else {}
    if not bounds:
        return FilterResult(padded, dropped_missing, 0, {})
    pruned, dropped_iqr = iqr_prune(padded, bounds)
    return FilterResult(pruned, dropped_missing, dropped_iqr, dict(bounds))


# ---------------------------------------------------------------------------
# sequences


@dataclasses.dataclass(eq=False)
class SequenceDataset:
    """Windows ``X [M, n_seq, K]`` with next-row targets ``y [M, K]``.

    ``series`` keeps the contiguous runs of rows the windows were cut from;
    pretraining slides over them.
    """

    X: np.ndarray
    y: np.ndarray
    channels: tuple[str, ...]
    scalers: "Scalers | None" = None
    series: list[np.ndarray] = dataclasses.field(default_factory=list)
    target_index: np.ndarray | None = None

    def __post_init__(self):
        self.channels = tuple(self.channels)
        K = len(self.channels)
        self.X = np.asarray(self.X, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.float32)
        if self.X.ndim != 3 or self.X.shape[2] != K or self.y.shape != (self.X.shape[0], K):
            raise DataError(f"inconsistent dataset shapes X{self.X.shape} y{self.y.shape} K={K}")

    @property
    def M(self) -> int:
        return self.X.shape[0]

    @property
    def n_seq(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return len(self.channels)

    def subset(self, rows) -> "SequenceDataset":
        ti = None if self.target_index is None else self.target_index[rows]
        return SequenceDataset(self.X[rows], self.y[rows], self.channels, self.scalers,
                               self.series, ti)

    def standardized(self, scalers: "Scalers | None" = None) -> tuple[np.ndarray, np.ndarray]:
        sc = scalers or self.scalers
        if sc is None:
            raise DataError("dataset has no scalers")
        sc.check_channels(self.channels)
        return sc.apply(self.X), sc.apply(self.y)


def contiguous_segments(timestamps: np.ndarray, t_step: int) -> list[tuple[int, int]]:
    """Half-open row ranges whose consecutive timestamps differ by exactly ``t_step``."""
    n = len(timestamps)
    if n == 0:
        return []
    breaks = np.flatnonzero(np.diff(timestamps) != t_step) + 1
    edges = [0, *breaks.tolist(), n]
    return list(zip(edges[:-1], edges[1:]))


def build_sequences(frame: KpiFrame, n_seq: int, t_step: int) -> SequenceDataset:
    """Stack ``n_seq`` consecutive rows ending at row i; target is row i+1.

    A point is emitted only when every spacing from row i-n_seq+1 to row i+1
    equals ``t_step``.
    """
    if n_seq < 1:
        raise ValueError("n_seq must be >= 1")
    if t_step <= 0:
        raise ValueError("t_step must be positive")
    n, K = len(frame), len(frame.columns)
    ok = np.diff(frame.timestamps) == t_step  # ok[j]: row j -> j+1
    ends = []
    if n >= n_seq + 1:
        # run[j] = number of consecutive good spacings ending at spacing j
        run = np.zeros(len(ok), dtype=np.int64)
        count = 0
        for j, good in enumerate(ok):
            count = count + 1 if good else 0
            run[j] = count
        # window ending at row i needs spacings i-n_seq+1 .. i all good
        for i in range(n_seq - 1, n - 1):
            if run[i] >= n_seq:
                ends.append(i)
    ends = np.asarray(ends, dtype=np.int64)
    if len(ends):
        idx = ends[:, None] + np.arange(-n_seq + 1, 1)
        X = frame.values[idx]
        y = frame.values[ends + 1]
    else:
        X = np.zeros((0, n_seq, K))
        y = np.zeros((0, K))
    series = [frame.values[a:b].astype(np.float32) for a, b in
              contiguous_segments(frame.timestamps, t_step)]
    return SequenceDataset(X, y, frame.columns, None, series, ends + 1)


def concat_datasets(parts: Sequence[SequenceDataset]) -> SequenceDataset:
    channels = parts[0].channels
    for p in parts:
        if p.channels != channels:
            raise SchemaError("datasets have different channels")
    X = np.concatenate([p.X for p in parts])
    y = np.concatenate([p.y for p in parts])
    series = [s for p in parts for s in p.series]
    return SequenceDataset(X, y, channels, None, series)


# ---------------------------------------------------------------------------
# scalers


@dataclasses.dataclass(frozen=True)
class ChannelScaler:
    channel: str
    mean: float
    std: float
    clamped: bool = False


class Scalers:
    """Per-channel z-scoring, ``z = (v - mean) / std``."""

    def __init__(self, items: Sequence[ChannelScaler]):
        self.items = tuple(items)
        self.mean = np.array([s.mean for s in self.items], dtype=np.float64)
        self.std = np.array([s.std for s in self.items], dtype=np.float64)

    @property
    def channels(self) -> tuple[str, ...]:
        return tuple(s.channel for s in self.items)

    def check_channels(self, channels: Sequence[str]) -> None:
        if tuple(channels) != self.channels:
            raise SchemaError(f"scaler channels {list(self.channels)} do not match {list(channels)}")

    def apply(self, values) -> np.ndarray:
        return ((np.asarray(values, dtype=np.float64) - self.mean) / self.std).astype(np.float32)

    def invert(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) * self.std + self.mean).astype(np.float32)

    def to_json(self) -> list[dict]:
        return [dataclasses.asdict(s) for s in self.items]

    @classmethod
    def from_json(cls, doc: Sequence[Mapping]) -> "Scalers":
        return cls([ChannelScaler(d["channel"], float(d["mean"]), float(d["std"]),
                                  bool(d.get("clamped", False))) for d in doc])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Scalers":
        return cls.from_json(json.loads(Path(path).read_text()))

    def __eq__(self, other) -> bool:
        return isinstance(other, Scalers) and self.items == other.items


def fit_scalers(data, channels: Sequence[str]) -> Scalers:
    """Population mean/std per channel of ``data [..., K]``.

    Constant channels get ``std = 1`` and are flagged ``clamped``.
    """
    arr = np.asarray(data, dtype=np.float64).reshape(-1, len(channels))
    if arr.shape[0] == 0:
        raise DataError("cannot fit scalers on empty data")
    mean = arr.mean(axis=0)
    std = arr.std(axis=0)
    items = []
    for name, m, s in zip(channels, mean, std):
        clamped = not s > 1e-12 * max(1.0, abs(m))
        if clamped:
            log.warning("channel %r is constant; clamping its std to 1", name)
            s = 1.0
        items.append(ChannelScaler(name, float(m), float(s), clamped))
    return Scalers(items)


def fit_dataset_scalers(dataset: SequenceDataset) -> Scalers:
    """Fit on the dataset's source rows (its series), falling back to the windows."""
    if dataset.series:
        rows = np.concatenate([s.reshape(-1, dataset.K) for s in dataset.series])
    else:
        rows = dataset.X.reshape(-1, dataset.K)
    return fit_scalers(rows, dataset.channels)


def apply_scalers(dataset: SequenceDataset, scalers: Scalers) -> SequenceDataset:
    scalers.check_channels(dataset.channels)
    return SequenceDataset(scalers.apply(dataset.X), scalers.apply(dataset.y), dataset.channels,
                           scalers, [scalers.apply(s) for s in dataset.series],
                           dataset.target_index)


def invert_scalers(y_hat, scalers: Scalers) -> np.ndarray:
    return scalers.invert(y_hat)


# ---------------------------------------------------------------------------
# end-to-end


@dataclasses.dataclass
class PreprocessSummary:
    files: int
    rows_in: int
    rows_dropped_missing: int
    rows_dropped_iqr: int
    rows_out: int
    M: int
    K: int
    M_test: int = 0

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def preprocess_frames(raw: Sequence[KpiFrame], schema: KpiSchema, n_seq: int, t_step: int,
                      window: int = DEFAULT_WINDOW_MS, step: int = DEFAULT_STEP_MS,
                      test_fraction: float = 0.0,
                      ) -> tuple[SequenceDataset, SequenceDataset | None, PreprocessSummary]:
    """Align, pad/filter and sequence several recordings.

    IQR bounds are pooled over all padded recordings; sequences never cross
    recording boundaries. With ``test_fraction`` the trailing rows of every
    recording form a separate test dataset.
    """
    if not raw:
        raise DataError("no input frames")
    for f in raw:
        schema.check_columns(f.columns)
    aligned = [align_frame(f, window, step) for f in raw]
    padded, dropped_missing = [], 0
    for f in aligned:
        p, d = impute_and_drop(f, schema)
        padded.append(p)
        dropped_missing += d
    total = sum(len(p) for p in padded)
    if total < 2:
        raise DataError("fewer than 2 rows survive the missing-value policy")
    bounds = compute_bounds(padded)
    train_parts, test_parts, dropped_iqr = [], [], 0
    for p in padded:
        kept, d = iqr_prune(p, bounds)
        dropped_iqr += d
        cut = len(kept) - int(round(len(kept) * test_fraction))
        train_parts.append(build_sequences(kept.take(slice(0, cut)), n_seq, t_step))
        if test_fraction > 0:
            test_parts.append(build_sequences(kept.take(slice(cut, None)), n_seq, t_step))
    dataset = concat_datasets(train_parts)
    test = concat_datasets(test_parts) if test_parts else None
    rows_in = sum(len(f) for f in aligned)
    summary = PreprocessSummary(
        files=len(raw), rows_in=rows_in, rows_dropped_missing=dropped_missing,
        rows_dropped_iqr=dropped_iqr, rows_out=rows_in - dropped_missing - dropped_iqr,
        M=dataset.M, K=dataset.K, M_test=0 if test is None else test.M)
    return dataset, test, summary
