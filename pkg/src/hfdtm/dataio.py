"""Movement-count tables, corridor topology, splitting, scaling and windowing."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

INTERVAL = np.timedelta64(15, "m")
DEFAULT_WINDOW = 16


class DataError(ValueError):
    """Raised for malformed input files or inconsistent data."""


@dataclass(frozen=True)
class MovementTable:
    timestamps: np.ndarray  # datetime64[m], shape (M,)
    counts: np.ndarray  # float64, shape (M, N)
    column_ids: tuple[str, ...]

    def __post_init__(self):
        if self.counts.ndim != 2:
            raise DataError(f"counts must be 2-D, got shape {self.counts.shape}")
        if self.counts.shape[1] != len(self.column_ids):
            raise DataError(
                f"{self.counts.shape[1]} count columns but {len(self.column_ids)} column ids"
            )
        if self.counts.shape[0] != self.timestamps.shape[0]:
            raise DataError("timestamps and counts disagree on row count")

    def __len__(self) -> int:
        return self.counts.shape[0]

    @property
    def n_movements(self) -> int:
        return self.counts.shape[1]

    @property
    def hours(self) -> np.ndarray:
        return (self.timestamps.astype("datetime64[h]") - self.timestamps.astype("datetime64[D]")).astype(int)

    def rows(self, start: int, stop: int) -> "MovementTable":
        return MovementTable(self.timestamps[start:stop], self.counts[start:stop], self.column_ids)

    def with_counts(self, counts: np.ndarray) -> "MovementTable":
        return MovementTable(self.timestamps, counts, self.column_ids)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update("\x1f".join(self.column_ids).encode())
        h.update(self.timestamps.astype("datetime64[m]").astype(np.int64).tobytes())
        h.update(np.ascontiguousarray(self.counts).tobytes())
        return h.hexdigest()


def _parse_timestamp(text: str, row: int) -> np.datetime64:
    try:
        ts = datetime.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"row {row}: malformed timestamp {text!r}") from None
    return np.datetime64(ts.replace(tzinfo=None), "m")


def load_movement_csv(path: str | Path) -> MovementTable:
    """Read a ``timestamp,<movement>,...`` CSV of 15-minute counts.

    Row numbers in errors count data rows from 1 (the header is row 0).
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2:
            raise DataError(f"{path}: header needs a timestamp and at least one movement")
        column_ids = tuple(c.strip() for c in header[1:])
        stamps, rows = [], []
        for row_no, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"row {row_no}: expected {len(header)} fields, got {len(rec)}")
            ts = _parse_timestamp(rec[0], row_no)
            try:
                vals = [float(v) for v in rec[1:]]
            except ValueError:
                raise DataError(f"row {row_no}: non-numeric count") from None
            if any(not math.isfinite(v) for v in vals):
                raise DataError(f"row {row_no}: non-finite count")
            if any(v < 0 for v in vals):
                raise DataError(f"row {row_no}: negative count")
            if stamps:
                step = ts - stamps[-1]
                if step != INTERVAL:
                    kind = "gap" if step > INTERVAL else "non-increasing timestamp"
                    raise DataError(f"row {row_no}: {kind} (expected 15-minute spacing, got {step})")
            stamps.append(ts)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return MovementTable(
        np.array(stamps, dtype="datetime64[m]"), np.array(rows, dtype=np.float64), column_ids
    )


def write_movement_csv(table: MovementTable, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *table.column_ids])
        integral = np.all(table.counts == np.round(table.counts))
        for ts, row in zip(table.timestamps, table.counts):
            vals = [str(int(v)) for v in row] if integral else [repr(float(v)) for v in row]
            w.writerow([str(ts.astype("datetime64[m]")), *vals])


# -- topology ------------------------------------------------------------


@dataclass(frozen=True)
class CorridorTopology:
    movement_ids: tuple[str, ...]
    corridor_idx: np.ndarray
    active_idx: np.ndarray
    groups: tuple[np.ndarray, ...]
    zero_mask: np.ndarray  # float64 0/1, shape (N,)
    group_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        n = self.n_movements
        if self.zero_mask.shape != (n,):
            raise DataError(f"zero mask has shape {self.zero_mask.shape}, expected ({n},)")
        for name, idx in (("corridor", self.corridor_idx), ("active", self.active_idx)):
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise DataError(f"{name} index out of range [0, {n})")
            if len(set(idx.tolist())) != idx.size:
                raise DataError(f"duplicate {name} index")
        if self.corridor_idx.size == 0:
            raise DataError("corridor index set is empty")
        if not self.groups:
            raise DataError("need at least one intersection group")
        seen = np.zeros(n, dtype=int)
        for g in self.groups:
            if g.size == 0:
                raise DataError("empty intersection group")
            if g.min() < 0 or g.max() >= n:
                raise DataError(f"group index out of range [0, {n})")
            seen[g] += 1
        if np.any(seen > 1):
            raise DataError(f"overlapping groups at indices {np.flatnonzero(seen > 1).tolist()}")
        if np.any(seen == 0):
            raise DataError(f"groups do not cover indices {np.flatnonzero(seen == 0).tolist()}")
        active = set(self.active_idx.tolist())
        missing = sorted(set(self.corridor_idx.tolist()) - active)
        if missing:
            raise DataError(f"corridor indices not in active set: {missing}")
        zeroed = sorted(active & set(np.flatnonzero(self.zero_mask == 0).tolist()))
        if zeroed:
            raise DataError(f"zero-masked indices listed as active: {zeroed}")

    @property
    def n_movements(self) -> int:
        return len(self.movement_ids)

    @property
    def n_corridor(self) -> int:
        return int(self.corridor_idx.size)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def turning_idx(self) -> np.ndarray:
        """Active movements that are not corridor through-movements."""
        return np.setdiff1d(self.active_idx, self.corridor_idx)

    def to_json(self) -> dict:
        corridor = set(self.corridor_idx.tolist())
        active = set(self.active_idx.tolist())
        owner = {}
        for name, g in zip(self.group_names or [f"G{k}" for k in range(self.n_groups)], self.groups):
            for i in g.tolist():
                owner[i] = name
        movements = []
        for i, mid in enumerate(self.movement_ids):
            zero = bool(self.zero_mask[i] == 0)
            entry = {"id": mid, "intersection": owner[i], "corridor": i in corridor, "zero": zero}
            if (i in active) != (not zero):
                entry["active"] = i in active
            movements.append(entry)
        return {"movements": movements}

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def topology_from_json(doc: dict) -> CorridorTopology:
    try:
        movements = doc["movements"]
    except (KeyError, TypeError):
        raise DataError("topology JSON needs a 'movements' list") from None
    if not isinstance(movements, list) or not movements:
        raise DataError("topology 'movements' must be a non-empty list")
    ids, corridor, active, mask = [], [], [], []
    group_order: dict[str, list[int]] = {}
    for i, m in enumerate(movements):
        try:
            ids.append(str(m["id"]))
            inter = str(m["intersection"])
        except (KeyError, TypeError):
            raise DataError(f"movement {i}: needs 'id' and 'intersection'") from None
        zero = bool(m.get("zero", False))
        mask.append(0.0 if zero else 1.0)
        if m.get("corridor", False):
            corridor.append(i)
        if m.get("active", not zero):
            active.append(i)
        group_order.setdefault(inter, []).append(i)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate movement ids in topology")
    return CorridorTopology(
        movement_ids=tuple(ids),
        corridor_idx=np.array(corridor, dtype=np.intp),
        active_idx=np.array(active, dtype=np.intp),
        groups=tuple(np.array(g, dtype=np.intp) for g in group_order.values()),
        zero_mask=np.array(mask),
        group_names=tuple(group_order),
    )


def load_topology(path: str | Path) -> CorridorTopology:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    return topology_from_json(doc)


def write_topology(topology: CorridorTopology, path: str | Path) -> None:
    Path(path).write_text(json.dumps(topology.to_json(), indent=1) + "\n")


def check_alignment(table: MovementTable, topology: CorridorTopology) -> None:
    if tuple(table.column_ids) != tuple(topology.movement_ids):
        raise DataError("CSV header order does not match topology movement order")


# -- splitting and scaling ----------------------------------------------


def chronological_split(
    table: MovementTable, fractions: Sequence[float] = (0.70, 0.15, 0.15)
) -> tuple[MovementTable, MovementTable, MovementTable]:
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must be three values summing to 1, got {fractions}")
    m = len(table)
    if m < 3:
        raise DataError("need at least 3 rows to split")
    # the epsilon keeps products like 20 * 0.85 from flooring to 16
    a = math.floor(m * fractions[0] + 1e-9)
    b = math.floor(m * (fractions[0] + fractions[1]) + 1e-9)
    return table.rows(0, a), table.rows(a, b), table.rows(b, m)


@dataclass(frozen=True)
class NormalizationParams:
    min: np.ndarray
    max: np.ndarray

    @property
    def span(self) -> np.ndarray:
        return self.max - self.min

    def digest(self) -> str:
        return hashlib.sha256(self.min.tobytes() + self.max.tobytes()).hexdigest()


def fit_normalization(train: MovementTable) -> NormalizationParams:
    if len(train) == 0:
        raise DataError("cannot fit normalization on an empty table")
    return NormalizationParams(train.counts.min(axis=0), train.counts.max(axis=0))


def _check_width(width: int, params: NormalizationParams) -> None:
    if width != params.min.shape[0]:
        raise DataError(f"{width} columns but normalization has {params.min.shape[0]}")


def apply_normalization(values, params: NormalizationParams):
    """Min-max scale columnwise; accepts a MovementTable or an array ``(..., N)``.

    Out-of-range values are not clipped. Constant training columns map to 0.
    """
    if isinstance(values, MovementTable):
        return values.with_counts(apply_normalization(values.counts, params))
    values = np.asarray(values, dtype=np.float64)
    _check_width(values.shape[-1], params)
    span = params.span
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (values - params.min) / safe, 0.0)


def invert_normalization(values, params: NormalizationParams):
    if isinstance(values, MovementTable):
        return values.with_counts(invert_normalization(values.counts, params))
    values = np.asarray(values, dtype=np.float64)
    _check_width(values.shape[-1], params)
    return values * params.span + params.min


# -- windows ------------------------------------------------------------


@dataclass(frozen=True)
class WindowedSample:
    X: np.ndarray  # (T, N)
    y: np.ndarray  # (N,)
    h: int


@dataclass(frozen=True)
class WindowSet:
    """All one-step-ahead windows of a single (normalized) split.

    Behaves as a sequence of :class:`WindowedSample`; ``batch`` gathers
    stacked arrays for training.
    """

    values: np.ndarray  # (M, N)
    hours: np.ndarray  # (M,)
    window: int

    def __len__(self) -> int:
        return self.values.shape[0] - self.window

    def __getitem__(self, i: int) -> WindowedSample:
        if not -len(self) <= i < len(self):
            raise IndexError(i)
        i %= len(self)
        t = self.window
        return WindowedSample(self.values[i : i + t].copy(), self.values[i + t].copy(), int(self.hours[i + t]))

    def __iter__(self) -> Iterator[WindowedSample]:
        for i in range(len(self)):
            yield self[i]

    def batch(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(X, y, h)`` with shapes ``(B, T, N)``, ``(B, N)``, ``(B,)``."""
        idx = np.asarray(idx, dtype=np.intp)
        X = self.values[idx[:, None] + np.arange(self.window)]
        return X, self.values[idx + self.window], self.hours[idx + self.window]

    def all(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.batch(np.arange(len(self)))

    @property
    def targets(self) -> np.ndarray:
        return self.values[self.window :]


def make_windows(table: MovementTable, window: int = DEFAULT_WINDOW) -> WindowSet:
    if window < 1:
        raise DataError("window length must be >= 1")
    if len(table) <= window:
        raise DataError(f"table has {len(table)} rows; need more than window length {window}")
    return WindowSet(np.ascontiguousarray(table.counts), table.hours, window)


@dataclass(frozen=True)
class PreparedData:
    """Everything a training run needs, derived from one table."""

    train: WindowSet
    val: WindowSet
    test: WindowSet
    norm: NormalizationParams
    topology: CorridorTopology
    data_digest: str


def prepare(
    table: MovementTable,
    topology: CorridorTopology,
    window: int = DEFAULT_WINDOW,
    fractions: Sequence[float] = (0.70, 0.15, 0.15),
) -> PreparedData:
    """Split chronologically, fit scaling on train, window each split separately."""
    check_alignment(table, topology)
    train, val, test = chronological_split(table, fractions)
    norm = fit_normalization(train)
    sets = [make_windows(apply_normalization(part, norm), window) for part in (train, val, test)]
    return PreparedData(*sets, norm=norm, topology=topology, data_digest=table.digest())
