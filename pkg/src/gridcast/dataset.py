"""Data pipeline: raw activity TSV -> clustered, normalized window samples.

Stages, in order:
  1. load_records      parse TSV rows into a cell x time x channel array
  2. cluster_cells     k-means on grid coordinates, clusters re-indexed
                       so spatially adjacent clusters get adjacent ids
  3. aggregate         sum member cells into per-cluster node series
  4. interpolate       fill missing values linearly, flagging every fill
  5. split             8:1:1 chronological train/val/test boundaries
  6. median_normalize  per node and channel, medians from the training
                       range only
  7. windows + masks   fixed-length samples and randomized observation
                       masks for the imputation task

The prepared series round-trips through a binary cache file:

  offset  size  field
  0       4     magic b"GRID"
  4       4     version, u32 LE (currently 1)
  8       8*7   u64 LE: T, N, C, train_end, val_end, origin_ms, step_ms
  64      --    values, f32 LE, T*N*C elements, time-major [T, N, C]
  .       --    medians, f32 LE, N*C elements
  .       --    centroids, f32 LE, N*2 elements (row, col)
  .       --    observed bitmap, ceil(T*N*C / 8) bytes, LSB-first
  .       --    interpolated bitmap, same layout

All multi-byte values are little-endian.  Reads validate the magic,
version, and total length and report the byte offset of any truncation.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

log = logging.getLogger("gridcast.dataset")

CACHE_MAGIC = b"GRID"
CACHE_VERSION = 1
DEFAULT_STEP_MS = 600_000  # ten-minute intervals

# Column positions in the raw TSV (defaults match the Milan/Trentino export:
# square id, interval start in epoch ms, country code, then five activity
# channels; any channel field may be empty).
DEFAULT_COLUMNS = {
    "square_id": 0,
    "timestamp_ms": 1,
    "channels": (3, 4, 5, 6, 7),
}
CHANNEL_NAMES = ("sms_in", "sms_out", "call_in", "call_out", "internet")


@dataclass
class RawTable:
    """Per-cell series straight from the TSV, missing values as NaN."""
    square_ids: np.ndarray    # [M] int64, sorted
    values: np.ndarray        # [M, T, C] float64, NaN where absent
    origin_ms: int
    step_ms: int
    malformed: int


def load_records(path, columns=None, step_ms: int = DEFAULT_STEP_MS) -> RawTable:
    """Parse a TSV of (square, timestamp, channels...) rows.

    Duplicate (square, timestamp) pairs are summed per channel.  Rows with
    an unparseable id or timestamp, or too few columns, are counted as
    malformed and skipped.  A file with no valid rows is an error.
    """
    columns = columns or DEFAULT_COLUMNS
    id_col = columns["square_id"]
    ts_col = columns["timestamp_ms"]
    ch_cols = tuple(columns["channels"])
    need = max((id_col, ts_col) + ch_cols) + 1
    n_ch = len(ch_cols)

    acc: dict = {}
    malformed = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < need:
                malformed += 1
                continue
            try:
                sq = int(parts[id_col])
                ts = int(parts[ts_col])
            except ValueError:
                malformed += 1
                continue
            if sq < 1:
                malformed += 1
                continue
            vals = acc.get((sq, ts))
            if vals is None:
                vals = acc[(sq, ts)] = [None] * n_ch
            ok = True
            for k, col in enumerate(ch_cols):
                field = parts[col].strip()
                if not field:
                    continue
                try:
                    v = float(field)
                except ValueError:
                    ok = False
                    break
                vals[k] = v if vals[k] is None else vals[k] + v
            if not ok:
                malformed += 1

    if not acc:
        raise ValueError(f"no valid records in {path} ({malformed} malformed lines)")

    squares = np.array(sorted({sq for sq, _ in acc}), dtype=np.int64)
    stamps = sorted({ts for _, ts in acc})
    origin = stamps[0]
    for ts in stamps:
        if (ts - origin) % step_ms != 0:
            raise ValueError(f"timestamp {ts} not aligned to {step_ms} ms grid")
    n_steps = (stamps[-1] - origin) // step_ms + 1

    sq_index = {sq: i for i, sq in enumerate(squares)}
    values = np.full((len(squares), n_steps, n_ch), np.nan)
    for (sq, ts), vals in acc.items():
        t = (ts - origin) // step_ms
        row = values[sq_index[sq], t]
        for k, v in enumerate(vals):
            if v is not None:
                row[k] = v

    if malformed:
        log.warning("skipped %d malformed lines in %s", malformed, path)
    return RawTable(squares, values, origin, step_ms, malformed)


def grid_coordinates(square_ids: np.ndarray, grid_width: int) -> np.ndarray:
    """Row-major (row, col) coordinates for 1-based square ids."""
    zero_based = np.asarray(square_ids, dtype=np.int64) - 1
    if (zero_based < 0).any():
        raise ValueError("square ids must be >= 1")
    return np.stack([zero_based // grid_width, zero_based % grid_width], axis=1).astype(np.float64)


def kmeans_cells(coords: np.ndarray, k: int, rng: np.random.Generator,
                 max_iter: int = 100):
    """Seeded k-means++ on cell coordinates.  Returns (labels, centroids)."""
    m = coords.shape[0]
    if k > m:
        raise ValueError(f"cannot form {k} clusters from {m} cells")
    # k-means++ seeding
    centroids = np.empty((k, coords.shape[1]))
    centroids[0] = coords[rng.integers(m)]
    d2 = ((coords - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = coords[rng.integers(m)]
        else:
            centroids[j] = coords[rng.choice(m, p=d2 / total)]
        d2 = np.minimum(d2, ((coords - centroids[j]) ** 2).sum(axis=1))

    labels = np.zeros(m, dtype=np.int64)
    for _ in range(max_iter):
        dists = ((coords[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = dists.argmin(axis=1)
        for j in range(k):
            members = coords[new_labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
            else:
                # empty cluster: seize the point farthest from its centroid
                far = dists[np.arange(m), new_labels].argmax()
                centroids[j] = coords[far]
                new_labels[far] = j
        if (new_labels == labels).all():
            labels = new_labels
            break
        labels = new_labels
    return labels, centroids


def order_clusters(labels: np.ndarray, centroids: np.ndarray):
    """Renumber clusters by (row, col) of their centroid so that spatially
    nearby clusters receive nearby indices."""
    order = np.lexsort((centroids[:, 1], centroids[:, 0]))
    remap = np.empty(len(order), dtype=np.int64)
    remap[order] = np.arange(len(order))
    return remap[labels], centroids[order]


def aggregate_clusters(cell_values: np.ndarray, labels: np.ndarray, k: int):
    """Sum member-cell activity into [T, N, C] node series.

    A node/step/channel is observed if any member cell reported it.
    """
    _, t_len, n_ch = cell_values.shape
    values = np.zeros((t_len, k, n_ch))
    observed = np.zeros((t_len, k, n_ch), dtype=bool)
    for j in range(k):
        block = cell_values[labels == j]  # [members, T, C]
        seen = ~np.isnan(block)
        observed[:, j, :] = seen.any(axis=0)
        values[:, j, :] = np.where(seen, block, 0.0).sum(axis=0)
    values[~observed] = np.nan
    return values, observed


def interpolate_missing(values: np.ndarray, observed: np.ndarray):
    """Fill NaN gaps per node/channel series.

    Interior gaps are filled linearly between the surrounding observations;
    runs before the first or after the last observation copy the nearest
    one.  Every filled position is flagged.  A series with no observations
    at all is an error.
    """
    t_len, n_nodes, n_ch = values.shape
    filled = values.copy()
    flags = ~observed
    t_axis = np.arange(t_len)
    for n in range(n_nodes):
        for c in range(n_ch):
            obs = observed[:, n, c]
            if obs.all():
                continue
            if not obs.any():
                raise ValueError(f"node {n} channel {c} has no observed values")
            filled[:, n, c] = np.interp(t_axis, t_axis[obs], values[obs, n, c])
    return filled, flags


def split_bounds(t_len: int):
    """Chronological 8:1:1 boundaries: [0, a) train, [a, b) val, [b, T) test."""
    return (t_len * 8) // 10, (t_len * 9) // 10


def median_normalize(values: np.ndarray, train_end: int):
    """Divide each node/channel series by its training-range median.

    A zero median is replaced by 1.0 (and logged) so the series passes
    through unscaled.
    """
    medians = np.median(values[:train_end], axis=0)  # [N, C]
    zero = medians == 0.0
    if zero.any():
        log.warning("zero training median for %d node/channel series; using 1.0",
                    int(zero.sum()))
        medians = np.where(zero, 1.0, medians)
    return values / medians, medians


@dataclass
class GridDataset:
    """Prepared node series plus everything needed to window and denormalize."""
    values: np.ndarray        # [T, N, C] float32, median-normalized
    observed: np.ndarray      # [T, N, C] bool
    interpolated: np.ndarray  # [T, N, C] bool
    medians: np.ndarray       # [N, C] float32
    centroids: np.ndarray     # [N, 2] float32
    train_end: int
    val_end: int
    origin_ms: int
    step_ms: int

    @property
    def n_steps(self):
        return self.values.shape[0]

    @property
    def n_nodes(self):
        return self.values.shape[1]

    @property
    def n_channels(self):
        return self.values.shape[2]

    def split_range(self, split: str):
        if split == "train":
            return 0, self.train_end
        if split == "val":
            return self.train_end, self.val_end
        if split == "test":
            return self.val_end, self.n_steps
        raise ValueError(f"unknown split {split!r}")

    def denormalize(self, arr: np.ndarray) -> np.ndarray:
        """Undo median scaling on an [..., N, C] array."""
        return arr * self.medians


def prepare_dataset(path, grid_width: int, n_clusters: int, seed: int,
                    columns=None, step_ms: int = DEFAULT_STEP_MS) -> GridDataset:
    """Full pipeline from a raw TSV to a prepared GridDataset."""
    raw = load_records(path, columns, step_ms)
    coords = grid_coordinates(raw.square_ids, grid_width)
    rng = np.random.default_rng(seed)
    labels, centroids = kmeans_cells(coords, n_clusters, rng)
    labels, centroids = order_clusters(labels, centroids)
    values, observed = aggregate_clusters(raw.values, labels, n_clusters)
    filled, flags = interpolate_missing(values, observed)
    train_end, val_end = split_bounds(filled.shape[0])
    normalized, medians = median_normalize(filled, train_end)
    return GridDataset(
        values=normalized.astype(np.float32),
        observed=observed,
        interpolated=flags,
        medians=medians.astype(np.float32),
        centroids=centroids.astype(np.float32),
        train_end=train_end,
        val_end=val_end,
        origin_ms=raw.origin_ms,
        step_ms=raw.step_ms,
    )


def from_arrays(values: np.ndarray, step_ms: int = DEFAULT_STEP_MS,
                origin_ms: int = 0, centroids=None,
                normalize: bool = True) -> GridDataset:
    """Wrap an already-complete [T, N, C] array (synthetic data path)."""
    t_len, n_nodes, n_ch = values.shape
    train_end, val_end = split_bounds(t_len)
    if normalize:
        norm, medians = median_normalize(values.astype(np.float64), train_end)
    else:
        norm = values.astype(np.float64)
        medians = np.ones((n_nodes, n_ch))
    if centroids is None:
        centroids = np.stack([np.arange(n_nodes), np.zeros(n_nodes)], axis=1)
    return GridDataset(
        values=norm.astype(np.float32),
        observed=np.ones(values.shape, dtype=bool),
        interpolated=np.zeros(values.shape, dtype=bool),
        medians=medians.astype(np.float32),
        centroids=np.asarray(centroids, dtype=np.float32),
        train_end=train_end,
        val_end=val_end,
        origin_ms=origin_ms,
        step_ms=step_ms,
    )


# ---- windowing and masks ------------------------------------------------


def window_starts(dataset: GridDataset, split: str, context_len: int,
                  horizon: int, stride: int) -> np.ndarray:
    """Start indices of [context | horizon] windows lying inside one split."""
    lo, hi = dataset.split_range(split)
    span = context_len + horizon
    if hi - lo < span:
        return np.empty(0, dtype=np.int64)
    return np.arange(lo, hi - span + 1, stride, dtype=np.int64)


def gen_mask(shape, rate_low: float, rate_high: float, rng: np.random.Generator,
             block_mode: bool = False, mean_block: int = 6):
    """Observation masks (1 = observed, 0 = hidden) for imputation training.

    The hide rate is drawn uniformly from [rate_low, rate_high] per sample.
    Elementwise mode hides i.i.d. elements; block mode hides contiguous
    time runs (mean length `mean_block`) per node/channel until the target
    fraction is reached.  Returns (mask float32, rates [B]).
    """
    batch, length = shape[0], shape[1]
    rates = rng.uniform(rate_low, rate_high, size=batch)
    if not block_mode:
        u = rng.random(size=shape)
        mask = (u >= rates.reshape((-1,) + (1,) * (len(shape) - 1))).astype(np.float32)
        return mask, rates

    mask = np.ones(shape, dtype=np.float32)
    per_series = mask.reshape(batch, length, -1)
    for b in range(batch):
        target = int(round(rates[b] * length))
        for s in range(per_series.shape[2]):
            hidden = 0
            while hidden < target:
                start = int(rng.integers(length))
                run = 1 + int(rng.poisson(max(mean_block - 1, 0)))
                stop = min(start + run, length)
                seg = per_series[b, start:stop, s]
                hidden += int(seg.sum())  # only newly hidden steps count
                seg[:] = 0.0
    return mask, rates


# ---- binary cache --------------------------------------------------------


def _pack_bits(flags: np.ndarray) -> bytes:
    return np.packbits(flags.reshape(-1).astype(np.uint8), bitorder="little").tobytes()


def _unpack_bits(buf: bytes, count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    return bits[:count].astype(bool)


def save_cache(path, ds: GridDataset) -> None:
    """Write the documented binary layout; deterministic bytes for equal data."""
    t_len, n_nodes, n_ch = ds.values.shape
    header = CACHE_MAGIC + struct.pack(
        "<IQQQQQQQ", CACHE_VERSION, t_len, n_nodes, n_ch,
        ds.train_end, ds.val_end, ds.origin_ms, ds.step_ms)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(ds.values.astype("<f4").tobytes())
        fh.write(ds.medians.astype("<f4").tobytes())
        fh.write(ds.centroids.astype("<f4").tobytes())
        fh.write(_pack_bits(ds.observed))
        fh.write(_pack_bits(ds.interpolated))


class CacheFormatError(ValueError):
    pass


def load_cache(path) -> GridDataset:
    with open(path, "rb") as fh:
        blob = fh.read()

    def take(offset, size, what):
        if offset + size > len(blob):
            raise CacheFormatError(
                f"truncated cache {path}: need {size} bytes for {what} at "
                f"offset {offset}, file has {len(blob)}")
        return blob[offset:offset + size], offset + size

    raw, off = take(0, 8, "header")
    if raw[:4] != CACHE_MAGIC:
        raise CacheFormatError(f"bad magic in {path}: {raw[:4]!r}")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != CACHE_VERSION:
        raise CacheFormatError(f"unsupported cache version {version} in {path}")
    raw, off = take(off, 8 * 7, "shape header")
    t_len, n_nodes, n_ch, train_end, val_end, origin_ms, step_ms = struct.unpack("<QQQQQQQ", raw)

    count = t_len * n_nodes * n_ch
    raw, off = take(off, 4 * count, "values")
    values = np.frombuffer(raw, dtype="<f4").reshape(t_len, n_nodes, n_ch).copy()
    raw, off = take(off, 4 * n_nodes * n_ch, "medians")
    medians = np.frombuffer(raw, dtype="<f4").reshape(n_nodes, n_ch).copy()
    raw, off = take(off, 4 * n_nodes * 2, "centroids")
    centroids = np.frombuffer(raw, dtype="<f4").reshape(n_nodes, 2).copy()
    bitmap_len = (count + 7) // 8
    raw, off = take(off, bitmap_len, "observed bitmap")
    observed = _unpack_bits(raw, count).reshape(t_len, n_nodes, n_ch)
    raw, off = take(off, bitmap_len, "interpolated bitmap")
    interpolated = _unpack_bits(raw, count).reshape(t_len, n_nodes, n_ch)
    if off != len(blob):
        raise CacheFormatError(f"trailing {len(blob) - off} bytes in {path} at offset {off}")
    return GridDataset(values, observed, interpolated, medians, centroids,
                       int(train_end), int(val_end), int(origin_ms), int(step_ms))
