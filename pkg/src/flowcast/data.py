"""Time-series panels: ingestion, imputation, scaling, windowing, synthesis.

A panel is a [time x node x feature] float64 block on a strict 5-minute grid
with a boolean missing mask (True = missing). Masked entries hold NaN and are
excluded from every statistic. Node order always matches the canonical
(sensor_id-sorted) graph order.
"""

from __future__ import annotations

import csv
import json
import math
import struct
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, NumericalError
from .graph import SensorMeta

FEATURES = ("speed", "flow")
TICK = np.timedelta64(300, "s")
TICKS_PER_DAY = 288

IMPUTE_METHODS = ("temporal_mean", "temporal_median", "linear_interpolation")


@dataclass
class TimeSeriesPanel:
    timestamps: np.ndarray  # datetime64[s], uniform 5-minute spacing
    node_ids: list[str]
    values: np.ndarray  # [T, N, F]
    mask: np.ndarray  # [T, N, F], True = missing
    feature_names: tuple[str, ...] = FEATURES

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[s]")
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        t, n, f = len(self.timestamps), len(self.node_ids), len(self.feature_names)
        if self.values.shape != (t, n, f) or self.mask.shape != (t, n, f):
            raise DataError("panel arrays do not match timestamps/nodes/features")
        if t > 1:
            gaps = np.diff(self.timestamps)
            if not (gaps == TICK).all():
                raise DataError("timestamps must be strictly increasing on a 5-minute grid")

    @property
    def n_ticks(self) -> int:
        return len(self.timestamps)

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def feature_index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise DataError(f"unknown feature {name!r}") from None

    def tick_slice(self, start: int, stop: int) -> "TimeSeriesPanel":
        return replace(self, timestamps=self.timestamps[start:stop].copy(),
                       values=self.values[start:stop].copy(),
                       mask=self.mask[start:stop].copy())

    def weekday(self) -> np.ndarray:
        """0 = Monday .. 6 = Sunday per tick."""
        days = self.timestamps.astype("datetime64[D]").astype(np.int64)
        return (days + 3) % 7

    def time_of_day_slot(self) -> np.ndarray:
        """Index of the 5-minute slot within the day, 0..287."""
        secs = self.timestamps.astype(np.int64)
        return (secs % 86400) // 300


# ----------------------------------------------------------------------
# long-format CSV: timestamp,sensor_id,speed,flow (empty fields = missing)
# ----------------------------------------------------------------------


def read_timeseries_csv(path) -> TimeSeriesPanel:
    cells: dict[tuple[str, str], tuple[float, float, bool, bool]] = {}
    stamps: set[str] = set()
    nodes: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp", "sensor_id", "speed", "flow"]:
            raise DataError(f"{path}: expected header timestamp,sensor_id,speed,flow")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise DataError(f"{path}: row {lineno}: expected 4 fields")
            ts, sid = row[0].strip(), row[1].strip()
            try:
                np.datetime64(ts)
            except ValueError:
                raise DataError(f"{path}: row {lineno}: bad timestamp {ts!r}") from None
            vals, missing = [], []
            for text in (row[2].strip(), row[3].strip()):
                if text == "":
                    vals.append(math.nan)
                    missing.append(True)
                else:
                    try:
                        vals.append(float(text))
                    except ValueError:
                        raise DataError(f"{path}: row {lineno}: bad value {text!r}") from None
                    missing.append(False)
            if (ts, sid) in cells:
                raise DataError(f"{path}: row {lineno}: duplicate observation for {sid} at {ts}")
            cells[(ts, sid)] = (vals[0], vals[1], missing[0], missing[1])
            stamps.add(ts)
            nodes.add(sid)
    if not cells:
        raise DataError(f"{path}: no observations")
    times = np.array(sorted(stamps), dtype="datetime64[s]")
    lo, hi = times[0], times[-1]
    grid = np.arange(lo, hi + TICK, TICK)
    grid_index = {str(t): i for i, t in enumerate(grid)}
    for ts in stamps:
        if str(np.datetime64(ts).astype("datetime64[s]")) not in grid_index:
            raise DataError(f"{path}: timestamp {ts} is off the 5-minute grid")
    node_ids = sorted(nodes)
    node_index = {s: i for i, s in enumerate(node_ids)}
    t, n = len(grid), len(node_ids)
    values = np.full((t, n, 2), math.nan)
    mask = np.ones((t, n, 2), dtype=bool)
    for (ts, sid), (speed, flow, m_sp, m_fl) in cells.items():
        ti = grid_index[str(np.datetime64(ts).astype("datetime64[s]"))]
        ni = node_index[sid]
        values[ti, ni, 0], values[ti, ni, 1] = speed, flow
        mask[ti, ni, 0], mask[ti, ni, 1] = m_sp, m_fl
    values[mask] = math.nan
    return TimeSeriesPanel(grid, node_ids, values, mask)


def write_timeseries_csv(path, panel: TimeSeriesPanel) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "sensor_id", "speed", "flow"])
        for ti, ts in enumerate(panel.timestamps):
            for ni, sid in enumerate(panel.node_ids):
                row = [str(ts), sid]
                for fi in range(len(panel.feature_names)):
                    row.append("" if panel.mask[ti, ni, fi] else repr(float(panel.values[ti, ni, fi])))
                writer.writerow(row)


# ----------------------------------------------------------------------
# binary container: magic, length-prefixed JSON header, raw payloads
# ----------------------------------------------------------------------

_MAGIC = b"FCBIN1\n"


def write_array_container(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    header = {
        "meta": meta,
        "arrays": [{"name": k, "dtype": str(v.dtype), "shape": list(v.shape)}
                   for k, v in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v).tobytes())


def read_array_container(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise DataError(f"{path}: not a flowcast binary container")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = fh.read(count * dtype.itemsize)
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(entry["shape"]).copy()
    return arrays, header["meta"]


def save_panel(path, panel: TimeSeriesPanel) -> None:
    write_array_container(path, {
        "timestamps": panel.timestamps.astype(np.int64),
        "values": panel.values,
        "mask": panel.mask.astype(np.uint8),
    }, {"node_ids": panel.node_ids, "feature_names": list(panel.feature_names)})


def load_panel(path) -> TimeSeriesPanel:
    arrays, meta = read_array_container(path)
    return TimeSeriesPanel(arrays["timestamps"].astype("datetime64[s]"),
                           list(meta["node_ids"]), arrays["values"],
                           arrays["mask"].astype(bool), tuple(meta["feature_names"]))


# ----------------------------------------------------------------------
# imputation
# ----------------------------------------------------------------------


def impute(panel: TimeSeriesPanel, method: str = "temporal_mean",
           stats_through: int | None = None) -> TimeSeriesPanel:
    """Fill every masked entry; returns a panel with an all-false mask.

    temporal_mean / temporal_median pool observed values in the same
    (time-of-day, weekday-vs-weekend) slot per node and feature; slots with no
    observations fall back to the node's feature mean, then the global feature
    mean. linear_interpolation works along time per node/feature, extending
    edge values outward. stats_through limits the pooling window to ticks
    [0, stats_through) so statistics can be restricted to the training slice.
    """
    if method not in IMPUTE_METHODS:
        raise DataError(f"unknown imputation method {method!r}")
    t, n, f = panel.values.shape
    observed_any = ~panel.mask
    for fi in range(f):
        if not observed_any[:, :, fi].any():
            raise DataError(f"feature entirely missing: {panel.feature_names[fi]}")
    if not panel.mask.any():
        return replace(panel, values=panel.values.copy(), mask=panel.mask.copy())
    stats_stop = t if stats_through is None else int(stats_through)
    pool = np.zeros(t, dtype=bool)
    pool[:stats_stop] = True
    obs = np.where(panel.mask, np.nan, panel.values)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN slices hit the fallbacks
        node_mean = np.nanmean(np.where(pool[:, None, None], obs, np.nan), axis=0)  # [N, F]
        global_mean = np.nanmean(np.where(pool[:, None, None], obs, np.nan), axis=(0, 1))  # [F]
    # a pooling window with no observations falls back to the whole panel
    bad = ~np.isfinite(global_mean)
    if bad.any():
        global_mean[bad] = np.nanmean(obs, axis=(0, 1))[bad]
    fallback = np.where(np.isfinite(node_mean), node_mean, global_mean[None, :])

    filled = panel.values.copy()
    if method == "linear_interpolation":
        ticks = np.arange(t, dtype=np.float64)
        for ni in range(n):
            for fi in range(f):
                miss = panel.mask[:, ni, fi]
                if not miss.any():
                    continue
                known = np.flatnonzero(~miss)
                if known.size == 0:
                    filled[miss, ni, fi] = fallback[ni, fi]
                    continue
                filled[miss, ni, fi] = np.interp(ticks[miss], ticks[known],
                                                 panel.values[known, ni, fi])
    else:
        slot = panel.time_of_day_slot()
        weekend = panel.weekday() >= 5
        stat = np.nanmean if method == "temporal_mean" else np.nanmedian
        missing_tn = panel.mask.any(axis=(1, 2))
        for wknd in (False, True):
            cls = weekend == wknd
            for s in np.unique(slot[cls & missing_tn]):
                sel = cls & (slot == s)
                sample = obs[sel & pool]
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    slot_stat = stat(sample, axis=0) if sample.shape[0] else np.full((n, f), np.nan)
                slot_stat = np.where(np.isfinite(slot_stat), slot_stat, fallback)
                block = filled[sel]
                block_mask = panel.mask[sel]
                block[block_mask] = np.broadcast_to(slot_stat, block.shape)[block_mask]
                filled[sel] = block
    if not np.isfinite(filled).all():
        raise DataError("imputation left non-finite values")
    return replace(panel, values=filled, mask=np.zeros_like(panel.mask))


# ----------------------------------------------------------------------
# chronological split and normalization
# ----------------------------------------------------------------------


def split(panel: TimeSeriesPanel, fractions=(0.7, 0.1, 0.2), min_length: int = 1):
    """Contiguous (train, valid, test) slices; floor rounding, test takes the rest."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("fractions must be three values summing to 1")
    t = panel.n_ticks
    n_train = int(t * fractions[0])
    n_valid = int(t * fractions[1])
    n_test = t - n_train - n_valid
    for name, length in (("train", n_train), ("valid", n_valid), ("test", n_test)):
        if length < min_length:
            raise DataError(f"{name} slice has {length} ticks, fewer than {min_length}")
    return (panel.tick_slice(0, n_train),
            panel.tick_slice(n_train, n_train + n_valid),
            panel.tick_slice(n_train + n_valid, t))


@dataclass(frozen=True)
class FeatureScaler:
    means: np.ndarray
    stds: np.ndarray
    feature_names: tuple[str, ...]


def fit_scaler(panel: TimeSeriesPanel) -> FeatureScaler:
    """Per-feature population moments over the observed entries of this panel."""
    obs = np.where(panel.mask, np.nan, panel.values)
    means = np.nanmean(obs, axis=(0, 1))
    stds = np.sqrt(np.nanmean((obs - means) ** 2, axis=(0, 1)))
    for fi, s in enumerate(stds):
        if not np.isfinite(s) or s <= 0.0:
            raise NumericalError(f"degenerate feature scale: {panel.feature_names[fi]}")
    return FeatureScaler(means, stds, tuple(panel.feature_names))


def transform(panel: TimeSeriesPanel, scaler: FeatureScaler) -> TimeSeriesPanel:
    z = (panel.values - scaler.means) / scaler.stds
    return replace(panel, values=z, mask=panel.mask.copy())


def transform_values(values: np.ndarray, scaler: FeatureScaler, features=None) -> np.ndarray:
    idx = _feature_indices(scaler.feature_names, features)
    return (values - scaler.means[idx]) / scaler.stds[idx]


def inverse_transform(values: np.ndarray, scaler: FeatureScaler, features=None) -> np.ndarray:
    """Map normalized values (trailing feature axis) back to original units."""
    idx = _feature_indices(scaler.feature_names, features)
    return values * scaler.stds[idx] + scaler.means[idx]


def _feature_indices(names: tuple[str, ...], features) -> np.ndarray:
    if features is None:
        return np.arange(len(names))
    out = []
    for f in features:
        if f not in names:
            raise DataError(f"unknown feature {f!r}")
        out.append(names.index(f))
    return np.asarray(out, dtype=np.int64)


# ----------------------------------------------------------------------
# windowing
# ----------------------------------------------------------------------


@dataclass
class WindowedDataset:
    x: np.ndarray  # [samples, lookback, nodes, P]
    y: np.ndarray  # [samples, horizon, nodes, Q]
    starts: np.ndarray
    input_features: tuple[str, ...]
    output_features: tuple[str, ...]

    @property
    def n_samples(self) -> int:
        return int(self.x.shape[0])


def make_windows(panel: TimeSeriesPanel, lookback: int = 12, horizon: int = 12,
                 stride: int = 1, input_features=None, output_features=None) -> WindowedDataset:
    """Sliding (lookback, horizon) windows; sample i covers ticks [i, i+lookback+horizon)."""
    if panel.mask.any():
        raise DataError("panel still has missing entries; impute before windowing")
    span = lookback + horizon
    if panel.n_ticks < span:
        raise DataError(f"panel has {panel.n_ticks} ticks, need at least {span}")
    in_names = tuple(input_features) if input_features else tuple(panel.feature_names)
    out_names = tuple(output_features) if output_features else tuple(panel.feature_names)
    in_idx = _feature_indices(tuple(panel.feature_names), in_names)
    out_idx = _feature_indices(tuple(panel.feature_names), out_names)
    starts = np.arange(0, panel.n_ticks - span + 1, stride, dtype=np.int64)
    x = np.stack([panel.values[s:s + lookback][:, :, in_idx] for s in starts])
    y = np.stack([panel.values[s + lookback:s + span][:, :, out_idx] for s in starts])
    return WindowedDataset(x, y, starts, in_names, out_names)


def save_windows(path, ds: WindowedDataset) -> None:
    write_array_container(path, {"x": ds.x, "y": ds.y, "starts": ds.starts},
                     {"input_features": list(ds.input_features),
                      "output_features": list(ds.output_features)})


def load_windows(path) -> WindowedDataset:
    arrays, meta = read_array_container(path)
    return WindowedDataset(arrays["x"], arrays["y"], arrays["starts"],
                           tuple(meta["input_features"]), tuple(meta["output_features"]))


def slice_for_partition(panel: TimeSeriesPanel, bundle) -> TimeSeriesPanel:
    """Panel columns reordered to the bundle's local node order (halos included)."""
    index = {s: i for i, s in enumerate(panel.node_ids)}
    cols = []
    for sid in bundle.graph.sensor_ids:
        if sid not in index:
            raise DataError(f"panel is missing node {sid}")
        cols.append(index[sid])
    cols = np.asarray(cols, dtype=np.int64)
    return replace(panel, node_ids=list(bundle.graph.sensor_ids),
                   values=panel.values[:, cols].copy(), mask=panel.mask[:, cols].copy())


# ----------------------------------------------------------------------
# synthetic corridor traffic
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticScenario:
    """Clustered highway corridors driven by a triangular flow-density relation."""

    n_nodes: int = 24
    days: int = 14
    clusters: int = 1
    congestion_windows: tuple = ((7.0, 9.0), (16.0, 18.0))
    noise: float = 0.05
    seed: int = 0
    start: str = "2024-01-01"  # a Monday
    free_flow_mph: float = 65.0
    jam_density_vpm: float = 200.0
    wave_speed_mph: float = 15.0
    base_density_ratio: float = 0.35
    peak_density_ratio: float = 2.5
    ramp_minutes: int = 30
    node_spacing_deg: float = 0.006
    cluster_spacing_deg: float = 0.9
    lag_ticks_per_node: float = 0.5

    @property
    def critical_density(self) -> float:
        return self.wave_speed_mph * self.jam_density_vpm / (self.free_flow_mph + self.wave_speed_mph)

    @property
    def critical_flow_per_tick(self) -> float:
        return self.free_flow_mph * self.critical_density / 12.0

    def congested_flow_for_speed(self, speed) -> np.ndarray:
        """Flow (veh/5min) on the congested branch at the given speed (mph)."""
        speed = np.asarray(speed, dtype=np.float64)
        return self.wave_speed_mph * self.jam_density_vpm * speed / (speed + self.wave_speed_mph) / 12.0

    def node_lag_ticks(self) -> np.ndarray:
        per_cluster = _cluster_sizes(self.n_nodes, self.clusters)
        lags = []
        for size in per_cluster:
            lags.extend(int(round(i * self.lag_ticks_per_node)) for i in range(size))
        return np.asarray(lags, dtype=np.int64)


def _cluster_sizes(n_nodes: int, clusters: int) -> list[int]:
    base = n_nodes // clusters
    sizes = [base + (1 if c < n_nodes % clusters else 0) for c in range(clusters)]
    return sizes


_DISTRICTS = ("D7", "D4", "D3", "D8", "D10", "D11", "D12", "D5", "D6")
_SENSOR_TYPES = ("loop", "radar", "magnetometer")


def generate_synthetic(scenario: SyntheticScenario) -> tuple[list[SensorMeta], TimeSeriesPanel]:
    """Deterministic synthetic corridor: speed plateaus at free flow, dips in
    congestion windows (weekdays only), and flow follows the triangular
    relation, so congested ticks pair low speed with low-to-mid flow."""
    sc = scenario
    if sc.n_nodes < 1 or sc.days < 1 or sc.clusters < 1 or sc.clusters > sc.n_nodes:
        raise DataError("invalid synthetic scenario dimensions")
    rng = np.random.default_rng(sc.seed)
    sizes = _cluster_sizes(sc.n_nodes, sc.clusters)
    meta = []
    node = 0
    for c, size in enumerate(sizes):
        lat0 = 37.0 + sc.cluster_spacing_deg * c
        for i in range(size):
            meta.append(SensorMeta(
                sensor_id=f"S{node:04d}",
                latitude=lat0,
                longitude=-122.0 + sc.node_spacing_deg * i,
                district=_DISTRICTS[c % len(_DISTRICTS)],
                sensor_type=_SENSOR_TYPES[node % len(_SENSOR_TYPES)],
                lane_type="hov" if node % 5 == 4 else "mainline",
            ))
            node += 1

    t_total = sc.days * TICKS_PER_DAY
    start = np.datetime64(sc.start, "s")
    timestamps = start + np.arange(t_total) * TICK
    days = timestamps.astype("datetime64[D]").astype(np.int64)
    weekday = (days + 3) % 7
    tod = (timestamps.astype(np.int64) % 86400) // 300

    k_c = sc.critical_density
    ramp_ticks = max(1, sc.ramp_minutes // 5)
    hours = tod / 12.0
    base = k_c * sc.base_density_ratio * (0.75 + 0.5 * np.sin(2.0 * math.pi * (hours - 15.0) / 24.0))
    lags = sc.node_lag_ticks()
    shape = np.zeros((t_total, sc.n_nodes))
    for ws_h, we_h in sc.congestion_windows:
        ws, we = int(round(ws_h * 12)), int(round(we_h * 12))
        for ni in range(sc.n_nodes):
            local = tod - lags[ni]
            s = _window_shape(local, ws, we, ramp_ticks)
            s[weekday >= 5] = 0.0
            shape[:, ni] = np.maximum(shape[:, ni], s)
    density = base[:, None] + (sc.peak_density_ratio * k_c - base[:, None]) * shape

    congested = density > k_c
    speed = np.where(congested, sc.wave_speed_mph * (sc.jam_density_vpm - density)
                     / np.maximum(density, 1e-9), sc.free_flow_mph)
    flow = np.where(congested, sc.wave_speed_mph * (sc.jam_density_vpm - density),
                    sc.free_flow_mph * density) / 12.0
    if sc.noise > 0:
        speed = speed + rng.normal(0.0, sc.noise * sc.free_flow_mph, speed.shape)
        flow = flow + rng.normal(0.0, sc.noise * sc.critical_flow_per_tick, flow.shape)
        speed = np.maximum(speed, 1.0)
        flow = np.maximum(flow, 0.0)

    values = np.stack([speed, flow], axis=-1)
    mask = np.zeros_like(values, dtype=bool)
    return meta, TimeSeriesPanel(timestamps, [m.sensor_id for m in meta], values, mask)


def _window_shape(local_tod: np.ndarray, ws: int, we: int, ramp: int) -> np.ndarray:
    x = local_tod.astype(np.float64)
    up = np.clip((x - ws) / ramp, 0.0, 1.0)
    down = np.clip((we - x) / ramp, 0.0, 1.0)
    inside = (x >= ws) & (x <= we)
    s = np.minimum(up, down)
    s = 0.5 - 0.5 * np.cos(math.pi * s)  # raised-cosine edges
    return np.where(inside, s, 0.0)


def congested_core_ticks(scenario: SyntheticScenario, panel: TimeSeriesPanel) -> np.ndarray:
    """Ticks where every node sits at full peak density (past ramps and lags)."""
    sc = scenario
    ramp_ticks = max(1, sc.ramp_minutes // 5)
    max_lag = int(sc.node_lag_ticks().max()) if sc.n_nodes else 0
    tod = panel.time_of_day_slot()
    weekday = panel.weekday()
    core = np.zeros(panel.n_ticks, dtype=bool)
    for ws_h, we_h in sc.congestion_windows:
        ws, we = int(round(ws_h * 12)), int(round(we_h * 12))
        core |= (tod >= ws + ramp_ticks + max_lag) & (tod <= we - ramp_ticks)
    core &= weekday < 5
    return core
