"""Per-partition training, multi-partition orchestration, and inference.

Each partition trains an independent encoder-decoder on its own normalized
windows: shuffled minibatches, scheduled-sampling decoding, MAE (joint MAE
when two outputs are present), global-norm clipping, Adam, stepwise learning
rate decay, and early stopping on validation MAE. Partitions share nothing,
so parallel and sequential orchestration produce identical results.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tape, grads_for
from .data import (FeatureScaler, TimeSeriesPanel, WindowedDataset, fit_scaler,
                   inverse_transform, make_windows, read_array_container,
                   slice_for_partition, transform, transform_values,
                   write_array_container)
from .errors import ConfigError, DataError, FlowcastError, NumericalError
from .model import (DcgruParams, DiffusionSupports, Seq2SeqConfig, build_supports,
                    init_params, predict, seq2seq_loss)
from .optim import AdamState, adam_step, clip_by_global_norm
from .partition import SubgraphBundle
from .sparse import CsrMatrix

MODES = ("speed_only", "flow_only", "multioutput")


def mode_features(mode: str) -> tuple[tuple[str, ...], tuple[str, ...]]:
    if mode == "speed_only":
        return ("speed",), ("speed",)
    if mode == "flow_only":
        return ("flow",), ("flow",)
    if mode == "multioutput":
        return ("speed", "flow"), ("speed", "flow")
    raise ConfigError(f"unknown mode {mode!r}")


def scheduled_sampling_epsilon(iteration: int, tau: float) -> float:
    """Inverse-sigmoid decay tau / (tau + exp(i / tau)); starts at tau/(tau+1)."""
    x = iteration / tau
    if x > 300.0:
        # exp(x) would swamp tau (or overflow); identical value in float64
        try:
            return tau * math.exp(-x)
        except OverflowError:
            return 0.0
    return tau / (tau + math.exp(x))


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 64
    diffusion_steps: int = 2
    layers: int = 2
    units: int = 16
    max_grad_norm: float = 5.0
    learning_rate: float = 0.01
    lr_decay: float = 0.1
    lr_milestones: tuple[int, ...] | None = None
    epochs: int = 30
    patience: int = 10
    sampling_tau: float = 40.0
    seed: int = 0
    filter_type: str = "random_walk"

    def __post_init__(self):
        positives = {"batch_size": self.batch_size, "diffusion_steps": self.diffusion_steps,
                     "layers": self.layers, "units": self.units,
                     "max_grad_norm": self.max_grad_norm,
                     "lr_decay": self.lr_decay, "epochs": self.epochs,
                     "patience": self.patience, "sampling_tau": self.sampling_tau}
        for name, value in positives.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative")
        if self.lr_milestones is not None:
            ms = tuple(self.lr_milestones)
            if any(b <= a for a, b in zip(ms, ms[1:])):
                raise ConfigError("lr_milestones must be strictly increasing")

    def resolved_milestones(self) -> tuple[int, ...]:
        if self.lr_milestones is not None:
            return tuple(self.lr_milestones)
        ms = sorted({int(self.epochs * 0.6), int(self.epochs * 0.8)})
        return tuple(m for m in ms if m > 0)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_loss: float
    lr: float
    epsilon: float
    seconds: float


@dataclass
class TrainReport:
    part_id: int
    epochs: list[EpochStats] = field(default_factory=list)
    initial_valid: float = math.inf  # untrained-model validation MAE (epoch-0 baseline)
    best_epoch: int = -1
    best_valid: float = math.inf
    wall_seconds: float = 0.0
    node_mae: np.ndarray | None = None  # filled by evaluate() when test data exists

    @property
    def train_curve(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    @property
    def valid_curve(self) -> list[float]:
        return [e.valid_loss for e in self.epochs]


@dataclass
class Checkpoint:
    """Everything needed for standalone inference on one partition."""

    config: Seq2SeqConfig
    param_names: list[str]
    param_values: list[np.ndarray]
    scaler: FeatureScaler
    sensor_ids: list[str]
    halo_flags: np.ndarray
    supports: list[CsrMatrix]
    input_features: tuple[str, ...]
    output_features: tuple[str, ...]
    part_id: int = 0
    trained_iterations: int = 0

    def build_model(self) -> tuple[DcgruParams, DiffusionSupports]:
        params = init_params(self.config, seed=0)
        names = [n for n, _ in params.named()]
        if names != list(self.param_names):
            raise DataError("checkpoint parameter names do not match configuration")
        params.load_values(self.param_values)
        return params, DiffusionSupports(self.supports, self.config.max_diffusion_steps)

    # ------------------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "format": "flowcast-checkpoint-v1",
            "config": self.config.__dict__,
            "param_names": self.param_names,
            "scaler": {"means": list(self.scaler.means), "stds": list(self.scaler.stds),
                       "feature_names": list(self.scaler.feature_names)},
            "sensor_ids": self.sensor_ids,
            "input_features": list(self.input_features),
            "output_features": list(self.output_features),
            "part_id": self.part_id,
            "trained_iterations": self.trained_iterations,
            "n_supports": len(self.supports),
        }
        arrays = {"halo_flags": self.halo_flags.astype(np.uint8)}
        for i, p in enumerate(self.param_values):
            arrays[f"p{i:04d}"] = p
        for i, s in enumerate(self.supports):
            arrays[f"s{i}_indptr"] = s.indptr
            arrays[f"s{i}_indices"] = s.indices
            arrays[f"s{i}_data"] = s.data
            arrays[f"s{i}_shape"] = np.array([s.rows, s.cols], dtype=np.int64)
        write_array_container(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, meta = read_array_container(path)
        if meta.get("format") != "flowcast-checkpoint-v1":
            raise DataError(f"{path}: not a flowcast checkpoint")
        params = [arrays[f"p{i:04d}"] for i in range(len(meta["param_names"]))]
        supports = []
        for i in range(meta["n_supports"]):
            rows, cols = arrays[f"s{i}_shape"]
            supports.append(CsrMatrix(int(rows), int(cols), arrays[f"s{i}_indptr"],
                                      arrays[f"s{i}_indices"], arrays[f"s{i}_data"]))
        halo = arrays["halo_flags"].astype(bool)
        scaler = FeatureScaler(np.asarray(meta["scaler"]["means"]),
                               np.asarray(meta["scaler"]["stds"]),
                               tuple(meta["scaler"]["feature_names"]))
        return cls(Seq2SeqConfig(**meta["config"]), list(meta["param_names"]), params,
                   scaler, list(meta["sensor_ids"]), halo, supports,
                   tuple(meta["input_features"]), tuple(meta["output_features"]),
                   int(meta["part_id"]), int(meta["trained_iterations"]))


# ----------------------------------------------------------------------
# single-partition training
# ----------------------------------------------------------------------


def _batched_loss(params, supports, windows: WindowedDataset, batch_size: int) -> float:
    """Dataset MAE under inference-style decoding (epsilon = 0)."""
    total, count = 0.0, 0
    multi = windows.y.shape[-1] == 2
    for lo in range(0, windows.n_samples, batch_size):
        hi = min(lo + batch_size, windows.n_samples)
        tape = Tape()
        loss, _ = seq2seq_loss(tape, params, supports, windows.x[lo:hi], windows.y[lo:hi],
                               epsilon=0.0, multioutput=multi)
        total += float(loss.value) * (hi - lo)
        count += hi - lo
    return total / count


def train_partition(bundle: SubgraphBundle, train_windows: WindowedDataset,
                    valid_windows: WindowedDataset, scaler: FeatureScaler,
                    config: TrainingConfig) -> tuple[Checkpoint, TrainReport]:
    """Train one partition on pre-normalized windows; returns the best-validation
    checkpoint and the per-epoch report."""
    x, y = train_windows.x, train_windows.y
    if x.shape[2] != bundle.n_local or valid_windows.x.shape[2] != bundle.n_local:
        raise DataError("windows do not match the bundle's node count")
    model_cfg = Seq2SeqConfig(
        input_dim=x.shape[3], output_dim=y.shape[3], lookback=x.shape[1],
        horizon=y.shape[1], layers=config.layers, units=config.units,
        max_diffusion_steps=config.diffusion_steps, filter_type=config.filter_type,
    )
    supports = build_supports(bundle.graph, config.filter_type, config.diffusion_steps)
    seq = np.random.SeedSequence(config.seed)
    init_rng, loop_rng = (np.random.default_rng(child) for child in seq.spawn(2))
    params = init_params(model_cfg, init_rng)
    state = AdamState.for_params(params.values())
    multi = model_cfg.output_dim == 2
    milestones = config.resolved_milestones()

    report = TrainReport(part_id=bundle.part_id)
    best_values: list[np.ndarray] | None = None
    best_iteration = 0
    since_best = 0
    lr = config.learning_rate
    iteration = 0
    start_wall = time.perf_counter()
    report.initial_valid = _batched_loss(params, supports, valid_windows, config.batch_size)
    for epoch in range(config.epochs):
        if epoch in milestones:
            lr *= config.lr_decay
        t0 = time.perf_counter()
        epsilon_epoch = scheduled_sampling_epsilon(iteration, config.sampling_tau)
        perm = loop_rng.permutation(train_windows.n_samples)
        losses = []
        for lo in range(0, perm.size, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            epsilon = scheduled_sampling_epsilon(iteration, config.sampling_tau)
            tape = Tape()
            loss, _ = seq2seq_loss(tape, params, supports, x[idx], y[idx],
                                   epsilon=epsilon, rng=loop_rng, multioutput=multi)
            if not np.isfinite(loss.value):
                raise NumericalError(
                    f"partition {bundle.part_id}: non-finite loss at epoch {epoch}, "
                    f"iteration {iteration}")
            grads = grads_for(tape.backward(loss), params.tensors())
            grads = clip_by_global_norm(grads, config.max_grad_norm)
            adam_step(params.values(), grads, state, lr)
            iteration += 1
            losses.append(float(loss.value))
        valid_loss = _batched_loss(params, supports, valid_windows, config.batch_size)
        report.epochs.append(EpochStats(epoch, float(np.mean(losses)), valid_loss,
                                        lr, epsilon_epoch, time.perf_counter() - t0))
        if valid_loss < report.best_valid:
            report.best_valid = valid_loss
            report.best_epoch = epoch
            best_values = [v.copy() for v in params.values()]
            best_iteration = iteration
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    report.wall_seconds = time.perf_counter() - start_wall
    if best_values is None:  # zero epochs requested
        best_values = [v.copy() for v in params.values()]
    checkpoint = Checkpoint(
        config=model_cfg,
        param_names=[n for n, _ in params.named()],
        param_values=best_values,
        scaler=scaler,
        sensor_ids=list(bundle.graph.sensor_ids),
        halo_flags=bundle.halo_flags.copy(),
        supports=supports.matrices,
        input_features=train_windows.input_features,
        output_features=train_windows.output_features,
        part_id=bundle.part_id,
        trained_iterations=best_iteration,
    )
    return checkpoint, report


# ----------------------------------------------------------------------
# orchestration
# ----------------------------------------------------------------------


@dataclass
class PartitionResult:
    part_id: int
    checkpoint: Checkpoint | None = None
    report: TrainReport | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def prepare_partition_windows(bundle: SubgraphBundle, train_panel: TimeSeriesPanel,
                              valid_panel: TimeSeriesPanel, mode: str,
                              lookback: int, horizon: int):
    """Slice, fit the scaler on the bundle's training slice only, normalize, window."""
    in_f, out_f = mode_features(mode)
    local_train = slice_for_partition(train_panel, bundle)
    local_valid = slice_for_partition(valid_panel, bundle)
    scaler = fit_scaler(local_train)
    train_w = make_windows(transform(local_train, scaler), lookback, horizon,
                           input_features=in_f, output_features=out_f)
    valid_w = make_windows(transform(local_valid, scaler), lookback, horizon,
                           input_features=in_f, output_features=out_f)
    return train_w, valid_w, scaler


def _train_task(args) -> PartitionResult:
    bundle, train_panel, valid_panel, config, mode, lookback, horizon = args
    try:
        part_config = replace(config, seed=config.seed + bundle.part_id)
        train_w, valid_w, scaler = prepare_partition_windows(
            bundle, train_panel, valid_panel, mode, lookback, horizon)
        checkpoint, report = train_partition(bundle, train_w, valid_w, scaler, part_config)
        return PartitionResult(bundle.part_id, checkpoint, report)
    except FlowcastError as exc:
        return PartitionResult(bundle.part_id, error=str(exc))


def train_all(bundles: list[SubgraphBundle], train_panel: TimeSeriesPanel,
              valid_panel: TimeSeriesPanel, config: TrainingConfig,
              mode: str = "speed_only", lookback: int = 12, horizon: int = 12,
              workers: int = 1) -> list[PartitionResult]:
    """Train every partition independently; workers > 1 runs them in processes.

    Results are deterministic and identical across worker counts because each
    partition's work is a pure function of its own inputs and derived seed.
    """
    tasks = [(b, train_panel, valid_panel, config, mode, lookback, horizon)
             for b in bundles]
    if workers <= 1 or len(bundles) <= 1:
        return [_train_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_task, tasks))


def aggregate_training_summary(results: list[PartitionResult]) -> dict:
    """Max wall time across partitions is the headline training-time metric."""
    ok = [r for r in results if r.ok]
    return {
        "partitions": len(results),
        "trained": len(ok),
        "failed": [{"part": r.part_id, "error": r.error} for r in results if not r.ok],
        "max_wall_seconds": max((r.report.wall_seconds for r in ok), default=0.0),
        "best_valid_mae": {r.part_id: r.report.best_valid for r in ok},
    }


def write_report_csv(path, results: list[PartitionResult]) -> None:
    import csv as _csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["partition", "epoch", "train_loss", "valid_loss", "lr",
                         "epsilon", "seconds"])
        for r in results:
            if not r.ok:
                continue
            for e in r.report.epochs:
                writer.writerow([r.part_id, e.epoch, repr(e.train_loss), repr(e.valid_loss),
                                 repr(e.lr), repr(e.epsilon), repr(e.seconds)])


def write_training_summary(path, results: list[PartitionResult]) -> None:
    Path(path).write_text(json.dumps(aggregate_training_summary(results), sort_keys=True,
                                     indent=2), encoding="utf-8")


# ----------------------------------------------------------------------
# inference
# ----------------------------------------------------------------------


def forecast(checkpoint: Checkpoint, window: np.ndarray) -> np.ndarray:
    """[lookback, nodes, P] in original units -> [horizon, nodes, Q] in original units."""
    cfg = checkpoint.config
    window = np.asarray(window, dtype=np.float64)
    expected = (cfg.lookback, len(checkpoint.sensor_ids), cfg.input_dim)
    if window.shape != expected:
        raise DataError(f"window shape {window.shape} does not match checkpoint {expected}")
    params, supports = checkpoint.build_model()
    z = transform_values(window, checkpoint.scaler, checkpoint.input_features)
    pred = predict(params, supports, z[None])[0]
    return inverse_transform(pred, checkpoint.scaler, checkpoint.output_features)


@dataclass
class EvalResult:
    node_ids: list[str]  # non-halo nodes only
    output_features: tuple[str, ...]
    mae: np.ndarray  # [nodes, Q], original units, averaged over samples and steps
    horizon_mae: dict[int, np.ndarray]  # minutes -> [nodes, Q]

    def overall(self) -> np.ndarray:
        return self.mae.mean(axis=0)


def evaluate(checkpoint: Checkpoint, test_windows: WindowedDataset,
             bundle: SubgraphBundle, batch_size: int = 256) -> EvalResult:
    """Per-node MAE on held-out windows (original units), halo nodes excluded."""
    if list(bundle.graph.sensor_ids) != list(checkpoint.sensor_ids):
        raise DataError("bundle nodes do not match checkpoint nodes")
    params, supports = checkpoint.build_model()
    x, y = test_windows.x, test_windows.y
    abs_err_sum = np.zeros((y.shape[1], y.shape[2], y.shape[3]))
    for lo in range(0, x.shape[0], batch_size):
        hi = min(lo + batch_size, x.shape[0])
        z = transform_values(x[lo:hi], checkpoint.scaler, checkpoint.input_features)
        pred = predict(params, supports, z)
        pred = inverse_transform(pred, checkpoint.scaler, checkpoint.output_features)
        abs_err_sum += np.abs(pred - y[lo:hi]).sum(axis=0)
    n_samples = x.shape[0]
    keep = ~bundle.halo_flags
    horizon_mae = {}
    for minutes in (15, 30, 60):
        steps = minutes // 5
        if steps <= y.shape[1]:
            horizon_mae[minutes] = (abs_err_sum[:steps].sum(axis=0)
                                    / (n_samples * steps))[keep]
    mae = (abs_err_sum.sum(axis=0) / (n_samples * y.shape[1]))[keep]
    node_ids = [sid for sid, h in zip(checkpoint.sensor_ids, bundle.halo_flags) if not h]
    return EvalResult(node_ids, checkpoint.output_features, mae, horizon_mae)
