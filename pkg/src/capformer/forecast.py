"""Rolling multi-cycle capacity forecasts, MAE/RMSE, and report files."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .datapipe import FeatureVector, NormStats
from .errors import ContractError, DataError
from .model import ModelParams, predict_next_capacity

REPORT_COLUMNS = ("cell_id", "cycle_index", "true_ah", "pred_ah", "abs_err")
METRICS_COLUMNS = ("cell_id", "mae", "rmse", "horizon")

# A predictor maps a (window, n_features) normalized array to a normalized capacity.
Predictor = Union[ModelParams, Callable[[np.ndarray], float]]


def _predict_fn(model: Predictor) -> Callable[[np.ndarray], float]:
    if isinstance(model, ModelParams):
        return lambda window: predict_next_capacity(window, model)
    if callable(model):
        return model
    raise ContractError(f"not a predictor: {type(model).__name__}")


def _as_array(v) -> np.ndarray:
    return np.asarray(getattr(v, "values", v), dtype=np.float64)


def rolling_forecast(
    model: Predictor,
    seed_window,
    future_profiles: Sequence,
    horizon: int,
    stats: NormStats | None = None,
    feedback: bool = True,
    true_capacities: Sequence[float] | None = None,
) -> np.ndarray:
    """Predict ``horizon`` future capacities, feeding each prediction back.

    ``seed_window`` holds the last ``window`` normalized feature vectors with
    measured capacities. ``future_profiles`` holds the normalized measured
    profiles of the following cycles (any trailing capacity entry is ignored).
    Step ``k`` predicts cycle ``k``'s capacity, then builds that cycle's vector
    from its measured profile plus the predicted capacity and slides the
    window. With ``feedback=False`` the normalized ``true_capacities`` are
    inserted instead (diagnostics only). Outputs are de-normalized when
    ``stats`` is given.
    """
    predict = _predict_fn(model)
    window = np.array([_as_array(v) for v in seed_window])
    if window.ndim != 2:
        raise ContractError("rolling_forecast: seed window must be a stack of vectors")
    q = window.shape[1]
    if horizon < 1:
        raise ContractError(f"rolling_forecast: horizon must be >= 1, got {horizon}")
    if len(future_profiles) < horizon:
        raise ContractError(f"rolling_forecast: horizon {horizon} exceeds the "
                            f"{len(future_profiles)} future profiles provided")
    if not feedback and (true_capacities is None or len(true_capacities) < horizon):
        raise ContractError("rolling_forecast: feedback=False needs true capacities")
    preds = np.empty(horizon)
    for k in range(horizon):
        preds[k] = predict(window)
        profile = _as_array(future_profiles[k])
        if profile.shape[0] not in (q - 1, q):
            raise ContractError(f"future profile {k} has {profile.shape[0]} entries, "
                                f"expected {q - 1}")
        nxt = np.empty(q)
        nxt[:q - 1] = profile[:q - 1]
        nxt[q - 1] = preds[k] if feedback else true_capacities[k]
        window = np.vstack([window[1:], nxt])
    return stats.denormalize_capacity(preds) if stats is not None else preds


def metrics(y: Sequence[float], y_hat: Sequence[float]) -> tuple[float, float]:
    """Mean absolute error and root mean square error."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 1 or y.size == 0:
        raise ContractError(f"metrics: need equal non-empty 1-D inputs, got "
                            f"{y.shape} and {y_hat.shape}")
    err = np.abs(y - y_hat)
    mae = float(np.mean(err))
    top = float(err.max())
    if top == 0.0:
        return mae, 0.0
    # scale before squaring so tiny errors do not underflow
    rmse = top * math.sqrt(float(np.mean((err / top) ** 2)))
    return mae, rmse


@dataclass
class ForecastReport:
    cell_id: str
    cycle_index: np.ndarray
    true_capacity: np.ndarray
    predicted: np.ndarray
    mae: float
    rmse: float

    @property
    def horizon(self) -> int:
        return len(self.cycle_index)

    @property
    def abs_error(self) -> np.ndarray:
        return np.abs(self.true_capacity - self.predicted)

    @classmethod
    def from_predictions(cls, cell_id: str, cycles, y, y_hat) -> ForecastReport:
        mae, rmse = metrics(y, y_hat)
        return cls(cell_id, np.asarray(cycles), np.asarray(y, dtype=np.float64),
                   np.asarray(y_hat, dtype=np.float64), mae, rmse)

    def rows(self):
        for c, y, p, e in zip(self.cycle_index, self.true_capacity, self.predicted,
                              self.abs_error):
            yield self.cell_id, int(c), float(y), float(p), float(e)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(REPORT_COLUMNS)
            for cell, c, y, p, e in self.rows():
                writer.writerow((cell, c, repr(y), repr(p), repr(e)))


def write_metrics(reports: Sequence[ForecastReport], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for r in reports:
            writer.writerow((r.cell_id, repr(r.mae), repr(r.rmse), r.horizon))


def _split(cells: Mapping[str, Sequence[FeatureVector]], target_cell: str, window: int,
           holdout_last: int):
    if target_cell not in cells:
        raise DataError(f"target cell {target_cell!r} not found; available: {sorted(cells)}")
    seq = cells[target_cell]
    n = len(seq)
    if holdout_last < 1 or n < window + holdout_last:
        raise DataError(f"cell {target_cell}: {n} cycles cannot seed a window of {window} "
                        f"before a holdout of {holdout_last}")
    origin = n - holdout_last
    return seq[origin - window:origin], seq[origin:]


def evaluate(
    model: Predictor,
    cells: Mapping[str, Sequence[FeatureVector]],
    target_cell: str,
    stats: NormStats,
    holdout_last: int = 60,
    window: int | None = None,
) -> ForecastReport:
    """Rolling forecast over the final ``holdout_last`` cycles of ``target_cell``.

    ``cells`` holds downsampled vectors in physical units; ``stats`` are the
    training normalization statistics stored with the model.
    """
    if stats is None:
        raise ContractError("evaluate: normalization statistics are required")
    if window is None:
        if not isinstance(model, ModelParams):
            raise ContractError("evaluate: window length is required for callable predictors")
        window = model.config.window
    seed, future = _split(cells, target_cell, window, holdout_last)
    seed_n = [stats.apply(v.values) for v in seed]
    future_n = [stats.apply(v.values) for v in future]
    preds = rolling_forecast(model, seed_n, future_n, holdout_last, stats)
    return ForecastReport.from_predictions(
        target_cell, [v.cycle_index for v in future], [v.capacity for v in future], preds)


def naive_forecast(cells: Mapping[str, Sequence[FeatureVector]], target_cell: str,
                   holdout_last: int = 60, window: int = 16) -> ForecastReport:
    """Last known capacity carried forward over the holdout."""
    seed, future = _split(cells, target_cell, window, holdout_last)
    last = seed[-1].capacity
    return ForecastReport.from_predictions(
        target_cell, [v.cycle_index for v in future], [v.capacity for v in future],
        np.full(len(future), last))


def format_summary(columns: Mapping[str, Sequence[ForecastReport]]) -> str:
    """Battery / criterion table with one column per method."""
    methods = list(columns)
    by_cell: dict[str, dict[str, ForecastReport]] = {}
    for m, reports in columns.items():
        for r in reports:
            by_cell.setdefault(r.cell_id, {})[m] = r
    width = max(10, *(len(m) for m in methods))
    head = f"{'Battery':<8} {'Criteria':<8} " + " ".join(f"{m:>{width}}" for m in methods)
    lines = [head, "-" * len(head)]
    for cell, row in by_cell.items():
        for crit in ("MAE", "RMSE"):
            vals = []
            for m in methods:
                r = row.get(m)
                vals.append(f"{(r.mae if crit == 'MAE' else r.rmse):>{width}.4f}" if r
                            else " " * width)
            label = cell if crit == "MAE" else ""
            lines.append(f"{label:<8} {crit:<8} " + " ".join(vals))
    return "\n".join(lines)


def plot_report(report: ForecastReport, prediction_path, error_path) -> None:
    """Write capacity (truth solid, prediction dashed) and absolute-error SVGs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "capformer", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(report.cycle_index, report.true_capacity, "-", color="k", label="ground truth")
        ax.plot(report.cycle_index, report.predicted, "--", color="tab:red", label="predicted")
        ax.set_xlabel("cycle")
        ax.set_ylabel("capacity (Ah)")
        ax.set_title(f"{report.cell_id}: MAE {report.mae:.4f}, RMSE {report.rmse:.4f}")
        ax.legend()
        fig.tight_layout()
        fig.savefig(prediction_path, format="svg", metadata={"Date": None})
        plt.close(fig)

        fig, ax = plt.subplots(figsize=(6, 3))
        ax.plot(report.cycle_index, report.abs_error, "-", color="tab:blue")
        ax.set_xlabel("cycle")
        ax.set_ylabel("absolute error (Ah)")
        ax.set_title(f"{report.cell_id}: absolute error")
        fig.tight_layout()
        fig.savefig(error_path, format="svg", metadata={"Date": None})
        plt.close(fig)
