"""Training loop, evaluation, parameter sweeps and ablations."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .baselines import BASELINES, BaselineSpec, apply_temperature, baseline_loss, fit_temperature, mc_dropout_predict
from .data import DatasetBundle, GeneratorSpec, generate, load_embeddings
from .metrics import OOD, CalibrationReport, PredictionSet, build_report, calibration_curve, ece, write_records
from .numerics import MlpModel, NonFiniteError, forward
from .optimizer import AdamState, adam_step
from .regularizers import ManifoldSmoothingConfig, generate_off_manifold, generate_on_manifold, r_off, r_on

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

METHODS = ("manifold-smoothing",) + BASELINES
SWEEP_PARAMETERS = ("delta_on", "delta_off", "delta_y")
# radii used verbatim for unit-normalized sentence embeddings
EMBEDDING_RADII = {"delta_on": 1e-4, "delta_off": 1e-3}


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, snapshot: str | None = None):
        super().__init__(message if snapshot is None else f"{message} (snapshot: {snapshot})")
        self.snapshot = snapshot


@dataclass
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    activation: str = "tanh"
    dropout: float = 0.0
    split_index: int | None = None


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 32
    epochs: int = 30

    def __post_init__(self):
        if self.batch_size < 2 or self.epochs < 1:
            raise ConfigError("batch_size must be >= 2 and epochs >= 1")


@dataclass
class DataConfig:
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    train: str | None = None
    dev: str | None = None
    test_in: str | None = None
    test_ood: str | None = None
    standardize: bool = False

    @property
    def from_files(self) -> bool:
        return self.train is not None

    def __post_init__(self):
        paths = (self.train, self.dev, self.test_in)
        if any(p is not None for p in paths) and not all(p is not None for p in paths):
            raise ConfigError("file data needs train, dev and test_in paths")


@dataclass
class MetricConfig:
    ece_bins: int = 10
    ece_scheme: str = "equal-width"
    tau_upper: list[float] = field(default_factory=lambda: [0.5, 0.7, 1.0])
    num_thresholds: int = 50

    def __post_init__(self):
        if not self.tau_upper or any(not 0 < t <= 1 for t in self.tau_upper):
            raise ConfigError("tau_upper values must lie in (0, 1]")


@dataclass
class ExperimentConfig:
    method: str = "manifold-smoothing"
    seed: int = 0
    out: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    smoothing: ManifoldSmoothingConfig = field(
        default_factory=lambda: ManifoldSmoothingConfig(delta_on=1e-2, delta_off=1e-1)
    )
    baseline: BaselineSpec = field(default_factory=BaselineSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        # the baseline section carries hyperparameters; its kind follows the method
        self.baseline.kind = "vanilla" if self.method == "manifold-smoothing" else self.method
        if self.method == "mc-dropout" and self.model.dropout == 0.0:
            raise ConfigError("mc-dropout needs model.dropout > 0")

    @property
    def primary_tau(self) -> float:
        return self.metrics.tau_upper[0]

    def to_dict(self) -> dict:
        return asdict(self)


SECTIONS = {
    ExperimentConfig: {
        "model": ModelConfig,
        "smoothing": ManifoldSmoothingConfig,
        "baseline": BaselineSpec,
        "optim": OptimConfig,
        "data": DataConfig,
        "metrics": MetricConfig,
    },
    DataConfig: {"generator": GeneratorSpec},
}


def _build(cls, values: dict, path: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{path.rstrip('.') or 'config'} must be a table")
    known = {f.name for f in fields(cls)}
    sections = SECTIONS.get(cls, {})
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {path + key!r}")
        kwargs[key] = _build(sections[key], value, f"{path}{key}.") if key in sections else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path.rstrip('.') or 'config'}: {exc}") from None


def config_from_dict(values: dict) -> ExperimentConfig:
    values = copy.deepcopy(values)
    data = values.get("data", {})
    smoothing = values.setdefault("smoothing", {})
    # embedding files get the radii tuned for sentence embeddings unless overridden
    radii = EMBEDDING_RADII if data.get("train") else {"delta_on": 1e-2, "delta_off": 1e-1}
    for key, default in radii.items():
        smoothing.setdefault(key, default)
    return _build(ExperimentConfig, values, "")


def load_config(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def set_path(values: dict, dotted: str, value) -> None:
    node = values
    *parents, leaf = dotted.split(".")
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value


# -- data / model --------------------------------------------------------------


def load_data(config: DataConfig) -> DatasetBundle:
    if config.from_files:
        bundle = load_embeddings(config.train, config.dev, config.test_in, config.test_ood)
    else:
        bundle = generate(config.generator)
    return bundle.standardized() if config.standardize else bundle


def build_model(config: ExperimentConfig, dim: int, num_classes: int, rng) -> MlpModel:
    sizes = [dim, *config.model.hidden, num_classes]
    return MlpModel.init(
        sizes,
        activation=config.model.activation,
        split_index=config.model.split_index,
        dropout_rate=config.model.dropout,
        rng=rng,
    )


def _rngs(seed: int) -> dict[str, np.random.Generator]:
    # independent streams keep batch order and dropout identical whether or not
    # the regularizers consume randomness
    names = ("init", "shuffle", "dropout", "regularizer", "mix", "predict")
    return {n: np.random.default_rng(s) for n, s in zip(names, np.random.SeedSequence(seed).spawn(len(names)))}


@dataclass
class Predictor:
    model: MlpModel
    method: str = "manifold-smoothing"
    temperature: float = 1.0
    mc_passes: int = 10
    seed: int = 0

    def predict(self, x: np.ndarray) -> np.ndarray:
        if len(x) == 0:
            return np.zeros((0, self.model.num_classes))
        if self.method == "mc-dropout":
            return mc_dropout_predict(self.model, x, self.mc_passes, np.random.default_rng(self.seed))
        result = forward(self.model, x)
        if self.method == "temperature-scaling":
            return apply_temperature(result.logits, self.temperature)
        return result.output


def predictions(predictor: Predictor, bundle: DatasetBundle, include_ood: bool = True) -> PredictionSet:
    records = PredictionSet.from_probs(predictor.predict(bundle.test_x), bundle.test_y)
    if include_ood and len(bundle.ood_x):
        ood = PredictionSet.from_probs(predictor.predict(bundle.ood_x), np.full(len(bundle.ood_x), OOD))
        records = PredictionSet.concat(records, ood)
    return records


def evaluate(predictor: Predictor, bundle: DatasetBundle, metrics: MetricConfig | None = None):
    """Report over test_in (calibration, misclassification) and test_in + test_ood."""
    metrics = metrics or MetricConfig()
    if predictor.model.input_dim != bundle.dim:
        raise ValueError(f"model expects dimension {predictor.model.input_dim}, data has {bundle.dim}")
    records = predictions(predictor, bundle)
    return report_from_records(records, metrics), records


def report_from_records(records: PredictionSet, metrics: MetricConfig) -> CalibrationReport:
    return build_report(records, metrics.ece_bins, tuple(metrics.tau_upper), metrics.num_thresholds, metrics.ece_scheme)


# -- training --------------------------------------------------------------------


@dataclass
class RunArtifact:
    config: ExperimentConfig
    model: MlpModel
    trace: list[dict]
    report: CalibrationReport
    records: PredictionSet
    temperature: float = 1.0
    wall_clock: float = 0.0

    @property
    def predictor(self) -> Predictor:
        return Predictor(self.model, self.config.method, self.temperature, self.config.baseline.mc_passes, self.config.seed)


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        idx = order[start : start + size]
        if len(idx) >= 2:
            yield idx


def train_step(
    model: MlpModel,
    x: np.ndarray,
    y: np.ndarray,
    config: ExperimentConfig,
    rngs: dict[str, np.random.Generator],
):
    """Loss terms and summed gradient for one mini-batch (no parameter update)."""
    ce, tape = baseline_loss(config.baseline, model, x, y, rngs["mix"], rngs["dropout"])
    terms = {"ce": ce, "r_on": 0.0, "r_off": 0.0}
    total = ce
    if config.method == "manifold-smoothing":
        sm = config.smoothing
        if sm.lambda_on > 0:
            samples = generate_on_manifold(model, x, y, sm, rngs["regularizer"])
            terms["r_on"], t_on = r_on(model, samples, "train", rngs["dropout"])
            tape.add(t_on, sm.lambda_on)
            total += sm.lambda_on * terms["r_on"]
        if sm.lambda_off > 0:
            samples = generate_off_manifold(model, x, y, sm, rngs["regularizer"])
            terms["r_off"], t_off = r_off(model, samples, "train", rngs["dropout"])
            tape.add(t_off, sm.lambda_off)
            total += sm.lambda_off * terms["r_off"]
    terms["loss"] = total
    return terms, tape


def train(config: ExperimentConfig, bundle: DatasetBundle | None = None) -> RunArtifact:
    started = time.perf_counter()
    bundle = bundle if bundle is not None else load_data(config.data)
    rngs = _rngs(config.seed)
    model = build_model(config, bundle.dim, bundle.num_classes, rngs["init"])
    opt = config.optim
    state = AdamState.for_model(model, lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2)
    y_train = np.eye(bundle.num_classes)[bundle.train_y]
    trace = []
    for epoch in range(1, opt.epochs + 1):
        sums = {"loss": 0.0, "ce": 0.0, "r_on": 0.0, "r_off": 0.0}
        steps = 0
        for idx in _batches(rngs["shuffle"].permutation(len(y_train)), opt.batch_size):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    terms, tape = train_step(model, bundle.train_x[idx], y_train[idx], config, rngs)
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"epoch {epoch}, step {steps + 1}: {exc}", _snapshot(model, config)) from None
            if not all(math.isfinite(v) for v in terms.values()) or not np.all(np.isfinite(tape.flat())):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {steps + 1}: {terms}", _snapshot(model, config))
            adam_step(model, tape, state)
            for k in sums:
                sums[k] += terms[k]
            steps += 1
        row = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}}
        dev = PredictionSet.from_probs(forward(model, bundle.dev_x).output, bundle.dev_y)
        row["dev_ece"] = ece(dev, config.metrics.ece_bins, config.metrics.ece_scheme)
        trace.append(row)
        log.info("epoch %d loss %.5f dev_ece %.4f", epoch, row["loss"], row["dev_ece"])
    temperature = 1.0
    if config.method == "temperature-scaling":
        bl = config.baseline
        temperature = fit_temperature(forward(model, bundle.dev_x).logits, bundle.dev_y, bl.temperature_min, bl.temperature_max)
    predictor = Predictor(model, config.method, temperature, config.baseline.mc_passes, config.seed)
    report, records = evaluate(predictor, bundle, config.metrics)
    return RunArtifact(config, model, trace, report, records, temperature, time.perf_counter() - started)


def _snapshot(model: MlpModel, config: ExperimentConfig) -> str | None:
    if config.out is None:
        return None
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "diverged_model.npz"
    np.savez(path, **model.to_arrays())
    return str(path)


# -- artifacts -------------------------------------------------------------------


def save_artifact(artifact: RunArtifact, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "model.npz", temperature=np.array(artifact.temperature), **artifact.model.to_arrays())
    with open(out / "trace.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(artifact.trace[0]))
        writer.writeheader()
        writer.writerows(artifact.trace)
    write_records(out / "records.txt", artifact.records)
    write_report(artifact.report, artifact.records, artifact.config.metrics, out)
    meta = {"config": artifact.config.to_dict(), "temperature": artifact.temperature, "wall_clock_s": artifact.wall_clock}
    (out / "config.json").write_text(json.dumps(meta, indent=2, default=str))
    return out


def write_report(report: CalibrationReport, records: PredictionSet, metrics: MetricConfig, out: Path) -> None:
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerows(report.summary_rows())
    with open(out / "reliability.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lower", "upper", "count", "mean_confidence", "accuracy", "calibration_error"])
        for b in report.bins:
            writer.writerow([b.lower, b.upper, b.count, b.mean_confidence, b.accuracy, b.calibration_error])
    with open(out / "curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "tau_upper", "tau", "f1"])
        ind = records.in_distribution()
        tasks = []
        if np.any(~ind.correct):
            tasks.append(("misclassified", ind))
        if np.any(records.is_ood):
            tasks.append(("ood", records))
        for task, recs in tasks:
            for tu in metrics.tau_upper:
                curve = calibration_curve(recs, task, tu, metrics.num_thresholds)
                for tau, f1 in zip(curve.thresholds, curve.f1_values):
                    writer.writerow([task, tu, tau, f1])


def load_predictor(model_path, config: ExperimentConfig) -> Predictor:
    with np.load(model_path) as arrays:
        model = MlpModel.from_arrays(arrays)
        temperature = float(arrays["temperature"]) if "temperature" in arrays else 1.0
    return Predictor(model, config.method, temperature, config.baseline.mc_passes, config.seed)


# -- sweeps / ablations ----------------------------------------------------------


def summarize(report: CalibrationReport, tau: float) -> dict:
    return {
        "accuracy": report.accuracy,
        "ece": report.ece,
        "nbaucc_ood": report.nbaucc_ood.get(tau),
        "nbaucc_mis": report.nbaucc_misclassification.get(tau),
        "mean_conf_ood": report.mean_confidence_ood,
    }


def _mean_rows(rows: list[dict]) -> dict:
    out = {}
    for key in rows[0]:
        vals = [r[key] for r in rows if r[key] is not None]
        out[key] = float(np.mean(vals)) if vals else None
        if vals and len(vals) > 1:
            out[key + "_std"] = float(np.std(vals, ddof=1))
    return out


def _run_seeds(config: ExperimentConfig, repeats: int, bundle: DatasetBundle | None) -> dict:
    rows = []
    for r in range(repeats):
        cfg = copy.deepcopy(config)
        cfg.seed = config.seed + r
        rows.append(summarize(train(cfg, bundle).report, config.primary_tau))
    return _mean_rows(rows)


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def sweep(
    config: ExperimentConfig,
    parameter: str,
    grid,
    repeats: int = 3,
    bundle: DatasetBundle | None = None,
    workers: int = 1,
) -> list[dict]:
    """One row per grid value: metric means (and stds) over ``repeats`` seeds."""
    if parameter not in SWEEP_PARAMETERS:
        raise ValueError(f"parameter must be one of {SWEEP_PARAMETERS}")
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    bundle = bundle if bundle is not None else load_data(config.data)

    def point(value):
        cfg = copy.deepcopy(config)
        setattr(cfg.smoothing, parameter, float(value))
        try:
            cfg.smoothing.__post_init__()
            return {parameter: value, "status": "ok", **_run_seeds(cfg, repeats, bundle)}
        except (ValueError, TrainingDivergedError) as exc:
            return {parameter: value, "status": f"failed: {exc}"}

    return _map(point, grid, workers)


ABLATIONS = ("vanilla", "r_on_only", "r_off_only", "both")


def ablation_configs(config: ExperimentConfig) -> dict[str, ExperimentConfig]:
    sm = config.smoothing
    out = {}
    for name, lam_on, lam_off in (
        ("vanilla", 0.0, 0.0),
        ("r_on_only", sm.lambda_on or 1.0, 0.0),
        ("r_off_only", 0.0, sm.lambda_off or 1.0),
        ("both", sm.lambda_on or 1.0, sm.lambda_off or 1.0),
    ):
        cfg = copy.deepcopy(config)
        cfg.method = "manifold-smoothing"
        cfg.baseline.kind = "vanilla"
        cfg.smoothing.lambda_on = lam_on
        cfg.smoothing.lambda_off = lam_off
        out[name] = cfg
    return out


def ablate(config: ExperimentConfig, repeats: int = 5, bundle: DatasetBundle | None = None, workers: int = 1) -> list[dict]:
    """Paired-seed runs of {vanilla, R_on only, R_off only, both}."""
    bundle = bundle if bundle is not None else load_data(config.data)
    configs = ablation_configs(config)
    return _map(lambda name: {"variant": name, **_run_seeds(configs[name], repeats, bundle)}, list(configs), workers)


def write_table(rows: list[dict], path) -> None:
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)
