"""Training loop, per-class threshold fitting, and cross-validation driver.

Each training step draws the next batch from a seeded epoch shuffle, cuts a
fresh random window per (epoch, record), averages per-sample BCE gradients in
slot order (thread-count independent), and applies one Adam update. The
validation partition never contributes a gradient; it selects the best
checkpoint and fits the per-class probability thresholds.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import dsp, features, metrics, model
from .errors import ArgumentRangeError, ConfigError, EmptyDatasetError, NumericalError, ShapeError
from .record_io import DatasetManifest, LeadSubset, lead_subset, parse_record, select_leads
from .stratify import FoldAssignment


@dataclass
class TrainConfig:
    batch_size_train: int = 128
    batch_size_val: int = 64
    learning_rate: float = 1e-4
    max_steps: int = 500
    seed: int = 0
    k: int = 10
    eval_every: int = 100
    lead_subset_name: str = "twelve"
    custom_leads: list[str] = field(default_factory=list)
    normal_class: str = ""
    standardize_wide: bool = False
    precision: str = "float64"
    threads: int = 1

    def __post_init__(self):
        if self.batch_size_train < 1 or self.batch_size_val < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be float64|float32, got {self.precision!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def subset(self) -> LeadSubset:
        return lead_subset(self.lead_subset_name, self.custom_leads)


@dataclass
class ThresholdVector:
    values: np.ndarray
    degenerate_classes: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any((self.values <= 0.0) | (self.values >= 1.0)):
            raise ShapeError("thresholds must lie strictly inside (0, 1)")


def apply_thresholds(probabilities: np.ndarray, thresholds: ThresholdVector) -> np.ndarray:
    return (np.asarray(probabilities) >= thresholds.values).astype(np.int64)


THRESHOLD_GRID = np.round(np.arange(0.02, 0.985, 0.02), 2)  # 0.02 .. 0.98


def fit_thresholds(
    probabilities: np.ndarray,
    labels: np.ndarray,
    weights: metrics.WeightMatrix,
    normal_class_index: int | None = None,
    passes: int = 2,
) -> ThresholdVector:
    """Coordinate-ascent grid search of per-class thresholds.

    Starts from 0.5 everywhere and cycles the classes twice; metric ties pick
    the threshold closest to 0.5 (then the smaller one). Classes with no
    positive labels keep 0.5 and are reported as degenerate.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape:
        raise ShapeError(f"probabilities {probs.shape} vs labels {labels.shape}")
    if probs.min(initial=0.0) < 0.0 or probs.max(initial=0.0) > 1.0:
        raise ShapeError("probabilities must lie in [0, 1]")
    num_classes = probs.shape[1]
    if normal_class_index is None:
        normal_class_index = weights.normal_class_index

    w = weights.w
    correct = float(np.sum(w * metrics.confusion_weighted(labels, labels)))
    normal_only = np.zeros_like(labels)
    normal_only[:, normal_class_index] = 1
    inactive = float(np.sum(w * metrics.confusion_weighted(labels, normal_only)))
    if correct == inactive:
        raise metrics.UndefinedScoreError("threshold fitting target metric is undefined on this data")

    def score(thresholds: np.ndarray) -> float:
        preds = (probs >= thresholds).astype(np.int64)
        observed = float(np.sum(w * metrics.confusion_weighted(labels, preds)))
        return (observed - inactive) / (correct - inactive)

    thresholds = np.full(num_classes, 0.5)
    degenerate = [c for c in range(num_classes) if labels[:, c].sum() == 0]
    for _ in range(passes):
        for c in range(num_classes):
            if c in degenerate:
                continue
            candidates = []
            for t in THRESHOLD_GRID:
                trial = thresholds.copy()
                trial[c] = t
                candidates.append((score(trial), t))
            best_metric = max(m for m, _ in candidates)
            winners = [t for m, t in candidates if m == best_metric]
            thresholds[c] = min(winners, key=lambda t: (abs(t - 0.5), t))
    return ThresholdVector(thresholds, degenerate)


def save_thresholds(path, thresholds: ThresholdVector, class_codes: list[str]):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["class_code", "threshold"])
        for code, t in zip(class_codes, thresholds.values):
            out.writerow([code, repr(float(t))])


def load_thresholds(path, class_codes: list[str]) -> ThresholdVector:
    mapping = {}
    with open(path, newline="") as fh:
        for row in list(csv.reader(fh))[1:]:
            mapping[row[0]] = float(row[1])
    return ThresholdVector(np.array([mapping[c] for c in class_codes]))


# -- data assembly --------------------------------------------------------------


@dataclass
class PreparedRecord:
    record_id: str
    processed: np.ndarray  # resampled + filtered (+ normalized) full recording
    wide: np.ndarray  # already truncated to d_wide (and standardized if enabled)
    labels: np.ndarray


def _wide_slice(values: np.ndarray, d_wide: int) -> np.ndarray:
    if d_wide > features.D_WIDE:
        raise ConfigError(f"d_wide {d_wide} exceeds the {features.D_WIDE} available wide features")
    return values[:d_wide].copy()


def prepare_records(
    manifest: DatasetManifest,
    indices: np.ndarray,
    subset: LeadSubset,
    preprocess_config: dsp.PreprocessConfig,
    feature_config: features.FeatureConfig,
    d_wide: int,
    threads: int = 1,
) -> dict[int, PreparedRecord]:
    """Parse, filter and featurize the given manifest rows (order independent)."""
    label_matrix = manifest.label_matrix()
    taps = dsp.design_bandpass(preprocess_config)

    def build(i: int) -> tuple[int, PreparedRecord]:
        entry = manifest.entries[i]
        record = parse_record(entry.file_path)
        wide = features.record_features(record, feature_config).values
        selected = select_leads(record, subset)
        sig = dsp.resample(selected.signal, selected.sampling_rate_hz, preprocess_config.target_rate_hz)
        sig = dsp.filter_signal(sig, taps)
        if preprocess_config.normalize_scope == "recording":
            sig = dsp.normalize(sig)
        return i, PreparedRecord(entry.record_id, sig, _wide_slice(wide, d_wide), label_matrix[i].astype(np.float64))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            built = list(pool.map(build, [int(i) for i in indices]))
    else:
        built = [build(int(i)) for i in indices]
    return dict(built)


def _window_for(prepared: PreparedRecord, preprocess_config: dsp.PreprocessConfig, window_seed: int | None, policy: str) -> dsp.ProcessedWindow:
    window = dsp.extract_window(prepared.processed, preprocess_config, policy, window_seed)
    if preprocess_config.normalize_scope == "window":
        window = dsp.ProcessedWindow(dsp.normalize(window.signal), window.pad_start, window.source_offset)
    return window


def _stable_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def predict_probabilities(
    prepared: list[PreparedRecord],
    params: model.ModelParams,
    model_config: model.ModelConfig,
    preprocess_config: dsp.PreprocessConfig,
    threads: int = 1,
    batch_size: int | None = None,
) -> np.ndarray:
    """Eval-mode probabilities for each record (deterministic start windows).

    batch_size only bounds how many graphs are in flight; it cannot change
    the numbers.
    """

    def run(p: PreparedRecord) -> np.ndarray:
        window = _window_for(p, preprocess_config, None, "start")
        return model.forward(window, p.wide, params, model_config, mode="eval").probabilities.data.copy()

    chunk = batch_size or len(prepared) or 1
    rows: list[np.ndarray] = []
    for start in range(0, len(prepared), chunk):
        part = prepared[start : start + chunk]
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                rows.extend(pool.map(run, part))
        else:
            rows.extend(run(p) for p in part)
    return np.stack(rows) if rows else np.zeros((0, model_config.d_class))


# -- the fold trainer ------------------------------------------------------------


@dataclass
class FoldReport:
    fold_id: int
    challenge: float
    auroc_by_class: list[float | None]
    auroc_macro: float | None
    thresholds: ThresholdVector
    loss_curve: list[float]
    best_val_metric_at_half: float
    trained_record_ids: list[str]
    val_record_ids: list[str]
    checkpoint_path: str
    steps_run: int


def _partition(manifest: DatasetManifest, fold_assignment: FoldAssignment, fold_id: int) -> tuple[np.ndarray, np.ndarray]:
    n = len(manifest.entries)
    if fold_id == -1:
        everything = np.arange(n)
        return everything, everything.copy()
    if not (0 <= fold_id < fold_assignment.k):
        raise ArgumentRangeError(f"fold_id {fold_id} out of range for k={fold_assignment.k}")
    val = fold_assignment.records_in_fold(fold_id)
    train = fold_assignment.records_not_in_fold(fold_id)
    if len(val) == 0 or len(train) == 0:
        raise EmptyDatasetError(f"fold {fold_id} leaves an empty partition (train={len(train)}, val={len(val)})")
    return train, val


def train_fold(
    manifest: DatasetManifest,
    fold_assignment: FoldAssignment,
    fold_id: int,
    model_config: model.ModelConfig,
    preprocess_config: dsp.PreprocessConfig,
    train_config: TrainConfig,
    weights: metrics.WeightMatrix,
    out_dir,
    feature_config: features.FeatureConfig | None = None,
) -> tuple[model.ModelParams, ThresholdVector, FoldReport]:
    """Train one fold and fit thresholds on its validation partition.

    fold_id == -1 is the overfit/smoke mode: train and validate on all records.
    """
    feature_config = feature_config or features.FeatureConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if model_config.d_class != len(manifest.class_list):
        raise ConfigError(f"model d_class {model_config.d_class} vs {len(manifest.class_list)} manifest classes")
    subset = train_config.subset()
    if model_config.num_leads != len(subset.leads):
        raise ConfigError(f"model num_leads {model_config.num_leads} vs lead subset of {len(subset.leads)}")

    train_idx, val_idx = _partition(manifest, fold_assignment, fold_id)
    val_ids = [manifest.entries[int(i)].record_id for i in val_idx]

    old_dtype = ag.default_dtype()
    ag.set_default_dtype(np.float32 if train_config.precision == "float32" else np.float64)
    try:
        cache = prepare_records(
            manifest,
            np.union1d(train_idx, val_idx),
            subset,
            preprocess_config,
            feature_config,
            model_config.d_wide,
            train_config.threads,
        )
        if train_config.standardize_wide:
            scaler = _fit_wide_scaler([cache[int(i)] for i in train_idx])
            for p in cache.values():
                p.wide = (p.wide - scaler[0]) / scaler[1]
            _save_wide_scaler(out_dir / "wide_scaler.csv", scaler, model_config.d_wide)

        params = model.init_params(model_config, train_config.seed)
        trainable = params.trainable()
        state = ag.adam_init(trainable)
        seed = train_config.seed

        loss_curve: list[float] = []
        trained_ids: set[str] = set()
        best_metric = -math.inf
        best_arrays = params.copy_arrays()
        val_prepared = [cache[int(i)] for i in val_idx]
        val_labels = np.stack([p.labels for p in val_prepared])

        def val_metric_at_half() -> float:
            probs = predict_probabilities(val_prepared, params, model_config, preprocess_config,
                                          train_config.threads, train_config.batch_size_val)
            preds = (probs >= 0.5).astype(np.int64)
            try:
                return metrics.challenge_metric(val_labels.astype(np.int64), preds, weights)
            except metrics.UndefinedScoreError:
                # Degenerate tiny validation sets: fall back to negative BCE.
                p = np.clip(probs, ag.BCE_EPS, 1 - ag.BCE_EPS)
                return float((val_labels * np.log(p) + (1 - val_labels) * np.log1p(-p)).mean())

        pool = ThreadPoolExecutor(max_workers=train_config.threads) if train_config.threads > 1 else None
        try:
            epoch = -1
            stream: list[int] = []
            for step in range(train_config.max_steps):
                batch: list[tuple[int, int]] = []  # (record index, epoch it came from)
                while len(batch) < min(train_config.batch_size_train, len(train_idx)):
                    if not stream:
                        epoch += 1
                        order = np.random.default_rng(_stable_seed(seed, 11, epoch)).permutation(len(train_idx))
                        stream = [int(train_idx[j]) for j in order]
                    batch.append((stream.pop(), epoch))

                def sample_grad(slot_and_item):
                    slot, (rec_idx, rec_epoch) = slot_and_item
                    prepared = cache[rec_idx]
                    window = _window_for(prepared, preprocess_config, _stable_seed(seed, 13, rec_epoch, rec_idx), "random")
                    rng = np.random.default_rng(np.random.SeedSequence([seed, 17, step, slot]))
                    out = model.forward(window, prepared.wide, params, model_config, mode="train", rng=rng)
                    loss = ag.binary_cross_entropy(out.probabilities, prepared.labels)
                    grads = ag.collect_gradients(loss, trainable)
                    return loss.item(), grads

                items = list(enumerate(batch))
                results = pool.map(sample_grad, items) if pool else map(sample_grad, items)
                total_grads: dict[str, np.ndarray] | None = None
                loss_sum = 0.0
                try:
                    for loss_value, grads in results:  # slot order: deterministic reduction
                        loss_sum += loss_value
                        if total_grads is None:
                            total_grads = grads
                        else:
                            for name in total_grads:
                                total_grads[name] += grads[name]
                except NumericalError as exc:
                    raise NumericalError(f"training diverged at step {step}: {exc}") from exc
                scale = 1.0 / len(batch)
                mean_grads = {name: g * scale for name, g in total_grads.items()}
                mean_loss = loss_sum * scale
                if not math.isfinite(mean_loss):
                    raise NumericalError(f"training loss diverged at step {step}")
                loss_curve.append(mean_loss)
                trained_ids.update(cache[rec_idx].record_id for rec_idx, _ in batch)
                ag.adam_step(trainable, mean_grads, state, lr=train_config.learning_rate)

                if (step + 1) % train_config.eval_every == 0 or step + 1 == train_config.max_steps:
                    current = val_metric_at_half()
                    # Ties go to the later checkpoint (more training at equal metric).
                    if current >= best_metric:
                        best_metric = current
                        best_arrays = params.copy_arrays()
        finally:
            if pool:
                pool.shutdown()

        # Report everything from the checkpoint actually written to disk, so a
        # later load + evaluate reproduces these numbers bitwise.
        checkpoint_path = out_dir / "checkpoint.wft1"
        ag.save_checkpoint(checkpoint_path, best_arrays)
        (out_dir / "model_config.txt").write_text(model_config.to_text())
        final_params = model.params_from_arrays(ag.load_checkpoint(checkpoint_path), model_config)

        val_probs = predict_probabilities(val_prepared, params=final_params, model_config=model_config,
                                          preprocess_config=preprocess_config, threads=train_config.threads,
                                          batch_size=train_config.batch_size_val)
        thresholds = fit_thresholds(val_probs, val_labels.astype(np.int64), weights)
        save_thresholds(out_dir / "thresholds.csv", thresholds, manifest.class_list)
        challenge = metrics.challenge_metric(val_labels.astype(np.int64), apply_thresholds(val_probs, thresholds), weights)
        auroc_by_class = metrics.per_class_auroc(val_probs, val_labels.astype(np.int64))

        report = FoldReport(
            fold_id=fold_id,
            challenge=challenge,
            auroc_by_class=auroc_by_class,
            auroc_macro=metrics.macro_auroc(auroc_by_class),
            thresholds=thresholds,
            loss_curve=loss_curve,
            best_val_metric_at_half=best_metric,
            trained_record_ids=sorted(trained_ids),
            val_record_ids=val_ids,
            checkpoint_path=str(checkpoint_path),
            steps_run=len(loss_curve),
        )
        return final_params, thresholds, report
    finally:
        ag.set_default_dtype(old_dtype)


def _fit_wide_scaler(prepared: list[PreparedRecord]) -> tuple[np.ndarray, np.ndarray]:
    stack = np.stack([p.wide for p in prepared])
    mean = stack.mean(axis=0)
    std = stack.std(axis=0)
    std[std < 1e-8] = 1.0
    return mean, std


def _save_wide_scaler(path, scaler: tuple[np.ndarray, np.ndarray], d_wide: int):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["feature", "mean", "std"])
        for i in range(d_wide):
            out.writerow([features.FEATURE_NAMES[i], repr(float(scaler[0][i])), repr(float(scaler[1][i]))])


def load_wide_scaler(path, d_wide: int) -> tuple[np.ndarray, np.ndarray]:
    mean = np.zeros(d_wide)
    std = np.ones(d_wide)
    with open(path, newline="") as fh:
        for i, row in enumerate(list(csv.reader(fh))[1:]):
            mean[i], std[i] = float(row[1]), float(row[2])
    return mean, std


# -- cross validation -------------------------------------------------------------


@dataclass
class CVReport:
    fold_reports: list[FoldReport]
    class_codes: list[str]

    @property
    def mean_challenge(self) -> float:
        return float(np.mean([r.challenge for r in self.fold_reports]))

    @property
    def sd_challenge(self) -> float:
        vals = [r.challenge for r in self.fold_reports]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0


def run_cv(
    manifest: DatasetManifest,
    fold_assignment: FoldAssignment,
    model_config: model.ModelConfig,
    preprocess_config: dsp.PreprocessConfig,
    train_config: TrainConfig,
    weights: metrics.WeightMatrix,
    out_root,
) -> CVReport:
    """Train every fold; per-fold artifacts land in out_root/fold<id>/."""
    out_root = Path(out_root)
    reports = []
    for fold_id in range(fold_assignment.k):
        _, _, report = train_fold(
            manifest, fold_assignment, fold_id, model_config, preprocess_config,
            train_config, weights, out_root / f"fold{fold_id}",
        )
        reports.append(report)
    cv = CVReport(reports, list(manifest.class_list))
    save_cv_report(out_root / "cv_report.csv", cv)
    return cv


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def save_cv_report(path, cv: CVReport):
    """Per-fold rows plus one mean row: fold, challenge, macro AUROC, per-class AUROC."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["fold", "challenge_metric", "auroc_macro"] + [f"auroc_{c}" for c in cv.class_codes])
        for r in cv.fold_reports:
            out.writerow([r.fold_id, _fmt(r.challenge), _fmt(r.auroc_macro)] + [_fmt(a) for a in r.auroc_by_class])
        per_class_means = []
        for c in range(len(cv.class_codes)):
            defined = [r.auroc_by_class[c] for r in cv.fold_reports if r.auroc_by_class[c] is not None]
            per_class_means.append(float(np.mean(defined)) if defined else None)
        macro = [r.auroc_macro for r in cv.fold_reports if r.auroc_macro is not None]
        out.writerow(
            ["mean", _fmt(cv.mean_challenge), _fmt(float(np.mean(macro)) if macro else None)]
            + [_fmt(m) for m in per_class_means]
        )
