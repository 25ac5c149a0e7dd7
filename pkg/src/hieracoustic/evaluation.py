"""Cross-validation harness: manifests, fold splits, segment scoring,
confusion matrices, report files and a synthetic corpus generator.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .decision import SegmentDecision, SegmentPosteriors, classify_segment, write_predictions
from .features import (
    CONTEXT,
    NUM_MEL,
    SAMPLE_RATE_HZ,
    FeatureError,
    MelFeatureSequence,
    NormStats,
    compute_norm_stats,
    normalize,
    read_feature_file,
    stack_context,
    write_feature_file,
)
from .network import Network, predict_proba
from .taxonomy import Taxonomy, TaxonomyError, dcase_label_to_code, default_taxonomy, save_taxonomy
from .training import FrameSet

log = logging.getLogger(__name__)

NUM_FOLDS = 4


class EvaluationError(ValueError):
    pass


# -- manifests and folds ---------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    low_class: str
    fold: int

    @property
    def segment_id(self) -> str:
        return self.path.stem


def read_manifest(path) -> list[ManifestEntry]:
    """``segment_path,low_class,fold`` CSV; relative paths resolve against
    the manifest's directory. ``fold`` is the fold that tests the segment."""
    base = Path(path).parent
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = {"segment_path", "low_class", "fold"}
        if reader.fieldnames is None or not needed <= set(reader.fieldnames):
            raise EvaluationError(f"{path}: header must contain segment_path,low_class,fold")
        for i, row in enumerate(reader, start=2):
            try:
                fold = int(row["fold"])
            except ValueError:
                raise EvaluationError(f"{path}:{i}: bad fold {row['fold']!r}") from None
            p = Path(row["segment_path"])
            entries.append(ManifestEntry(p if p.is_absolute() else base / p, row["low_class"].strip(), fold))
    if not entries:
        raise EvaluationError(f"{path}: empty manifest")
    return entries


def write_manifest(path, entries) -> None:
    base = Path(path).parent.resolve()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment_path", "low_class", "fold"])
        for e in entries:
            p = Path(e.path).resolve()
            try:
                p = p.relative_to(base)
            except ValueError:
                pass
            w.writerow([p.as_posix(), e.low_class, e.fold])


def import_dcase_lists(fold_lists: dict[int, str], audio_root=None) -> list[ManifestEntry]:
    """Turn DCASE-style per-fold evaluation lists into manifest entries.

    Each list has ``path<sep>label`` rows (tab or comma); scene labels such
    as ``bus`` map to C-codes of the default taxonomy.
    """
    root = Path(audio_root) if audio_root else None
    entries = []
    seen = {}
    for fold, list_path in sorted(fold_lists.items()):
        with open(list_path) as fh:
            for n, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split("\t") if "\t" in line else line.split(",")
                if len(parts) < 2:
                    raise EvaluationError(f"{list_path}:{n}: expected path<sep>label")
                p = Path(parts[0].strip())
                if root is not None and not p.is_absolute():
                    p = root / p
                if p in seen:
                    raise EvaluationError(f"{p} listed in folds {seen[p]} and {fold}")
                seen[p] = fold
                entries.append(ManifestEntry(p, dcase_label_to_code(parts[1].strip()), fold))
    return entries


@dataclass
class FoldSpec:
    fold_id: int
    train: list[ManifestEntry]
    test: list[ManifestEntry]

    def __post_init__(self):
        overlap = {e.path for e in self.train} & {e.path for e in self.test}
        if overlap:
            raise EvaluationError(
                f"fold {self.fold_id}: {len(overlap)} segment(s) in both train and test, "
                f"e.g. {sorted(overlap)[0]}"
            )


def fold_split(entries, fold_id: int) -> FoldSpec:
    test = [e for e in entries if e.fold == fold_id]
    if not test:
        raise EvaluationError(f"no segments belong to fold {fold_id}")
    return FoldSpec(fold_id, [e for e in entries if e.fold != fold_id], test)


# -- loading features --------------------------------------------------------------


@dataclass
class Segment:
    segment_id: str
    low: int
    vectors: np.ndarray


def load_segments(entries, taxonomy: Taxonomy, context: int = CONTEXT) -> list[Segment]:
    out = []
    for e in entries:
        try:
            low = taxonomy.low_index(e.low_class)
        except TaxonomyError as exc:
            raise EvaluationError(f"{e.path}: {exc}") from None
        if not e.path.exists():
            raise EvaluationError(f"missing feature file {e.path}")
        frames = read_feature_file(e.path)
        ctx = stack_context(MelFeatureSequence(frames, e.segment_id), context)
        out.append(Segment(e.segment_id, low, ctx.vectors))
    return out


def segments_to_frames(segments, stats: NormStats | None = None, dtype=np.float32) -> FrameSet:
    if not segments:
        return FrameSet(np.zeros((0, 0), dtype=dtype), np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp))
    x = np.concatenate([s.vectors for s in segments])
    if stats is not None:
        x = normalize(x, stats)
    low = np.concatenate([np.full(len(s.vectors), s.low) for s in segments])
    seg = np.concatenate([np.full(len(s.vectors), i) for i, s in enumerate(segments)])
    return FrameSet(x.astype(dtype), low, seg)


def norm_stats_for(segments) -> NormStats:
    """Normalization statistics from (training) segments only."""
    return compute_norm_stats(np.concatenate([s.vectors for s in segments]))


# -- metrics -------------------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion_matrix(predicted, truths, num_classes: int = 15) -> ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""
    pred = np.asarray([d.predicted_class if isinstance(d, SegmentDecision) else d for d in predicted], dtype=np.intp)
    true = np.asarray(truths, dtype=np.intp)
    if pred.shape != true.shape:
        raise EvaluationError(f"{len(pred)} predictions vs {len(true)} truths")
    for name, arr in (("predicted", pred), ("true", true)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise EvaluationError(f"{name} class index out of range [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return ConfusionMatrix(counts)


def frame_accuracy_high_level(model: Network, frames: FrameSet, taxonomy: Taxonomy | None = None) -> float:
    """Frame-wise accuracy on the high-level classes.

    Uses the primary head of a DNN1-style model, or the high-level head of a
    multi-level model.
    """
    taxonomy = taxonomy or default_taxonomy()
    p_low, p_high = predict_proba(model, frames.x)
    if p_high is None:
        if model.num_classes != taxonomy.num_high:
            raise EvaluationError(
                f"model head has {model.num_classes} outputs, need {taxonomy.num_high} high-level classes"
            )
        p_high = p_low
    targets = taxonomy.lift_labels(frames.low)
    return float(np.mean(np.argmax(p_high, axis=1) == targets))


@dataclass
class FoldResult:
    fold_id: int
    accuracy: float
    decisions: list[SegmentDecision]
    truths: list[int]
    confusion: ConfusionMatrix
    high_frame_accuracy: float | None = None


def decide_segments(model: Network, frames: FrameSet, segment_ids) -> list[SegmentDecision]:
    p, _ = predict_proba(model, frames.x)
    out = []
    for i, sid in enumerate(segment_ids):
        rows = frames.segment == i
        out.append(classify_segment(SegmentPosteriors(p[rows], sid)))
    return out


def evaluate_fold(
    model: Network,
    fold: FoldSpec,
    stats: NormStats,
    taxonomy: Taxonomy | None = None,
    context: int = CONTEXT,
) -> FoldResult:
    """Score every test segment of ``fold`` with the average-confidence rule.

    A model whose head has as many outputs as there are high-level classes
    is scored against high-level labels, anything else against low-level.
    """
    taxonomy = taxonomy or default_taxonomy()
    segments = load_segments(fold.test, taxonomy, context)
    frames = segments_to_frames(segments, stats, model.dtype)
    if frames.x.shape[1] != model.input_dim:
        raise EvaluationError(f"features have {frames.x.shape[1]} dims, model expects {model.input_dim}")
    high_mode = model.num_classes == taxonomy.num_high and not model.is_multi_level
    n_cls = taxonomy.num_high if high_mode else taxonomy.num_low
    if not high_mode and model.num_classes != taxonomy.num_low:
        raise EvaluationError(f"model head has {model.num_classes} outputs, taxonomy has {taxonomy.num_low} classes")
    truths = [taxonomy.parent_of(s.low) if high_mode else s.low for s in segments]
    decisions = decide_segments(model, frames, [s.segment_id for s in segments])
    cm = confusion_matrix(decisions, truths, n_cls)
    high_acc = None
    if high_mode or model.is_multi_level:
        high_acc = frame_accuracy_high_level(model, frames, taxonomy)
    return FoldResult(fold.fold_id, cm.accuracy(), decisions, truths, cm, high_acc)


@dataclass
class EvaluationReport:
    fold_ids: list[int]
    accuracies: list[float]
    average: float
    confusion: ConfusionMatrix | None = None
    high_frame_accuracies: list[float | None] = field(default_factory=list)


def aggregate_cv(results) -> EvaluationReport:
    """Unweighted mean of fold accuracies and pooled confusion counts.

    Accepts :class:`FoldResult` objects or bare accuracy numbers.
    """
    results = list(results)
    if not results:
        raise EvaluationError("need at least one fold")
    if all(isinstance(r, FoldResult) for r in results):
        accs = [r.accuracy for r in results]
        cm = results[0].confusion
        for r in results[1:]:
            cm = cm + r.confusion
        return EvaluationReport(
            [r.fold_id for r in results], accs, float(np.mean(accs)), cm,
            [r.high_frame_accuracy for r in results],
        )
    accs = [float(a) for a in results]
    return EvaluationReport(list(range(1, len(accs) + 1)), accs, float(np.mean(accs)))


def format_report(report: EvaluationReport, class_names=None) -> str:
    lines = ["fold  accuracy(%)  high-level frame acc(%)"]
    highs = report.high_frame_accuracies or [None] * len(report.fold_ids)
    for fid, acc, h in zip(report.fold_ids, report.accuracies, highs):
        hs = "-" if h is None else f"{100 * h:.2f}"
        lines.append(f"{fid:>4}  {100 * acc:11.2f}  {hs:>23}")
    lines.append(f"{'avg':>4}  {100 * report.average:11.2f}")
    if report.confusion is not None:
        names = class_names or [str(i) for i in range(report.confusion.counts.shape[0])]
        width = max(4, max(len(n) for n in names) + 1)
        lines.append("")
        lines.append("confusion (rows = true, columns = predicted)")
        lines.append(" " * width + "".join(f"{n:>{width}}" for n in names))
        for name, row in zip(names, report.confusion.counts):
            lines.append(f"{name:>{width}}" + "".join(f"{c:>{width}d}" for c in row))
    return "\n".join(lines) + "\n"


def write_report(report: EvaluationReport, out_dir, class_names=None, fold_results=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(format_report(report, class_names))
    with open(out / "accuracy.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "accuracy"])
        for fid, acc in zip(report.fold_ids, report.accuracies):
            w.writerow([fid, repr(acc)])
    if report.confusion is not None:
        names = class_names or [str(i) for i in range(report.confusion.counts.shape[0])]
        with open(out / "confusion.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            w.writerows(report.confusion.counts.tolist())
    for r in fold_results or []:
        write_predictions(out / f"predictions_fold{r.fold_id}.csv", r.decisions, class_names)


# -- synthetic corpus -------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticCorpusConfig:
    """Gaussian stand-in for log-mel features.

    Each super-cluster (one per high-level class) gets a centre; every low
    class gets a mean offset from its parent's centre by ``class_spread``.
    Each segment adds its own offset (``segment_jitter``) and each frame
    i.i.d. noise (``noise_std``).
    """

    seed: int = 0
    segments_per_class: int = 20
    frames_per_segment: int = 100
    dim: int = NUM_MEL
    noise_std: float = 1.0
    separation: float = 8.0
    class_spread: float = 1.0
    segment_jitter: float = 0.3
    num_folds: int = NUM_FOLDS

    def problems(self) -> list[str]:
        out = []
        if self.separation <= 4 * self.noise_std:
            out.append(f"separation {self.separation} must exceed 4 x noise_std ({4 * self.noise_std})")
        if self.noise_std <= 0:
            out.append("noise_std must be > 0")
        if self.class_spread < 0 or self.segment_jitter < 0:
            out.append("class_spread and segment_jitter must be >= 0")
        if 2 * self.class_spread >= self.separation - 2 * self.class_spread:
            out.append("class_spread too large: super-clusters would overlap")
        if self.segments_per_class < self.num_folds:
            out.append(f"need at least {self.num_folds} segments per class")
        if self.frames_per_segment < 1 or self.dim < 3:
            out.append("frames_per_segment must be >= 1 and dim >= 3")
        return out


def synthetic_means(cfg: SyntheticCorpusConfig, taxonomy: Taxonomy | None = None):
    """``(super_centres, class_means)`` for the corpus."""
    taxonomy = taxonomy or default_taxonomy()
    rng = np.random.default_rng([cfg.seed, 0])
    q, _ = np.linalg.qr(rng.standard_normal((cfg.dim, taxonomy.num_high)))
    # orthonormal directions scaled so every pair of centres is `separation` apart
    centres = q.T * (cfg.separation / np.sqrt(2.0))
    offsets = rng.standard_normal((taxonomy.num_low, cfg.dim))
    offsets *= cfg.class_spread / np.linalg.norm(offsets, axis=1, keepdims=True)
    return centres, centres[taxonomy.parent_array] + offsets


def synthetic_segments(cfg: SyntheticCorpusConfig, taxonomy: Taxonomy | None = None):
    """Yield ``(segment_id, low_index, fold, frames)`` deterministically."""
    problems = cfg.problems()
    if problems:
        raise EvaluationError("; ".join(problems))
    taxonomy = taxonomy or default_taxonomy()
    _, means = synthetic_means(cfg, taxonomy)
    rng = np.random.default_rng([cfg.seed, 1])
    for j in range(taxonomy.num_low):
        for k in range(cfg.segments_per_class):
            centre = means[j] + cfg.segment_jitter * rng.standard_normal(cfg.dim)
            frames = centre + cfg.noise_std * rng.standard_normal((cfg.frames_per_segment, cfg.dim))
            yield f"{taxonomy.low_classes[j]}_{k:03d}", j, k % cfg.num_folds + 1, frames


def generate_synthetic_corpus(cfg: SyntheticCorpusConfig, out_dir, taxonomy: Taxonomy | None = None) -> Path:
    """Write feature files, ``manifest.csv`` and ``taxonomy.csv``; returns
    the manifest path."""
    taxonomy = taxonomy or default_taxonomy()
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    entries = []
    for sid, j, fold, frames in synthetic_segments(cfg, taxonomy):
        path = out / "features" / f"{sid}.hacf"
        write_feature_file(path, frames)
        entries.append(ManifestEntry(path, taxonomy.low_classes[j], fold))
    manifest = out / "manifest.csv"
    write_manifest(manifest, entries)
    save_taxonomy(out / "taxonomy.csv", taxonomy)
    return manifest


def generate_synthetic_wavs(
    cfg: SyntheticCorpusConfig, out_dir, taxonomy: Taxonomy | None = None, seconds: float = 2.0
) -> Path:
    """Sinusoid-mixture WAVs for exercising the audio front end.

    Each high-level class owns a frequency band and each low class a pair of
    tones inside it; segments add white noise and random phases.
    """
    taxonomy = taxonomy or default_taxonomy()
    problems = cfg.problems()
    if problems:
        raise EvaluationError("; ".join(problems))
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([cfg.seed, 2])
    bands = np.linspace(200.0, 7000.0, taxonomy.num_high + 1)
    t = np.arange(int(seconds * SAMPLE_RATE_HZ)) / SAMPLE_RATE_HZ
    entries = []
    for j in range(taxonomy.num_low):
        h = taxonomy.parent_of(j)
        kids = taxonomy.children(h)
        lo, hi = bands[h], bands[h + 1]
        step = (hi - lo) / (len(kids) + 1)
        f1 = lo + step * (kids.index(j) + 1)
        tones = (f1, f1 * 1.5 if f1 * 1.5 < hi else f1 - step / 2)
        for k in range(cfg.segments_per_class):
            phases = rng.uniform(0, 2 * np.pi, size=2)
            x = sum(0.2 * np.sin(2 * np.pi * f * t + ph) for f, ph in zip(tones, phases))
            x = x + 0.05 * cfg.noise_std * rng.standard_normal(t.shape)
            path = out / "audio" / f"{taxonomy.low_classes[j]}_{k:03d}.wav"
            wavfile.write(path, SAMPLE_RATE_HZ, np.round(np.clip(x, -1, 1) * 32767).astype(np.int16))
            entries.append(ManifestEntry(path, taxonomy.low_classes[j], k % cfg.num_folds + 1))
    manifest = out / "manifest.csv"
    write_manifest(manifest, entries)
    save_taxonomy(out / "taxonomy.csv", taxonomy)
    return manifest


def nearest_centroid_high_accuracy(cfg: SyntheticCorpusConfig, taxonomy: Taxonomy | None = None) -> float:
    """Frame-level high-level accuracy of a nearest-centroid classifier
    fitted on the generated data (a separability check, no network)."""
    taxonomy = taxonomy or default_taxonomy()
    xs, ys = [], []
    for _, j, _, frames in synthetic_segments(cfg, taxonomy):
        xs.append(frames)
        ys.append(np.full(len(frames), taxonomy.parent_of(j)))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    centroids = np.stack([x[y == h].mean(axis=0) for h in range(taxonomy.num_high)])
    d = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d, axis=1) == y))


def check_feature_dims(entries, dim: int) -> None:
    for e in entries:
        m = read_feature_file(e.path)
        if m.shape[1] != dim:
            raise FeatureError(f"{e.path}: {m.shape[1]}-dim features, expected {dim}")
