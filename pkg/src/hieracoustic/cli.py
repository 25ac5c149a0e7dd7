"""Command line entry point: ``hieracoustic {synth,features,train,evaluate,predict}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .decision import SegmentPosteriors, classify_segment
from .features import (
    FeatureError,
    FramingConfig,
    MelFeatureSequence,
    build_mel_filterbank,
    load_norm_stats,
    normalize,
    read_feature_file,
    save_norm_stats,
    stack_context,
    wav_to_features,
    write_feature_file,
)
from .network import ModelFileError, NetworkError, load_model, predict_proba, save_model
from .taxonomy import TaxonomyError, default_taxonomy, load_taxonomy
from .training import Stage, TrainingError, TrainingPlan, train_stage

log = logging.getLogger("hieracoustic")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- run configuration ------------------------------------------------------------

# config-file key -> TrainingPlan field
_PLAN_KEYS = {
    "stage": "stage",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "learning_rate",
    "momentum": "momentum",
    "alpha": "alpha",
    "dropout_input": "dropout_input",
    "dropout_hidden": "dropout_hidden",
    "seed": "seed",
    "init_model": "init_model",
    "hidden": "hidden_sizes",
    "patience": "patience",
}
_RUN_KEYS = ("manifest", "taxonomy", "fold", "context")
_CASTS = {
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "momentum": float,
    "alpha": float,
    "dropout_input": float,
    "dropout_hidden": float,
    "seed": int,
    "fold": int,
    "context": int,
    "patience": int,
    "hidden": lambda s: tuple(int(v) for v in s.replace(",", " ").split()),
}


def read_config(path) -> dict[str, str]:
    """Flat ``key=value`` file; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve_train_config(args) -> tuple[TrainingPlan, dict]:
    """Merge defaults, config file and flags (flags win); collect every error."""
    raw = read_config(args.config) if args.config else {}
    problems = []
    unknown = set(raw) - set(_PLAN_KEYS) - set(_RUN_KEYS)
    problems += [f"unknown config key {k!r}" for k in sorted(unknown)]
    for key in list(_PLAN_KEYS) + list(_RUN_KEYS):
        flag = getattr(args, key, None)
        if flag is not None:
            raw[key] = flag
    values = {}
    for key, value in raw.items():
        if key in unknown:
            continue
        cast = _CASTS.get(key)
        try:
            values[key] = cast(value) if cast and isinstance(value, str) else value
        except ValueError:
            problems.append(f"{key}: cannot parse {value!r}")
    run = {
        "manifest": values.get("manifest"),
        "taxonomy": values.get("taxonomy"),
        "fold": values.get("fold"),
        "context": values.get("context", 11),
    }
    if run["manifest"] is None:
        problems.append("--manifest is required")
    elif not Path(run["manifest"]).exists():
        problems.append(f"manifest {run['manifest']} does not exist")
    if run["fold"] is None:
        problems.append("--fold is required (0 trains on every segment)")
    if run["taxonomy"] and not Path(run["taxonomy"]).exists():
        problems.append(f"taxonomy {run['taxonomy']} does not exist")
    stage = values.get("stage")
    if stage is None:
        problems.append("--stage is required")
    elif stage not in {s.value for s in Stage}:
        problems.append(f"unknown stage {stage!r}")
    init = values.get("init_model")
    if stage in ("dnn2", "dnn3") and not init:
        problems.append(f"stage {stage} needs --init-model")
    if stage in ("dnn1", "baseline") and init:
        problems.append(f"stage {stage} trains from random weights; drop --init-model")
    if init and not Path(init).exists():
        problems.append(f"init model {init} does not exist")
    plan = None
    if stage in {s.value for s in Stage}:
        plan = TrainingPlan(**{_PLAN_KEYS[k]: v for k, v in values.items() if k in _PLAN_KEYS})
        problems += plan.problems()
    if problems:
        raise UsageError("\n".join(problems))
    return plan, run


def write_run_manifest(path, plan: TrainingPlan, run: dict) -> None:
    """Every resolved setting, in the same key=value form ``--config`` reads."""
    inverse = {v: k for k, v in _PLAN_KEYS.items()}
    lines = []
    for key in _RUN_KEYS:
        value = run[key]
        if value is None:
            continue
        if key in ("manifest", "taxonomy"):
            value = Path(value).resolve()
        lines.append(f"{key}={value}")
    for f in fields(plan):
        value = getattr(plan, f.name)
        if value is None:
            continue
        if f.name == "stage":
            value = value.value
        elif f.name == "hidden_sizes":
            value = ",".join(str(h) for h in value)
        elif f.name == "init_model":
            value = Path(value).resolve()
        lines.append(f"{inverse[f.name]}={value}")
    Path(path).write_text("\n".join(lines) + "\n")


def _taxonomy(path):
    return load_taxonomy(path) if path else default_taxonomy()


def _sidecar(model_path, suffix) -> Path:
    p = Path(model_path)
    return p.with_name(p.name + suffix)


# -- commands -----------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = ev.SyntheticCorpusConfig(
        seed=args.seed,
        segments_per_class=args.segments_per_class,
        frames_per_segment=args.frames_per_segment,
        noise_std=args.noise_std,
        separation=args.separation,
        class_spread=args.class_spread,
        segment_jitter=args.segment_jitter,
    )
    problems = cfg.problems()
    if problems:
        raise UsageError("\n".join(problems))
    if args.wav:
        manifest = ev.generate_synthetic_wavs(cfg, args.out, seconds=args.seconds)
    else:
        manifest = ev.generate_synthetic_corpus(cfg, args.out)
    print(f"seed={cfg.seed}")
    print(f"manifest={manifest}")
    return EXIT_OK


def _extract_one(job):
    wav, out_path, cfg = job
    try:
        feats = wav_to_features(wav, cfg, build_mel_filterbank(cfg))
        write_feature_file(out_path, feats.frames)
        return None
    except (FeatureError, OSError) as exc:
        return f"{wav}: {exc}"


def cmd_features(args) -> int:
    try:
        cfg = FramingConfig(args.frame_length, args.hop, args.window, args.fft_size)
    except FeatureError as exc:
        raise UsageError(str(exc)) from None
    entries = ev.read_manifest(args.manifest)
    out = Path(args.out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    stems = [e.segment_id for e in entries]
    dupes = sorted({s for s in stems if stems.count(s) > 1})
    if dupes:
        raise DataError(f"duplicate segment names: {', '.join(dupes[:5])}")
    jobs = [(e.path, out / "features" / f"{e.segment_id}.hacf", cfg) for e in entries]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            errors = [e for e in pool.map(_extract_one, jobs) if e]
    else:
        errors = [e for e in map(_extract_one, jobs) if e]
    for msg in errors:
        print(f"error: {msg}", file=sys.stderr)
    if errors:
        return EXIT_DATA
    feature_entries = [ev.ManifestEntry(j[1], e.low_class, e.fold) for j, e in zip(jobs, entries)]
    ev.write_manifest(out / "manifest.csv", feature_entries)
    if args.fold is not None:
        tax = _taxonomy(args.taxonomy)
        train = ev.fold_split(feature_entries, args.fold).train if args.fold else feature_entries
        stats = ev.norm_stats_for(ev.load_segments(train, tax))
        save_norm_stats(out / f"norm_fold{args.fold}.hacf", stats)
    print(f"manifest={out / 'manifest.csv'}")
    return EXIT_OK


def _fold_data(manifest, fold: int, tax, context: int):
    entries = ev.read_manifest(manifest)
    if fold == 0:
        train_entries, test_entries = entries, []
    else:
        spec = ev.fold_split(entries, fold)
        train_entries, test_entries = spec.train, spec.test
    if not train_entries:
        raise DataError(f"fold {fold} leaves no training segments")
    train_segs = ev.load_segments(train_entries, tax, context)
    stats = ev.norm_stats_for(train_segs)
    train = ev.segments_to_frames(train_segs, stats)
    val = ev.segments_to_frames(ev.load_segments(test_entries, tax, context), stats) if test_entries else None
    return train, val, stats


def cmd_train(args) -> int:
    plan, run = resolve_train_config(args)
    tax = _taxonomy(run["taxonomy"])
    train, val, stats = _fold_data(run["manifest"], run["fold"], tax, run["context"])
    log.info("training %s on %d frames (fold %d)", plan.stage.value, len(train), run["fold"])
    net, history = train_stage(plan, train, val, tax)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(net, out)
    save_norm_stats(_sidecar(out, ".norm"), stats)
    history.write_csv(_sidecar(out, ".log.csv"))
    history.write_timing_csv(_sidecar(out, ".timing.csv"))
    write_run_manifest(_sidecar(out, ".run.txt"), plan, run)
    if history.epochs:
        last = history.epochs[-1]
        print(f"epoch {last.epoch}: train_loss={last.train_loss:.4f} val_frame_acc={last.val_frame_acc:.4f}")
    print(f"model={out}")
    return EXIT_OK


def _stats_for(model_path, manifest, fold, tax, context):
    side = _sidecar(model_path, ".norm")
    if side.exists():
        return load_norm_stats(side)
    entries = ev.read_manifest(manifest)
    train = ev.fold_split(entries, fold).train if fold else entries
    return ev.norm_stats_for(ev.load_segments(train, tax, context))


def cmd_evaluate(args) -> int:
    models = args.model
    folds = args.fold
    if len(models) != len(folds):
        raise UsageError(f"got {len(models)} --model and {len(folds)} --fold; give one model per fold")
    tax = _taxonomy(args.taxonomy)
    entries = ev.read_manifest(args.manifest)
    results = []
    class_names = None
    for model_path, fold in zip(models, folds):
        net = load_model(model_path)
        stats = _stats_for(model_path, args.manifest, fold, tax, args.context)
        try:
            spec = ev.fold_split(entries, fold)
        except ev.EvaluationError as exc:
            raise UsageError(str(exc)) from None
        if stats.dim != net.input_dim:
            raise UsageError(f"{model_path}: model expects {net.input_dim} inputs, norm stats have {stats.dim}")
        result = ev.evaluate_fold(net, spec, stats, tax, args.context)
        names = list(tax.high_classes) if result.confusion.counts.shape[0] == tax.num_high else list(tax.low_classes)
        if class_names is not None and names != class_names:
            raise UsageError("models disagree on the number of output classes")
        class_names = names
        results.append(result)
    report = ev.aggregate_cv(results)
    ev.write_report(report, args.out, class_names, results)
    print(ev.format_report(report, class_names), end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    net = load_model(args.model)
    tax = _taxonomy(args.taxonomy)
    path = Path(args.input)
    if path.suffix.lower() == ".wav":
        frames = wav_to_features(path).frames
    else:
        frames = read_feature_file(path)
    vectors = stack_context(MelFeatureSequence(frames, path.stem), args.context).vectors
    if vectors.shape[1] != net.input_dim:
        raise DataError(
            f"{path}: {frames.shape[1]}-dim features give {vectors.shape[1]}-dim inputs, "
            f"model expects {net.input_dim}"
        )
    side = _sidecar(args.model, ".norm")
    if side.exists():
        vectors = normalize(vectors, load_norm_stats(side))
    else:
        log.warning("no normalization stats next to %s; using raw features", args.model)
    p, _ = predict_proba(net, vectors)
    d = classify_segment(SegmentPosteriors(p, path.stem))
    names = tax.high_classes if net.num_classes == tax.num_high and not net.is_multi_level else tax.low_classes
    label = names[d.predicted_class] if d.predicted_class < len(names) else str(d.predicted_class)
    print(f"{label}\t{d.confidence:.6f}\t{d.margin:.6f}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hieracoustic", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--segments-per-class", type=int, default=20)
    s.add_argument("--frames-per-segment", type=int, default=100)
    s.add_argument("--noise-std", type=float, default=1.0)
    s.add_argument("--separation", type=float, default=8.0)
    s.add_argument("--class-spread", type=float, default=1.0)
    s.add_argument("--segment-jitter", type=float, default=0.3)
    s.add_argument("--wav", action="store_true", help="write sinusoid-mixture WAVs instead of features")
    s.add_argument("--seconds", type=float, default=2.0, help="WAV length in --wav mode")
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("features", help="extract log-mel features from WAVs")
    f.add_argument("--manifest", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--taxonomy")
    f.add_argument("--fold", type=int, help="also write norm stats of this fold's training part")
    f.add_argument("--frame-length", type=int, default=640)
    f.add_argument("--hop", type=int, default=320)
    f.add_argument("--window", choices=["hamming", "hann", "rectangular"], default="hamming")
    f.add_argument("--fft-size", type=int, default=1024)
    f.add_argument("--jobs", type=int, default=1)
    f.set_defaults(func=cmd_features)

    t = sub.add_parser("train", help="train one curriculum stage on one fold")
    t.add_argument("--config", help="key=value file; flags override it")
    t.add_argument("--manifest")
    t.add_argument("--taxonomy")
    t.add_argument("--fold", type=int)
    t.add_argument("--stage", choices=[s.value for s in Stage])
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--dropout-input", dest="dropout_input", type=float)
    t.add_argument("--dropout-hidden", dest="dropout_hidden", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--init-model", dest="init_model")
    t.add_argument("--hidden", help="hidden layer sizes, e.g. 500,500")
    t.add_argument("--patience", type=int, help="opt-in early stopping on validation frame accuracy")
    t.add_argument("--out", required=True, help="model file to write")
    t.set_defaults(func=cmd_train, context=None)

    e = sub.add_parser("evaluate", help="score models on their folds")
    e.add_argument("--manifest", required=True)
    e.add_argument("--taxonomy")
    e.add_argument("--model", action="append", required=True)
    e.add_argument("--fold", type=int, action="append", required=True)
    e.add_argument("--out", required=True, help="report directory")
    e.set_defaults(func=cmd_evaluate, context=11)

    r = sub.add_parser("predict", help="label one segment")
    r.add_argument("--model", required=True)
    r.add_argument("--input", required=True, help="16 kHz WAV or .hacf feature file")
    r.add_argument("--taxonomy")
    r.set_defaults(func=cmd_predict, context=11)
    return p


def _configure_logging():
    level = os.environ.get("HIERACOUSTIC_LOG", "error").lower()
    logging.basicConfig(
        level={"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(level, logging.ERROR),
        format="%(levelname)s %(name)s: %(message)s",
    )


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FeatureError, ev.EvaluationError, TaxonomyError, ModelFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NetworkError as exc:
        # e.g. non-finite weights after an epoch
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
