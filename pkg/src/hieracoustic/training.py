"""Three-stage curriculum: high-level DNN1, transfer to the 15-class DNN2,
then DNN3 with an extra high-level head trained on the weighted two-level loss.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .network import (
    DEFAULT_ALPHA,
    DEFAULT_DROPOUT_HIDDEN,
    DEFAULT_DROPOUT_INPUT,
    DEFAULT_HIDDEN,
    Activation,
    Network,
    NetworkError,
    OptimizerState,
    backward,
    batch_loss,
    build_network,
    check_alpha,
    forward,
    load_model,
    predict_proba,
    random_layer,
    save_model,
)
from .taxonomy import Taxonomy, default_taxonomy

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


class Stage(str, Enum):
    DNN1 = "dnn1"
    DNN2 = "dnn2"
    DNN3 = "dnn3"
    BASELINE = "baseline"


@dataclass
class FrameSet:
    """Context feature vectors with the low-level label of every frame.

    ``segment`` holds a per-frame segment index so frame posteriors can be
    grouped back into segments.
    """

    x: np.ndarray
    low: np.ndarray
    segment: np.ndarray | None = None

    def __post_init__(self):
        self.low = np.asarray(self.low, dtype=np.intp)
        if self.x.ndim != 2 or self.x.shape[0] != self.low.shape[0]:
            raise TrainingError(f"features {self.x.shape} and labels {self.low.shape} disagree")

    def __len__(self):
        return self.low.shape[0]


@dataclass
class TrainingPlan:
    stage: Stage = Stage.BASELINE
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    alpha: float = DEFAULT_ALPHA
    learning_rate: float = 0.005
    momentum: float = 0.9
    dropout_input: float = DEFAULT_DROPOUT_INPUT
    dropout_hidden: float = DEFAULT_DROPOUT_HIDDEN
    hidden_sizes: tuple[int, ...] = DEFAULT_HIDDEN
    init_model: str | None = None
    patience: int | None = None

    def __post_init__(self):
        self.stage = Stage(self.stage)
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)

    def problems(self) -> list[str]:
        """Every configuration error, not just the first."""
        out = []
        if self.epochs < 0:
            out.append(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.alpha <= 1.0:
            out.append(f"alpha must be in [0, 1], got {self.alpha}")
        if self.learning_rate <= 0:
            out.append(f"lr must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            out.append(f"momentum must be in [0, 1), got {self.momentum}")
        for name in ("dropout_input", "dropout_hidden"):
            rho = getattr(self, name)
            if not 0.0 <= rho < 1.0:
                out.append(f"{name} must be in [0, 1), got {rho}")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            out.append(f"hidden sizes must be positive, got {self.hidden_sizes}")
        if self.patience is not None and self.patience < 1:
            out.append(f"patience must be >= 1, got {self.patience}")
        return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_frame_acc: float
    seconds: float


@dataclass
class TrainingLog:
    seed: int
    stage: Stage
    epochs: list[EpochRecord] = field(default_factory=list)

    def write_csv(self, path) -> None:
        """Loss/accuracy log. Wall-clock goes to :meth:`write_timing_csv` so
        this file stays byte-identical across seeded reruns."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_frame_acc"])
            for r in self.epochs:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_frame_acc)])

    def write_timing_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "seconds"])
            for r in self.epochs:
                w.writerow([r.epoch, f"{r.seconds:.3f}"])


def stage_targets(stage: Stage, frames: FrameSet, taxonomy: Taxonomy) -> np.ndarray:
    """Integer targets of the primary head for ``stage``."""
    return taxonomy.lift_labels(frames.low) if stage is Stage.DNN1 else frames.low


def onehot_rows(labels, size, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), size), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def _init_rng(seed: int) -> np.random.Generator:
    # kept apart from the shuffling/dropout stream so attaching a head does
    # not shift the minibatch order
    return np.random.default_rng([seed, 1])


def hierarchical_transfer(dnn1: Network, num_low_classes: int = 15, seed: int = 0) -> Network:
    """Initial DNN2: DNN1's hidden layers copied exactly, fresh random
    ``num_low_classes``-way softmax head, no high-level head."""
    if not dnn1.hidden:
        raise TrainingError("transfer needs at least one hidden layer")
    top = dnn1.hidden[-1].out_dim
    if dnn1.head.in_dim != top:
        raise TrainingError(f"incompatible hidden dimensions: head reads {dnn1.head.in_dim}, top layer {top}")
    head = random_layer(top, num_low_classes, _init_rng(seed), Activation.SOFTMAX, dnn1.dtype)
    return Network(
        [layer.copy() for layer in dnn1.hidden], head, None, dnn1.dropout_input, dnn1.dropout_hidden
    )


def attach_high_head(dnn2: Network, num_high_classes: int = 3, seed: int = 0) -> Network:
    """Initial DNN3: every DNN2 parameter copied, plus a random
    ``num_high_classes``-way softmax head on the top hidden layer."""
    if dnn2.is_multi_level:
        raise TrainingError("network already has a high-level head")
    net = dnn2.copy()
    top = net.hidden[-1].out_dim if net.hidden else net.input_dim
    net.high_head = random_layer(top, num_high_classes, _init_rng(seed), Activation.SOFTMAX, net.dtype)
    return net


def initial_network(plan: TrainingPlan, input_dim: int, taxonomy: Taxonomy, init: Network | None = None) -> Network:
    """Build the starting network for ``plan.stage``.

    ``init`` (or ``plan.init_model``) is the previous stage's model: DNN1 for
    DNN2, DNN2 for DNN3. DNN1 and baseline start from random weights.
    """
    if init is None and plan.init_model:
        init = load_model(plan.init_model)
    stage = plan.stage
    if stage in (Stage.DNN1, Stage.BASELINE):
        if init is not None:
            raise TrainingError(f"stage {stage.value} starts from random weights; drop the init model")
        n_out = taxonomy.num_high if stage is Stage.DNN1 else taxonomy.num_low
        net = build_network(
            input_dim, n_out, plan.hidden_sizes, seed=_init_rng(plan.seed),
            dropout_input=plan.dropout_input, dropout_hidden=plan.dropout_hidden,
        )
    elif stage is Stage.DNN2:
        if init is None:
            raise TrainingError("dnn2 needs a trained dnn1 model (use stage 'baseline' for random init)")
        if init.num_classes != taxonomy.num_high or init.is_multi_level:
            raise TrainingError(
                f"dnn2 transfers from a {taxonomy.num_high}-way single-head dnn1, got {init.num_classes}-way"
            )
        net = hierarchical_transfer(init, taxonomy.num_low, plan.seed)
    else:
        if init is None:
            raise TrainingError("dnn3 needs a trained dnn2 model")
        if init.num_classes != taxonomy.num_low:
            raise TrainingError(f"dnn3 builds on a {taxonomy.num_low}-way dnn2, got {init.num_classes}-way")
        net = attach_high_head(init, taxonomy.num_high, plan.seed)
    if net.input_dim != input_dim:
        raise TrainingError(f"network expects {net.input_dim} inputs, data has {input_dim}")
    net.dropout_input = float(np.float32(plan.dropout_input))
    net.dropout_hidden = float(np.float32(plan.dropout_hidden))
    return net


def frame_accuracy(net: Network, frames: FrameSet, targets) -> float:
    if len(frames) == 0:
        return float("nan")
    p, _ = predict_proba(net, frames.x)
    return float(np.mean(np.argmax(p, axis=1) == np.asarray(targets)))


def fit(
    net: Network,
    plan: TrainingPlan,
    train: FrameSet,
    val: FrameSet | None = None,
    taxonomy: Taxonomy | None = None,
) -> TrainingLog:
    """Train ``net`` in place with momentum SGD over shuffled minibatches.

    Single-head networks are trained against the stage's targets; a
    multi-level network trains both heads with the alpha-weighted loss.
    """
    taxonomy = taxonomy or default_taxonomy()
    problems = plan.problems()
    if problems:
        raise TrainingError("; ".join(problems))
    if len(train) == 0:
        raise TrainingError("empty training set")
    check_alpha(plan.alpha)

    y = stage_targets(plan.stage, train, taxonomy)
    y_high = taxonomy.lift_labels(train.low) if net.is_multi_level else None
    if y.max() >= net.num_classes:
        raise TrainingError(f"labels reach {y.max()}, head has {net.num_classes} outputs")
    y_val = None if val is None else stage_targets(plan.stage, val, taxonomy)

    rng = np.random.default_rng(plan.seed)
    opt = OptimizerState(plan.learning_rate, plan.momentum)
    history = TrainingLog(plan.seed, plan.stage)
    best = (-1.0, None)
    since_best = 0
    n = len(train)
    dtype = net.dtype
    x_all = np.asarray(train.x, dtype=dtype)
    for epoch in range(1, plan.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, plan.batch_size):
            idx = order[start : start + plan.batch_size]
            d_low = onehot_rows(y[idx], net.num_classes, dtype)
            d_high = None if y_high is None else onehot_rows(y_high[idx], net.high_head.out_dim, dtype)
            cache = forward(net, x_all[idx], train=True, rng=rng)
            total += batch_loss(net, cache, d_low, d_high, plan.alpha) * len(idx)
            opt.step(net, backward(net, cache, d_low, d_high, plan.alpha))
        if not all(np.all(np.isfinite(p)) for p in net.parameters()):
            raise NetworkError(f"non-finite parameters after epoch {epoch}")
        acc = float("nan") if val is None else frame_accuracy(net, val, y_val)
        rec = EpochRecord(epoch, total / n, acc, time.perf_counter() - t0)
        history.epochs.append(rec)
        log.info("%s epoch %d loss %.4f val_acc %.4f", plan.stage.value, epoch, rec.train_loss, acc)

        if plan.patience is not None and val is not None:
            if acc > best[0]:
                best, since_best = (acc, net.copy()), 0
            else:
                since_best += 1
                if since_best >= plan.patience:
                    log.info("early stop at epoch %d (best val acc %.4f)", epoch, best[0])
                    break
    if plan.patience is not None and best[1] is not None:
        restored = best[1]
        for dst, src in zip(net.parameters(), restored.parameters()):
            dst[...] = src
    return history


def train_stage(
    plan: TrainingPlan,
    train: FrameSet,
    val: FrameSet | None = None,
    taxonomy: Taxonomy | None = None,
    init: Network | None = None,
) -> tuple[Network, TrainingLog]:
    taxonomy = taxonomy or default_taxonomy()
    problems = plan.problems()
    if problems:
        raise TrainingError("; ".join(problems))
    if len(train) == 0:
        raise TrainingError("empty training set")
    net = initial_network(plan, train.x.shape[1], taxonomy, init)
    history = fit(net, plan, train, val, taxonomy)
    return net, history


@dataclass
class CurriculumResult:
    dnn1: Network | None
    dnn2: Network
    dnn3: Network
    logs: dict[str, TrainingLog]


def run_curriculum(
    plan: TrainingPlan,
    train: FrameSet,
    val: FrameSet | None = None,
    taxonomy: Taxonomy | None = None,
    pretrain: bool = True,
    out_dir=None,
    stage_epochs: dict[Stage, int] | None = None,
) -> CurriculumResult:
    """DNN1 -> transfer -> DNN2 -> attach high head -> DNN3.

    ``plan`` supplies the shared hyperparameters; its stage and init model
    are overridden per stage. With ``pretrain=False`` DNN2 starts from random
    weights (the plain baseline). ``stage_epochs`` overrides the epoch count
    per stage. Models and logs are written to ``out_dir`` when given.
    """
    taxonomy = taxonomy or default_taxonomy()
    stage_epochs = stage_epochs or {}

    def stage_plan(stage):
        return replace(plan, stage=stage, init_model=None, epochs=stage_epochs.get(stage, plan.epochs))

    logs = {}
    dnn1 = None
    if pretrain:
        dnn1, logs["dnn1"] = train_stage(stage_plan(Stage.DNN1), train, val, taxonomy)
        dnn2, logs["dnn2"] = train_stage(stage_plan(Stage.DNN2), train, val, taxonomy, init=dnn1)
    else:
        dnn2, logs["dnn2"] = train_stage(stage_plan(Stage.BASELINE), train, val, taxonomy)
    dnn3, logs["dnn3"] = train_stage(stage_plan(Stage.DNN3), train, val, taxonomy, init=dnn2)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, net in (("dnn1", dnn1), ("dnn2", dnn2), ("dnn3", dnn3)):
            if net is None:
                continue
            save_model(net, out / f"{name}.hacm")
            logs[name].write_csv(out / f"{name}_log.csv")
            logs[name].write_timing_csv(out / f"{name}_timing.csv")
    return CurriculumResult(dnn1, dnn2, dnn3, logs)
