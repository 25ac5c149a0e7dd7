"""
Pre-training on the coarse classes first
========================================

DNN1 learns indoor/outdoor/vehicle. Its hidden layers then seed DNN2, which
gets a fresh 15-way head. A randomly initialized DNN2 is trained alongside
for comparison. Takes about a minute on one core.
"""

# %%
import tempfile
from dataclasses import replace

import numpy as np

from hieracoustic import evaluation as ev
from hieracoustic.taxonomy import default_taxonomy
from hieracoustic.training import Stage, TrainingPlan, hierarchical_transfer, train_stage

tax = default_taxonomy()
for h, name in enumerate(tax.high_classes):
    print(f"{name:8s}", [tax.low_classes[j] for j in tax.children(h)])

# %%
# A synthetic corpus stands in for log-mel features: three well separated
# super-clusters with four to six classes around each.
work = tempfile.mkdtemp()
manifest = ev.generate_synthetic_corpus(ev.SyntheticCorpusConfig(seed=0, segments_per_class=12), work)
fold = ev.fold_split(ev.read_manifest(manifest), 1)
train_segs = ev.load_segments(fold.train, tax)
stats = ev.norm_stats_for(train_segs)
train = ev.segments_to_frames(train_segs, stats)
val = ev.segments_to_frames(ev.load_segments(fold.test, tax), stats)
print(len(train), "training frames,", len(val), "validation frames")

# %%
# Stage 1: the 3-way network. The coarse task is easy here.
plan = TrainingPlan(hidden_sizes=(256, 256), seed=0)
dnn1, log1 = train_stage(replace(plan, stage=Stage.DNN1, epochs=2), train, val, tax)
print("DNN1 high-level frame accuracy per epoch:", [round(e.val_frame_acc, 3) for e in log1.epochs])

# %%
# The transfer copies every hidden weight and bias; only the head is new.
init = hierarchical_transfer(dnn1, tax.num_low, seed=0)
print("hidden layers identical:", all(np.array_equal(a.W, b.W) for a, b in zip(dnn1.hidden, init.hidden)))

# %%
# Stage 2 from the transferred weights versus from scratch.
dnn2, log2 = train_stage(replace(plan, stage=Stage.DNN2, epochs=4), train, val, tax, init=dnn1)
base, logb = train_stage(replace(plan, stage=Stage.BASELINE, epochs=4), train, val, tax)
for name, lg in (("transfer", log2), ("random", logb)):
    print(f"{name:8s}", [round(e.val_frame_acc, 3) for e in lg.epochs])
