"""Two-level scene taxonomy: 15 low-level scenes under 3 high-level classes."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

HIGH_CLASSES = ("indoor", "outdoor", "vehicle")

# DCASE 2016 task 1 scenes in C1..C15 order with their high-level parent
DCASE2016_SCENES = (
    ("beach", "outdoor"),
    ("bus", "vehicle"),
    ("cafe/restaurant", "indoor"),
    ("car", "vehicle"),
    ("city_center", "outdoor"),
    ("forest_path", "outdoor"),
    ("grocery_store", "indoor"),
    ("home", "indoor"),
    ("library", "indoor"),
    ("metro_station", "indoor"),
    ("office", "indoor"),
    ("park", "outdoor"),
    ("residential_area", "outdoor"),
    ("train", "vehicle"),
    ("tram", "vehicle"),
)


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class Taxonomy:
    low_classes: tuple[str, ...]
    high_classes: tuple[str, ...]
    parent: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.low_classes)) != len(self.low_classes):
            raise TaxonomyError("duplicate low-level class name")
        if len(set(self.high_classes)) != len(self.high_classes):
            raise TaxonomyError("duplicate high-level class name")
        if len(self.parent) != len(self.low_classes):
            raise TaxonomyError("every low-level class needs exactly one parent")
        if any(not 0 <= p < len(self.high_classes) for p in self.parent):
            raise TaxonomyError("parent index out of range")
        childless = set(range(len(self.high_classes))) - set(self.parent)
        if childless:
            names = ", ".join(self.high_classes[i] for i in sorted(childless))
            raise TaxonomyError(f"high-level class without children: {names}")

    @property
    def num_low(self) -> int:
        return len(self.low_classes)

    @property
    def num_high(self) -> int:
        return len(self.high_classes)

    @property
    def parent_array(self) -> np.ndarray:
        return np.asarray(self.parent, dtype=np.intp)

    def children(self, high_index: int) -> list[int]:
        return [j for j, p in enumerate(self.parent) if p == high_index]

    def low_index(self, name: str) -> int:
        try:
            return self.low_classes.index(name)
        except ValueError:
            raise TaxonomyError(f"unknown low-level class {name!r}") from None

    def parent_of(self, low_index: int) -> int:
        if not 0 <= low_index < self.num_low:
            raise TaxonomyError(f"low-level index {low_index} out of range [0, {self.num_low})")
        return self.parent[low_index]

    def lift_labels(self, low_labels) -> np.ndarray:
        """Map integer low-level labels to their high-level parents."""
        return self.parent_array[np.asarray(low_labels, dtype=np.intp)]


@dataclass(frozen=True)
class LabelTarget:
    low_onehot: np.ndarray
    high_onehot: np.ndarray


def default_taxonomy() -> Taxonomy:
    """The DCASE 2016 scenes as C1..C15 grouped into indoor/outdoor/vehicle."""
    return Taxonomy(
        low_classes=tuple(f"C{i + 1}" for i in range(len(DCASE2016_SCENES))),
        high_classes=HIGH_CLASSES,
        parent=tuple(HIGH_CLASSES.index(h) for _, h in DCASE2016_SCENES),
    )


def dcase_label_to_code(label: str) -> str:
    """``'bus'`` -> ``'C2'``; accepts C-codes unchanged."""
    names = [name for name, _ in DCASE2016_SCENES]
    if label in names:
        return f"C{names.index(label) + 1}"
    return label


def onehot(index: int, size: int) -> np.ndarray:
    v = np.zeros(size)
    v[index] = 1.0
    return v


def lift_target(low_onehot, taxonomy: Taxonomy | None = None) -> LabelTarget:
    taxonomy = taxonomy or default_taxonomy()
    d = np.asarray(low_onehot, dtype=np.float64)
    if d.shape != (taxonomy.num_low,) or np.count_nonzero(d) != 1 or d.max() != 1.0:
        raise TaxonomyError(f"expected a one-hot vector of length {taxonomy.num_low}")
    high = taxonomy.parent_of(int(np.argmax(d)))
    return LabelTarget(d.copy(), onehot(high, taxonomy.num_high))


def load_taxonomy(path) -> Taxonomy:
    """Read a ``low,high`` CSV; row order fixes the low-level class indices.

    High-level classes keep the indoor/outdoor/vehicle order when those are
    the names used, otherwise order of first appearance.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["low", "high"]:
            raise TaxonomyError(f"{path}: header must be 'low,high'")
        rows = [(r["low"].strip(), (r["high"] or "").strip()) for r in reader]
    if not rows:
        raise TaxonomyError(f"{path}: no classes")
    lows = [low for low, _ in rows]
    dupes = sorted({x for x in lows if lows.count(x) > 1})
    if dupes:
        raise TaxonomyError(f"{path}: duplicate low class {', '.join(dupes)}")
    missing = [low for low, high in rows if not high]
    if missing:
        raise TaxonomyError(f"{path}: missing parent for {', '.join(missing)}")
    seen = list(dict.fromkeys(high for _, high in rows))
    if set(seen) <= set(HIGH_CLASSES) and len(seen) == len(HIGH_CLASSES):
        highs = HIGH_CLASSES
    else:
        highs = tuple(seen)
    return Taxonomy(tuple(lows), tuple(highs), tuple(highs.index(h) for _, h in rows))


def load_taxonomy_strict(path, high_classes=HIGH_CLASSES) -> Taxonomy:
    """Like :func:`load_taxonomy` but rejects parents outside ``high_classes``."""
    tax = load_taxonomy(path)
    unknown = sorted(set(tax.high_classes) - set(high_classes))
    if unknown:
        raise TaxonomyError(f"{path}: unknown high class {', '.join(unknown)}")
    return Taxonomy(
        tax.low_classes,
        tuple(high_classes),
        tuple(high_classes.index(tax.high_classes[p]) for p in tax.parent),
    )


def save_taxonomy(path, taxonomy: Taxonomy) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["low", "high"])
        for name, p in zip(taxonomy.low_classes, taxonomy.parent):
            w.writerow([name, taxonomy.high_classes[p]])
