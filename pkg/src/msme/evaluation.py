"""Pixel metrics, marker-combination lattice algebra, metric tables, and
model-level evaluation through the tiling pipeline."""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .attention import MarkerAvailability, excitation_vector, MEModule, sample_markers
from .errors import ContractError, DimensionError, InfeasibilityError
from .tiling import decompose, stitch


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, truth, region=None) -> ConfusionCounts:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} differ")
    if region is not None:
        region = np.asarray(region, dtype=bool)
        pred, truth = pred[region], truth[region]
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, fp, fn, int(pred.size) - tp - fp - fn)


def f1(counts: ConfusionCounts) -> float:
    """``2TP / (2TP + FP + FN)``; 1.0 when there is nothing to find and nothing found."""
    denom = 2 * counts.tp + counts.fp + counts.fn
    return 1.0 if denom == 0 else 2 * counts.tp / denom


# ---------------------------------------------------------------------------
# combination lattice
# ---------------------------------------------------------------------------


def combination_name(mask: int) -> str:
    digits = []
    k = 1
    while mask:
        if mask & 1:
            digits.append(str(k))
        mask >>= 1
        k += 1
    return "m_" + "".join(digits)


def parse_combination(text, K: Optional[int] = None) -> int:
    """``"124"``, ``"m_124"``, ``[1, 2, 4]`` or an int bitmask -> bitmask."""
    if isinstance(text, (int, np.integer)):
        mask = int(text)
    else:
        if isinstance(text, str):
            s = text.strip()
            s = s[2:] if s.startswith("m_") else s
            markers = [int(ch) for ch in s.replace(",", "")]
        else:
            markers = [int(m) for m in text]
        if not markers or any(m < 1 for m in markers):
            raise ContractError(f"invalid marker combination {text!r}")
        mask = 0
        for m in markers:
            mask |= 1 << (m - 1)
    if mask <= 0:
        raise ContractError("marker combinations must be non-empty")
    if K is not None and mask >= 1 << K:
        raise ContractError(f"combination {combination_name(mask)} uses markers beyond K={K}")
    return mask


def as_mask(markers) -> int:
    if isinstance(markers, MarkerAvailability):
        return markers.mask
    return parse_combination(markers)


class CombinationLattice:
    """All non-empty marker subsets of ``{1..K}``, ordered by bitmask."""

    def __init__(self, K: int):
        self.K = K

    def masks(self) -> list:
        return list(range(1, 1 << self.K))

    def __iter__(self):
        return iter(self.masks())

    def __len__(self):
        return (1 << self.K) - 1

    def availability(self, mask: int) -> MarkerAvailability:
        return MarkerAvailability.from_mask(mask, self.K)

    def names(self) -> list:
        return [combination_name(m) for m in self.masks()]


def _nonempty_submasks(mask: int) -> set:
    out, sub = set(), mask
    while sub:
        out.add(sub)
        sub = (sub - 1) & mask
    return out


def compute_M_UB(assignment: Iterable) -> set:
    """Combinations contained in at least one training sample's marker set."""
    out = set()
    for m in assignment:
        out |= _nonempty_submasks(as_mask(m))
    return out


def compute_M_total(assignment: Iterable):
    """All combinations over the union of assigned markers, plus ``|M_UB| / |M_total|``."""
    assignment = [as_mask(m) for m in assignment]
    union = 0
    for m in assignment:
        union |= m
    total = _nonempty_submasks(union)
    ratio = len(compute_M_UB(assignment)) / len(total) if total else 0.0
    return total, ratio


# ---------------------------------------------------------------------------
# metric tables
# ---------------------------------------------------------------------------

CSV_HEADER = ["model", "class", "fold", "combination", "tp", "fp", "fn", "tn", "f1"]


@dataclass(frozen=True)
class MetricRow:
    model: str
    class_index: int
    fold: int
    combination: int
    counts: ConfusionCounts
    f1: float

    @property
    def key(self):
        return (self.model, self.class_index, self.fold, self.combination)


class MetricTable:
    def __init__(self, rows: Iterable[MetricRow] = ()):
        self._rows: dict = {}
        for r in rows:
            self.add(r)

    def add(self, row: MetricRow):
        if row.key in self._rows:
            raise ContractError(f"duplicate metric row {row.key}")
        self._rows[row.key] = row

    def record(self, model, class_index, fold, combination, counts: ConfusionCounts):
        self.add(MetricRow(model, int(class_index), int(fold), int(combination), counts, f1(counts)))

    def extend(self, other: "MetricTable"):
        for r in other:
            self.add(r)

    @property
    def rows(self) -> list:
        return sorted(self._rows.values(), key=lambda r: (r.model, r.class_index, r.fold, r.combination))

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self._rows)

    def models(self) -> list:
        return sorted({r.model for r in self._rows.values()})

    def select(self, model=None, class_index=None, fold=None, combination=None) -> "MetricTable":
        def ok(r):
            return ((model is None or r.model == model) and (class_index is None or r.class_index == class_index)
                    and (fold is None or r.fold == fold) and (combination is None or r.combination == combination))
        return MetricTable(r for r in self._rows.values() if ok(r))

    def f1_values(self) -> np.ndarray:
        return np.asarray([r.f1 for r in self.rows])

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in self.rows:
                c = r.counts
                w.writerow([r.model, r.class_index, r.fold, combination_name(r.combination),
                            c.tp, c.fp, c.fn, c.tn, repr(float(r.f1))])
        return path

    @classmethod
    def from_csv(cls, path) -> "MetricTable":
        table = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != CSV_HEADER:
                raise ContractError(f"{path}: expected header {CSV_HEADER}, got {reader.fieldnames}")
            for row in reader:
                counts = ConfusionCounts(int(row["tp"]), int(row["fp"]), int(row["fn"]), int(row["tn"]))
                table.add(MetricRow(row["model"], int(row["class"]), int(row["fold"]),
                                    parse_combination(row["combination"]), counts, float(row["f1"])))
        return table


@dataclass
class RelativeScores:
    diffs: np.ndarray
    keys: list
    unmatched_candidate: list
    unmatched_reference: list


def relative_scores(candidate: MetricTable, reference: MetricTable,
                    aggregate_classes: bool = False) -> RelativeScores:
    """Paired F1 differences ``candidate - reference`` over matching (class, fold, combination).

    With ``aggregate_classes`` the pairs are matched on (fold, combination)
    and the per-class F1 values are averaged first.
    """
    def index(table):
        groups: dict = {}
        for r in table:
            key = (r.fold, r.combination) if aggregate_classes else (r.class_index, r.fold, r.combination)
            groups.setdefault(key, []).append(r.f1)
        return {k: float(np.mean(v)) for k, v in groups.items()}

    cand, ref = index(candidate), index(reference)
    keys = sorted(set(cand) & set(ref))
    if not keys:
        raise ContractError("candidate and reference tables share no (class, fold, combination) keys")
    diffs = np.asarray([cand[k] - ref[k] for k in keys])
    return RelativeScores(diffs, keys, sorted(set(cand) - set(ref)), sorted(set(ref) - set(cand)))


def quantify_fraction(prediction, tissue) -> float:
    """Fraction of tissue pixels occupied by the predicted structure."""
    prediction = np.asarray(prediction, dtype=bool)
    tissue = np.asarray(tissue, dtype=bool)
    if prediction.shape != tissue.shape:
        raise DimensionError(f"prediction {prediction.shape} and tissue {tissue.shape} differ")
    n = int(tissue.sum())
    if n == 0:
        raise ContractError("tissue mask is empty")
    return int((prediction & tissue).sum()) / n


# ---------------------------------------------------------------------------
# model-level evaluation
# ---------------------------------------------------------------------------


def _softmax(z):
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def predict_sample(model, sample, combination: int, geometry=None) -> np.ndarray:
    """Class probabilities ``[2,Z,H,W]`` for a standardized sample.

    Channels outside ``combination`` are removed with the model's
    inference-time sampling rule before tiling.
    """
    K = model.cfg.K
    v = MarkerAvailability.from_mask(combination, K)
    policy = model.cfg.sampling_policy()
    Z, H, W = sample.shape
    if geometry is None:
        geometry = _auto_geometry(model, (H, W))
    vol = np.empty_like(sample.channels)
    for z in range(Z):
        vol[:, z], _ = sample_markers(sample.channels[:, z], policy, None, "infer", v)
    patches, grid = decompose(vol, geometry)
    probs = [_softmax(model.forward(p, v).data) for p in patches]
    return stitch(probs, grid)


def _auto_geometry(model, hw):
    from .models import geometry_for_output
    return geometry_for_output(model.cfg, min(hw))


def evaluate_model(model, samples, class_index: int, fold: int, combinations, model_name: str,
                   geometry=None, table: Optional[MetricTable] = None) -> MetricTable:
    """Pool pixel counts over ``samples`` for every combination and append rows.

    ``samples`` must be standardized and carry labels; a combination is only
    evaluated on markers every sample provides.
    """
    table = MetricTable() if table is None else table
    for mask in combinations:
        total = ConfusionCounts()
        for s in samples:
            if mask & ~s.availability_mask:
                raise InfeasibilityError(f"sample {s.id} lacks markers of {combination_name(mask)}")
            prob = predict_sample(model, s, mask, geometry)
            pred = prob[1] > prob[0]
            total = total + confusion(pred, s.labels[class_index - 1].astype(bool))
        table.record(model_name, class_index, fold, mask, total)
    return table


def _me_modules(model) -> list:
    return [(n, m) for n, m in model.attention_modules() if isinstance(m, MEModule)]


def analyze_recalibration(model, lattice: Optional[CombinationLattice] = None) -> list:
    """Mean and std of pairwise cosine distances between ME outputs per layer.

    Returns ``[(layer_name, mean, std, n_pairs)]`` ordered from the input
    and highest resolution downward.
    """
    modules = _me_modules(model)
    if not modules:
        raise ContractError("model has no ME modules")
    lattice = lattice or CombinationLattice(model.cfg.K)
    out = []
    for name, module in modules:
        vecs = np.stack([excitation_vector(lattice.availability(m), module).data.astype(np.float64)
                         for m in lattice])
        norms = np.linalg.norm(vecs, axis=1)
        dists = []
        for i, j in itertools.combinations(range(len(vecs)), 2):
            if np.array_equal(vecs[i], vecs[j]):
                dists.append(0.0)
                continue
            cos = vecs[i] @ vecs[j] / max(norms[i] * norms[j], 1e-300)
            dists.append(float(np.clip(1.0 - cos, 0.0, 2.0)))
        d = np.asarray(dists)
        out.append((name, float(d.mean()), float(d.std()), len(d)))
    return out
