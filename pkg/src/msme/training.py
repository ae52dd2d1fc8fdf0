"""Loss, class weights, Adam, the epoch loop, folds, UB ensembles, and
heterogeneous training plans."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import _kernels as K
from .attention import MarkerAvailability, sample_markers
from .data import standardize
from .errors import ContractError, InfeasibilityError, NumericError
from .evaluation import (ConfusionCounts, combination_name, compute_M_UB, compute_M_total, confusion, f1,
                         parse_combination)
from .models import ModelConfig, build_model, geometry_for_output, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, backprop, record, scale
from .tiling import decompose, output_tiles

LOG_HEADER = ["epoch", "train_loss", "val_loss", "train_f1", "val_f1"]


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-8
    weight_floor: float = 0.05

    def __post_init__(self):
        if not (self.epsilon > 0 and self.weight_floor > 0):
            raise ContractError("epsilon and weight_floor must be positive")


def class_weights_raw(pixel_counts, cfg: LossConfig = LossConfig()) -> np.ndarray:
    counts = np.asarray(pixel_counts, dtype=np.float64)
    if (counts <= 0).any():
        raise ContractError(f"every class needs annotated pixels, got counts {counts.tolist()}")
    C = counts.size
    return np.log(cfg.epsilon + counts.sum() / (C * counts))


def class_weights(pixel_counts, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Logarithmic class weights, clamped below at ``cfg.weight_floor``."""
    return np.maximum(cfg.weight_floor, class_weights_raw(pixel_counts, cfg))


def weighted_ce(logits: Tensor, labels, W) -> Tensor:
    """Class-weighted softmax cross-entropy summed over pixels (to be minimized)."""
    z = logits.data
    if not np.isfinite(z).all():
        raise NumericError("non-finite logits")
    labels = np.asarray(labels)
    if labels.shape != z.shape:
        raise ContractError(f"labels {labels.shape} do not match logits {z.shape}")
    total, grad = K.weighted_ce(z, labels, W)
    out = np.asarray(total, dtype=z.dtype).reshape(())
    return record("weighted_ce", out, (logits,), lambda g: (grad * g,))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_registry(cls, registry, **kw) -> "AdamState":
        state = cls(**kw)
        state.m = [np.zeros(p.shape, dtype=p.tensor.dtype) for p in registry]
        state.v = [np.zeros(p.shape, dtype=p.tensor.dtype) for p in registry]
        return state


def adam_step(state: AdamState, registry) -> None:
    """One bias-corrected Adam update using each parameter's ``.grad`` (None = 0)."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for i, p in enumerate(registry):
        g = p.tensor.grad
        m, v = state.m[i], state.v[i]
        if g is None:
            m *= b1
            v *= b2
        else:
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
        if state.lr == 0:
            continue
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps_adam)
        p.tensor.data = (p.tensor.data - step).astype(p.tensor.dtype, copy=False)


# ---------------------------------------------------------------------------
# plans, patches, folds
# ---------------------------------------------------------------------------


@dataclass
class TrainPlan:
    epochs: int = 200
    batch_size: int = 2
    folds: int = 4
    fold: int = 0
    class_index: int = 1
    marker_assignment: dict = field(default_factory=dict)   # sample id -> bitmask
    shuffle_assignment_per_fold: bool = True
    lr: float = 1e-3
    seed: int = 0
    val_mode: str = "full"
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.val_mode not in ("full", "combinations"):
            raise ContractError(f"val_mode must be 'full' or 'combinations', got {self.val_mode!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")


def fold_split(n_samples: int, folds: int, fold: int):
    """Sample indices ``(train, val, test)`` for one cross-validation fold.

    Test sets are the contiguous ``array_split`` chunks, so every sample is
    tested exactly once; validation is the first sample after the test chunk.
    """
    if folds < 2 or n_samples < folds + 1:
        raise ContractError(f"cannot split {n_samples} samples into {folds} folds with a validation sample")
    if not 0 <= fold < folds:
        raise ContractError(f"fold {fold} outside 0..{folds - 1}")
    chunks = np.array_split(np.arange(n_samples), folds)
    test = [int(i) for i in chunks[fold]]
    val = [int((test[-1] + 1) % n_samples)]
    train = [i for i in range(n_samples) if i not in test and i not in val]
    return train, val, test


def make_case_plan(case_spec, fold: int, sample_ids=None, test_markers=None, **plan_kwargs) -> TrainPlan:
    """Assign marker subsets to training samples, rotating the list by ``fold``.

    ``case_spec`` lists one subset per training sample (digit strings,
    marker lists or bitmasks). ``test_markers`` (a bitmask or list) must be
    covered by the union of the subsets.
    """
    masks = [parse_combination(s) for s in case_spec]
    if not masks:
        raise ContractError("case spec is empty")
    union = 0
    for m in masks:
        union |= m
    if test_markers is not None:
        need = parse_combination(test_markers) if not isinstance(test_markers, int) else test_markers
        if need & ~union:
            total, _ = compute_M_total(masks)
            raise InfeasibilityError(
                f"markers {combination_name(need & ~union)} are never present in training; "
                f"M_total covers {sorted(combination_name(t) for t in total)}")
    shift = fold % len(masks) if plan_kwargs.get("shuffle_assignment_per_fold", True) else 0
    rotated = masks[shift:] + masks[:shift]
    ids = list(sample_ids) if sample_ids is not None else list(range(len(masks)))
    if len(ids) != len(rotated):
        raise ContractError(f"{len(ids)} sample ids for {len(rotated)} case subsets")
    return TrainPlan(fold=fold, marker_assignment=dict(zip(ids, rotated)), **plan_kwargs)


@dataclass
class PatchSet:
    inputs: list          # [K,h_in,w_in] float32
    labels: list          # [2,h_out,w_out] one-hot float32 (background, class)
    provided: list        # MarkerAvailability per patch
    sample_ids: list

    def __len__(self):
        return len(self.inputs)

    def pixel_counts(self) -> np.ndarray:
        return np.asarray([sum(float(l[c].sum()) for l in self.labels) for c in range(2)])


def build_patches(samples, geometry, class_index: int, assignment: Optional[dict] = None,
                  prepared: bool = False) -> PatchSet:
    """Tile samples into training patches for a per-class binary model.

    ``assignment`` maps sample id to a bitmask restricting the markers that
    sample contributes. Samples are standardized unless ``prepared``.
    """
    ps = PatchSet([], [], [], [])
    for s in samples:
        mask = s.availability_mask
        if assignment and s.id in assignment:
            mask &= assignment[s.id]
        if mask == 0:
            raise ContractError(f"sample {s.id}: assigned markers are not available in the sample")
        if s.labels is None:
            raise ContractError(f"sample {s.id} has no labels")
        st = s if prepared else standardize(s)
        avail = MarkerAvailability.from_mask(mask, s.K)
        bits = np.asarray(avail.bits, dtype=bool)
        chans = st.channels.copy()
        chans[~bits] = 0
        patches, grid = decompose(chans, geometry)
        fg = s.labels[class_index - 1][None].astype(np.float32)
        tiles = output_tiles(fg, grid)
        for p, t in zip(patches, tiles):
            ps.inputs.append(p.astype(np.float32))
            ps.labels.append(np.concatenate([1.0 - t, t]))
            ps.provided.append(avail)
            ps.sample_ids.append(s.id)
    return ps


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    weights: list
    best_val_f1: float
    epoch: int

    def model(self):
        m = build_model(self.config)
        m.registry.restore(self.weights)
        return m

    def save(self, prefix):
        return save_checkpoint(self.model(), prefix, best_val_f1=self.best_val_f1, epoch=self.epoch)

    @classmethod
    def load(cls, prefix) -> "Checkpoint":
        model, meta = load_checkpoint(prefix)
        return cls(model.cfg, model.registry.snapshot(), float(meta.get("best_val_f1", float("nan"))),
                   int(meta.get("epoch", -1)))


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    train_f1: float
    val_f1: float


def write_log(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.train_f1), repr(r.val_f1)])
    return path


def _pred_counts(logits: np.ndarray, onehot: np.ndarray) -> ConfusionCounts:
    return confusion(logits[1] > logits[0], onehot[1] > 0.5)


def _evaluate_patches(model, patches: PatchSet, W, combos=None):
    """Mean per-pixel loss and pooled F1 on ``patches`` at inference phase."""
    policy = model.cfg.sampling_policy()
    loss, counts, n = 0.0, ConfusionCounts(), 0
    for x, y, prov in zip(patches.inputs, patches.labels, patches.provided):
        for mask in combos or [prov.mask]:
            xin, v = sample_markers(x, policy, None, "infer", MarkerAvailability.from_mask(mask, prov.K))
            logits = model.forward(xin, v)
            loss += weighted_ce(logits, y, W).item() / y[0].size
            counts = counts + _pred_counts(logits.data, y)
            n += 1
    return loss / max(n, 1), f1(counts)


def train(model, plan: TrainPlan, data, rng: Optional[np.random.Generator] = None, log_path=None):
    """Fit ``model`` on ``data = (train PatchSet, val PatchSet)``.

    Epoch 0 evaluates the initial weights; epochs ``1..plan.epochs`` each
    make one shuffled pass. The returned checkpoint holds the weights of the
    first epoch reaching the best validation F1, and those weights are also
    loaded back into ``model``. Returns ``(checkpoint, log_rows)``.
    """
    train_set, val_set = data
    if len(train_set) == 0 or len(val_set) == 0:
        raise ContractError("training and validation splits must be non-empty")
    rng = np.random.default_rng(plan.seed) if rng is None else rng
    W = class_weights(train_set.pixel_counts(), plan.loss).astype(model.dtype)
    policy = model.cfg.sampling_policy()
    reg = model.registry
    opt = AdamState.for_registry(reg, lr=plan.lr)
    val_combos = None
    if plan.val_mode == "combinations":
        val_combos = list(range(1, 1 << model.cfg.K))

    log = []
    tr_loss, tr_f1 = _evaluate_patches(model, train_set, W)
    va_loss, va_f1 = _evaluate_patches(model, val_set, W, val_combos)
    log.append(EpochLog(0, tr_loss, va_loss, tr_f1, va_f1))
    best = (va_f1, 0, reg.snapshot())

    for epoch in range(1, plan.epochs + 1):
        order = rng.permutation(len(train_set))
        ep_loss, ep_counts = 0.0, ConfusionCounts()
        for start in range(0, len(order), plan.batch_size):
            batch = order[start:start + plan.batch_size]
            reg.zero_grad()
            for i in batch:
                x, y = train_set.inputs[i], train_set.labels[i]
                xin, v = sample_markers(x, policy, rng, "train", train_set.provided[i])
                assert v.popcount > 0
                with Tape() as tape:
                    logits = model.forward(xin, v)
                    loss = weighted_ce(logits, y, W)
                    scaled = scale(loss, 1.0 / (len(batch) * y[0].size))
                backprop(tape, scaled)
                ep_loss += loss.item() / y[0].size
                ep_counts = ep_counts + _pred_counts(logits.data, y)
            adam_step(opt, reg)
        tr_loss, tr_f1 = ep_loss / len(order), f1(ep_counts)
        if not math.isfinite(tr_loss):
            raise NumericError(f"training loss diverged at epoch {epoch}")
        va_loss, va_f1 = _evaluate_patches(model, val_set, W, val_combos)
        log.append(EpochLog(epoch, tr_loss, va_loss, tr_f1, va_f1))
        if va_f1 > best[0]:
            best = (va_f1, epoch, reg.snapshot())
        if log_path is not None:
            write_log(log, log_path)

    reg.restore(best[2])
    if log_path is not None:
        write_log(log, log_path)
    return Checkpoint(model.cfg, best[2], float(best[0]), best[1]), log


# ---------------------------------------------------------------------------
# whole-fold drivers
# ---------------------------------------------------------------------------


@dataclass
class FoldData:
    train: list
    val: list
    test: list


def split_fold(samples, plan: TrainPlan) -> FoldData:
    tr, va, te = fold_split(len(samples), plan.folds, plan.fold)
    return FoldData([samples[i] for i in tr], [samples[i] for i in va], [samples[i] for i in te])


def fold_patches(model_cfg: ModelConfig, fold: FoldData, plan: TrainPlan, geometry):
    """Training and validation PatchSets for one fold and class."""
    train_set = build_patches(fold.train, geometry, plan.class_index, plan.marker_assignment or None)
    full = {s.id: (1 << s.K) - 1 for s in fold.val}
    val_set = build_patches(fold.val, geometry, plan.class_index, full)
    return train_set, val_set


def default_geometry(cfg: ModelConfig, tile: int):
    return geometry_for_output(cfg, tile)


def train_model(cfg: ModelConfig, samples, plan: TrainPlan, geometry, log_path=None):
    """Build, fit and return ``(model, checkpoint, log)`` for one fold."""
    fold = split_fold(samples, plan)
    model = build_model(cfg)
    data = fold_patches(cfg, fold, plan, geometry)
    ckpt, log = train(model, plan, data, np.random.default_rng(plan.seed), log_path)
    return model, ckpt, log


def _train_member(job):
    cfg, plan, train_set, val_set, log_path = job
    model = build_model(cfg)
    ckpt, _ = train(model, plan, (train_set, val_set), np.random.default_rng(plan.seed), log_path)
    return ckpt


def train_ub_ensemble(cfg_template: ModelConfig, samples, plan: TrainPlan, geometry, out_dir=None,
                      jobs: int = 1):
    """Train one UB member per combination present in some training sample.

    Returns ``(members, skipped)`` where ``members`` maps bitmask to
    ``(model, checkpoint)`` and ``skipped`` lists untrainable combinations.
    With ``jobs > 1`` members train in worker processes; results are merged
    in bitmask order, so the output does not depend on ``jobs``.
    """
    fold = split_fold(samples, plan)
    Kn = cfg_template.K
    assigned = {}
    for s in fold.train:
        mask = s.availability_mask
        if plan.marker_assignment and s.id in plan.marker_assignment:
            mask &= plan.marker_assignment[s.id]
        assigned[s.id] = mask
    trainable = compute_M_UB([m for m in assigned.values() if m])
    work, skipped = [], []
    for mask in range(1, 1 << Kn):
        if mask not in trainable:
            skipped.append(mask)
            continue
        cfg = replace(cfg_template, variant="UB-member", subset=mask, attention="none", placements=())
        usable = [s for s in fold.train if assigned[s.id] & mask == mask]
        member_plan = replace(plan, marker_assignment={s.id: mask for s in usable})
        train_set = build_patches(usable, geometry, plan.class_index, member_plan.marker_assignment)
        val_set = build_patches(fold.val, geometry, plan.class_index, {s.id: mask for s in fold.val})
        log_path = None if out_dir is None else Path(out_dir) / f"{combination_name(mask)}.log.csv"
        work.append((mask, (cfg, member_plan, train_set, val_set, log_path)))
    if jobs > 1 and len(work) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            ckpts = list(ex.map(_train_member, [w for _, w in work]))
    else:
        ckpts = [_train_member(w) for _, w in work]
    members = {}
    for (mask, _), ckpt in zip(work, ckpts):
        if out_dir is not None:
            ckpt.save(Path(out_dir) / combination_name(mask))
        members[mask] = (ckpt.model(), ckpt)
    return members, skipped


class UBEnsemble:
    """Routes each combination to the member trained on exactly those markers."""

    def __init__(self, members: dict, K: int):
        self.members = members
        self.K = K

    def covers(self, mask: int) -> bool:
        return mask in self.members

    def model_for(self, mask: int):
        if mask not in self.members:
            raise InfeasibilityError(f"no UB member for {combination_name(mask)}")
        m = self.members[mask]
        return m[0] if isinstance(m, tuple) else m

    def parameter_count(self) -> int:
        return sum(self.model_for(m).parameter_count() for m in self.members)
