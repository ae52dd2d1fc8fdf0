"""Single training runs, UB ensembles on disk, and named multi-run recipes.

A run is fully determined by its :class:`RunSettings`, the model name, the
fold, the class and an optional heterogeneous case assignment; everything
random is derived from ``RunSettings.seed``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .data import standardize
from .errors import ConfigError, ContractError, InfeasibilityError
from .evaluation import (MetricTable, combination_name, compute_M_total, evaluate_model,
                         parse_combination)
from .models import ModelConfig, geometry_for, load_checkpoint
from .stats import boxplot_summary, wilcoxon_signed_rank
from .training import (LossConfig, TrainPlan, UBEnsemble, make_case_plan, split_fold, train_model,
                       train_ub_ensemble)

MODEL_NAMES = {
    "mz": "MZ", "ms": "MS", "ms-dr": "MS-DR", "ms-vr": "MS-VR", "ms-se": "MS-SE", "ms-me": "MS-ME",
    "ms-plus": "MS+", "hemis": "HeMIS", "hemis-ms": "HeMIS-MS", "ub": "UB",
}
UB_MANIFEST = "ub.json"


@dataclass
class RunSettings:
    epochs: int = 200
    batch_size: int = 2
    folds: int = 4
    lr: float = 3e-3
    depth: int = 2
    base_filters: int = 8
    input_size: int = 92
    r_drop: float = 0.5
    seed: int = 0
    val_mode: str = "full"
    weight_floor: float = 0.05
    dtype: str = "float32"

    @classmethod
    def from_dict(cls, d: dict) -> "RunSettings":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run settings: {sorted(unknown)}")
        return cls(**d)


def model_config(model: str, K: int, settings: RunSettings, **overrides) -> ModelConfig:
    key = model.lower()
    if key not in MODEL_NAMES:
        raise ConfigError(f"unknown model {model!r}; expected one of {sorted(MODEL_NAMES)}")
    variant = "MS" if key == "ub" else MODEL_NAMES[key]
    kw = dict(K=K, depth=settings.depth, base_filters=settings.base_filters, seed=settings.seed,
              r_drop=settings.r_drop, dtype=settings.dtype)
    kw.update(overrides)
    return ModelConfig.preset(variant, **kw)


def make_plan(settings: RunSettings, fold: int, class_index: int, case_spec=None, samples=None,
              require_all_markers: bool = True) -> TrainPlan:
    """Training plan for one fold; a case assignment must cover all K markers
    unless ``require_all_markers`` is off (UB ensembles skip what they cannot train)."""
    kw = dict(epochs=settings.epochs, batch_size=settings.batch_size, folds=settings.folds,
              class_index=class_index, lr=settings.lr, seed=settings.seed, val_mode=settings.val_mode,
              loss=LossConfig(weight_floor=settings.weight_floor))
    if not case_spec:
        return TrainPlan(fold=fold, **kw)
    train_ids = [s.id for s in split_fold(samples, TrainPlan(fold=fold, **kw)).train]
    K = samples[0].K
    need = (1 << K) - 1 if require_all_markers else None
    return make_case_plan(case_spec, fold, train_ids, test_markers=need, **kw)


def read_case_file(path) -> list:
    """A case file is JSON ``{"subsets": ["12", "3", ...]}`` or one subset per line."""
    text = Path(path).read_text(encoding="utf-8")
    if not text.lstrip().startswith("{"):
        lines = [ln.split("#")[0].strip() for ln in text.splitlines()]
        return [ln for ln in lines if ln]
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON case file: {exc}") from None
    if not isinstance(doc, dict) or set(doc) != {"subsets"}:
        raise ConfigError(f"{path}: case file JSON must be an object with exactly the key 'subsets'")
    return list(doc["subsets"])


def run_geometry(cfg: ModelConfig, settings: RunSettings):
    return geometry_for(cfg, (settings.input_size, settings.input_size))


def train_run(model: str, samples, settings: RunSettings, fold: int, class_index: int, out_prefix,
              case_spec=None, jobs: int = 1, **cfg_overrides):
    """Train one model (or a UB ensemble) and write its checkpoint(s) under ``out_prefix``.

    Returns the written checkpoint prefix or UB directory.
    """
    K = samples[0].K
    cfg = model_config(model, K, settings, **cfg_overrides)
    geometry = run_geometry(cfg, settings)
    plan = make_plan(settings, fold, class_index, case_spec, samples, require_all_markers=model.lower() != "ub")
    extra = dict(class_index=class_index, fold=fold, folds=settings.folds, input_size=settings.input_size,
                 model=model.lower(), marker_assignment={k: v for k, v in sorted(plan.marker_assignment.items())})
    out_prefix = Path(out_prefix)
    if model.lower() == "ub":
        out_prefix.mkdir(parents=True, exist_ok=True)
        members, skipped = train_ub_ensemble(cfg, samples, plan, geometry, out_prefix, jobs=jobs)
        manifest = dict(extra, K=K, members=[combination_name(m) for m in members],
                        skipped=[combination_name(m) for m in skipped])
        (out_prefix / UB_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")
        return out_prefix
    model_obj, ckpt, _ = train_model(cfg, samples, plan, geometry,
                                     log_path=out_prefix.with_name(out_prefix.name + ".log.csv"))
    ckpt.save(out_prefix)
    meta_path = out_prefix.with_name(out_prefix.name + ".meta.json")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    meta.update(extra)
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out_prefix


@dataclass
class LoadedRun:
    """A trained single model or UB ensemble plus its bookkeeping."""

    kind: str                 # "model" or "ub"
    meta: dict
    model: object = None
    ensemble: Optional[UBEnsemble] = None
    skipped: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.ensemble.K if self.ensemble else self.model.cfg.K

    def covers(self, mask: int) -> bool:
        return self.ensemble.covers(mask) if self.ensemble else True

    def model_for(self, mask: int):
        return self.ensemble.model_for(mask) if self.ensemble else self.model


def load_run(path) -> LoadedRun:
    """Load a checkpoint prefix, a ``.meta.json`` path, or a UB directory."""
    path = Path(path)
    if path.is_dir() or path.name == UB_MANIFEST:
        root = path if path.is_dir() else path.parent
        manifest_path = root / UB_MANIFEST
        if not manifest_path.exists():
            raise ContractError(f"{root} is not a UB ensemble directory (no {UB_MANIFEST})")
        meta = json.loads(manifest_path.read_text(encoding="utf-8"))
        members = {}
        for name in meta["members"]:
            m, _ = load_checkpoint(root / name)
            members[parse_combination(name)] = m
        skipped = [parse_combination(n) for n in meta["skipped"]]
        return LoadedRun("ub", meta, ensemble=UBEnsemble(members, int(meta["K"])), skipped=skipped)
    if path.name.endswith(".meta.json"):
        path = path.with_name(path.name[:-len(".meta.json")])
    model, meta = load_checkpoint(path)
    return LoadedRun("model", meta, model=model)


def _run_geometry(run: LoadedRun, mask: int, input_size: int):
    cfg = run.model_for(mask).cfg
    return geometry_for(cfg, (input_size, input_size))


def evaluate_run(run: LoadedRun, samples, combinations, model_name: str, class_index: int, fold: int,
                 folds: int, input_size: int, table: Optional[MetricTable] = None):
    """Evaluate on the fold's test samples. Returns ``(table, skipped_masks)``.

    A UB ensemble evaluates only the combinations it has members for.
    """
    table = MetricTable() if table is None else table
    K = run.K
    union = 0
    for s in samples:
        union |= s.availability_mask
    for mask in combinations:
        if mask >= 1 << K or mask & ~union:
            total, _ = compute_M_total([s.availability_mask for s in samples])
            raise InfeasibilityError(f"combination {combination_name(mask)} uses markers absent from the "
                                     f"dataset; available combinations: "
                                     f"{sorted(combination_name(t) for t in total)}")
    test = [standardize(s) for s in split_fold(samples, TrainPlan(folds=folds, fold=fold)).test]
    skipped = []
    for mask in combinations:
        if not run.covers(mask):
            skipped.append(mask)
            continue
        evaluate_model(run.model_for(mask), test, class_index, fold, [mask], model_name,
                       _run_geometry(run, mask, input_size), table)
    return table, skipped


# ---------------------------------------------------------------------------
# recipes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RecipeRun:
    label: str
    model: str
    overrides: tuple = ()       # ((key, value), ...) applied to the model config
    settings: tuple = ()        # ((key, value), ...) applied to RunSettings


@dataclass(frozen=True)
class ExperimentRecipe:
    """A named protocol: runs to train, with the first run as comparison reference."""

    name: str
    runs: tuple
    needs_case: bool = False


RECIPES = {
    "homogeneous": ExperimentRecipe("homogeneous", (
        RecipeRun("MZ", "mz"), RecipeRun("MS", "ms"), RecipeRun("HeMIS", "hemis"),
        RecipeRun("HeMIS-MS", "hemis-ms"))),
    "r-drop": ExperimentRecipe("r-drop", tuple(
        RecipeRun(f"MS-r{r}", "ms", settings=(("r_drop", r),)) for r in (0.5, 0.25, 0.75))
        + (RecipeRun("MS-DR", "ms-dr"), RecipeRun("MS-VR", "ms-vr"))),
    "placement": ExperimentRecipe("placement", (RecipeRun("MS", "ms"),) + tuple(
        RecipeRun(f"MS-ME-{p}", "ms-me", overrides=(("placements", tuple(p)),)) for p in ("I", "E", "B", "D", "EBD"))
        + (RecipeRun("MS-SE-EBD", "ms-se"), RecipeRun("MS+", "ms-plus"))),
    "heterogeneous": ExperimentRecipe("heterogeneous", (
        RecipeRun("UB", "ub"), RecipeRun("MS", "ms"), RecipeRun("MS-ME", "ms-me")), needs_case=True),
    "ub": ExperimentRecipe("ub", (RecipeRun("UB", "ub"), RecipeRun("MS", "ms"), RecipeRun("MS-ME", "ms-me"))),
}


def get_recipe(name: str) -> ExperimentRecipe:
    if name not in RECIPES:
        raise ConfigError(f"unknown recipe {name!r}; expected one of {sorted(RECIPES)}")
    return RECIPES[name]


def run_recipe(recipe: ExperimentRecipe, samples, settings: RunSettings, out_dir, class_indices=(1,),
               folds=None, case_spec=None, jobs: int = 1) -> MetricTable:
    """Train and evaluate every run of ``recipe`` on every (fold, class).

    Checkpoints go to ``out_dir/<label>/fold<f>_class<c>``; returns the pooled table.
    """
    if recipe.needs_case and not case_spec:
        raise ConfigError(f"recipe {recipe.name!r} needs a case file")
    out_dir = Path(out_dir)
    K = samples[0].K
    combos = list(range(1, 1 << K))
    table = MetricTable()
    folds = range(settings.folds) if folds is None else folds
    for run in recipe.runs:
        s = replace(settings, **dict(run.settings))
        for fold in folds:
            for c in class_indices:
                prefix = out_dir / run.label / f"fold{fold}_class{c}"
                path = train_run(run.model, samples, s, fold, c, prefix, case_spec, jobs,
                                 **dict(run.overrides))
                evaluate_run(load_run(path), samples, combos, run.label, c, fold, s.folds, s.input_size, table)
    return table


def compare_tables(candidate: MetricTable, reference: MetricTable, paired: bool = True) -> dict:
    """Relative F1 differences with a signed-rank (paired) or rank-sum test."""
    from .evaluation import relative_scores
    from .stats import mann_whitney_u
    if paired:
        rel = relative_scores(candidate, reference)
        test = wilcoxon_signed_rank(rel.diffs)
        diffs = rel.diffs
        unmatched = {"candidate": [list(k) for k in rel.unmatched_candidate],
                     "reference": [list(k) for k in rel.unmatched_reference]}
    else:
        a, b = candidate.f1_values(), reference.f1_values()
        test = mann_whitney_u(a, b)
        diffs = np.asarray([a.mean() - b.mean()])
        unmatched = {"candidate": [], "reference": []}
    return {
        "test": "wilcoxon" if paired else "mann-whitney",
        "n": test.n,
        "statistic": test.statistic,
        "pvalue": test.pvalue,
        "exact": test.exact,
        "degenerate": test.degenerate,
        "stars": test.stars,
        "mean_difference": float(np.mean(diffs)),
        "difference_summary": boxplot_summary(diffs),
        "candidate_summary": boxplot_summary(candidate.f1_values()),
        "reference_summary": boxplot_summary(reference.f1_values()),
        "unmatched": unmatched,
    }


def settings_dict(settings: RunSettings) -> dict:
    return asdict(settings)
