"""``msme`` command line: generate-data, train, eval, segment, quantify, compare, report.

Settings come from built-in defaults, then an optional JSON ``--config``
file, then explicit flags. Every command writes the resolved settings to
``<out>/resolved_config.json``. Exit codes: 0 ok, 2 configuration error,
3 data error, 4 numeric error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import generate_synthetic, preset_config, read_dataset, standardize, write_dataset
from .errors import (ConfigError, ContractError, CorruptionError, DimensionError, GeometryError,
                     MSMEError, NumericError)
from .evaluation import (MetricTable, combination_name, parse_combination, predict_sample,
                         quantify_fraction)
from .experiments import (MODEL_NAMES, RunSettings, compare_tables, evaluate_run, get_recipe, load_run,
                          read_case_file, run_recipe, train_run)
from .stats import boxplot_summary, mann_whitney_u

log = logging.getLogger("msme")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# Defaults per command. Keys double as the allowed config-file keys.
_RUN_KEYS = {k: v for k, v in vars(RunSettings()).items()}
DEFAULTS = {
    "generate-data": dict(preset="two-class", k=3, samples=8, size=104, z=1, seed=0, force=False),
    "train": dict(_RUN_KEYS, data=None, model="ms", class_index=1, fold=0, case_file=None),
    "eval": dict(data=None, checkpoint=None, combinations="all", class_index=None, fold=None,
                 folds=None, input_size=None, name=None),
    "segment": dict(data=None, checkpoint=None, combination=None, input_size=None),
    "quantify": dict(data=[], checkpoint=None, tissue_checkpoint=None, class_index=1, input_size=None,
                     combination=None),
    "compare": dict(candidate=None, reference=None, candidate_model=None, reference_model=None,
                    unpaired=False),
    "report": dict(_RUN_KEYS, data=None, recipe=None, tables=[], class_indices=[1], folds_to_run=None,
                   case_file=None),
}
SHARED = dict(out=None, seed=None, jobs=1)


def _resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults < config file < flags; unknown config keys are a ConfigError."""
    cfg = dict(DEFAULTS[command])
    cfg.update({k: v for k, v in SHARED.items() if k != "seed" or "seed" not in cfg})
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {unknown}")
        cfg.update(doc)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None and value != []:
            cfg[key] = value
    if cfg.get("out") is None:
        raise ConfigError("--out is required (flag or config key 'out')")
    return cfg


def _snapshot(cfg: dict, command: str):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **{k: cfg[k] for k in sorted(cfg)}}
    (out / "resolved_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n",
                                              encoding="utf-8")


def _settings(cfg: dict) -> RunSettings:
    return RunSettings.from_dict({k: cfg[k] for k in _RUN_KEYS})


def _parse_combinations(spec, K: int) -> list:
    if spec in (None, "all"):
        return list(range(1, 1 << K))
    items = spec if isinstance(spec, list) else str(spec).split(",")
    return sorted({parse_combination(str(i).strip(), K) for i in items if str(i).strip()})


def _require(cfg: dict, *keys):
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise ConfigError(f"missing required settings: {missing}")


def _print_table(header, rows):
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h))
              for i, h in enumerate(header)]
    print("  ".join(str(h).ljust(w) for h, w in zip(header, widths)))
    for r in rows:
        print("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate_data(cfg: dict) -> int:
    out = Path(cfg["out"])
    if out.exists() and any(p.name != "resolved_config.json" for p in out.iterdir()) and not cfg["force"]:
        raise ContractError(f"{out} exists and is not empty; pass --force to overwrite")
    syn = preset_config(cfg["preset"], K=int(cfg["k"]), n_samples=int(cfg["samples"]), size=int(cfg["size"]),
                        z=int(cfg["z"]), seed=int(cfg["seed"]))
    ds = generate_synthetic(syn)
    write_dataset(ds, out)
    _snapshot(cfg, "generate-data")
    fr = ds.class_fractions()
    rows = [[s.id] + [f"{100 * v:.2f}" for v in row] for s, row in zip(ds.samples, fr)]
    rows.append(["mean"] + [f"{100 * v:.2f}" for v in fr.mean(axis=0)])
    _print_table(["sample"] + [f"{c} (% tissue)" for c in ds.classes], rows)
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    _require(cfg, "data")
    model = str(cfg["model"]).lower()
    if model not in MODEL_NAMES:
        raise ConfigError(f"--model must be one of {sorted(MODEL_NAMES)}")
    ds = read_dataset(cfg["data"])
    settings = _settings(cfg)
    case = read_case_file(cfg["case_file"]) if cfg["case_file"] else None
    _snapshot(cfg, "train")
    prefix = Path(cfg["out"]) / f"{model}_fold{cfg['fold']}_class{cfg['class_index']}"
    path = train_run(model, ds.samples, settings, int(cfg["fold"]), int(cfg["class_index"]), prefix, case,
                     jobs=int(cfg["jobs"]))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "data", "checkpoint")
    ds = read_dataset(cfg["data"])
    run = load_run(cfg["checkpoint"])
    meta = run.meta
    class_index = int(cfg["class_index"] or meta.get("class_index", 1))
    fold = int(cfg["fold"] if cfg["fold"] is not None else meta.get("fold", 0))
    folds = int(cfg["folds"] or meta.get("folds", 4))
    input_size = int(cfg["input_size"] or meta.get("input_size", 92))
    name = cfg["name"] or MODEL_NAMES.get(meta.get("model", ""), "model")
    combos = _parse_combinations(cfg["combinations"], ds.num_markers)
    _snapshot(cfg, "eval")
    table, skipped = evaluate_run(run, ds.samples, combos, name, class_index, fold, folds, input_size)
    out = Path(cfg["out"])
    table.to_csv(out / "metrics.csv")
    summary = {"model": name, "rows": len(table), "mean_f1": float(table.f1_values().mean()) if len(table) else None,
               "skipped": [combination_name(m) for m in skipped]}
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    _print_table(["combination", "f1"], [[combination_name(r.combination), f"{r.f1:.4f}"] for r in table])
    if skipped:
        print("skipped (no trained member): " + ", ".join(combination_name(m) for m in skipped))
    return EXIT_OK


def _prediction(run, sample, mask, input_size):
    model = run.model_for(mask)
    from .models import geometry_for
    geometry = geometry_for(model.cfg, (input_size, input_size))
    prob = predict_sample(model, standardize(sample), mask, geometry)
    return prob[1] > prob[0]


def _sample_mask(sample, combination, K):
    if combination:
        mask = parse_combination(combination, K)
        if mask & ~sample.availability_mask:
            raise ContractError(f"sample {sample.id} lacks markers of {combination_name(mask)}")
        return mask
    return sample.availability_mask


def cmd_segment(cfg: dict) -> int:
    _require(cfg, "data", "checkpoint")
    ds = read_dataset(cfg["data"])
    run = load_run(cfg["checkpoint"])
    input_size = int(cfg["input_size"] or run.meta.get("input_size", 92))
    _snapshot(cfg, "segment")
    out = Path(cfg["out"])
    entries = []
    for s in ds.samples:
        mask = _sample_mask(s, cfg["combination"], ds.num_markers)
        pred = _prediction(run, s, mask, input_size).astype(np.uint8)
        fname = f"{s.id}_prediction.bin"
        (out / fname).write_bytes(np.ascontiguousarray(pred).tobytes())
        entries.append({"id": s.id, "shape": list(pred.shape), "combination": combination_name(mask),
                        "file": fname, "foreground_pixels": int(pred.sum())})
    (out / "segmentation.json").write_text(json.dumps({"version": 1, "samples": entries}, indent=2) + "\n",
                                           encoding="utf-8")
    print(f"segmented {len(entries)} sample(s) into {out}")
    return EXIT_OK


def cmd_quantify(cfg: dict) -> int:
    groups = cfg["data"]
    if not groups:
        raise ConfigError("quantify needs at least one --data directory")
    run = load_run(cfg["checkpoint"]) if cfg["checkpoint"] else None
    tissue_run = load_run(cfg["tissue_checkpoint"]) if cfg["tissue_checkpoint"] else None
    _snapshot(cfg, "quantify")
    c = int(cfg["class_index"])
    report = {"class_index": c, "groups": []}
    avail_rows = []
    for path in groups:
        ds = read_dataset(path)
        fractions = []
        for s in ds.samples:
            mask = _sample_mask(s, cfg["combination"], ds.num_markers)
            if run is not None:
                isz = int(cfg["input_size"] or run.meta.get("input_size", 92))
                pred = _prediction(run, s, mask, isz)
            elif s.labels is not None:
                pred = s.labels[c - 1].astype(bool)
            else:
                raise ContractError(f"sample {s.id} has no labels and no --checkpoint was given")
            if tissue_run is not None:
                isz = int(cfg["input_size"] or tissue_run.meta.get("input_size", 92))
                tissue = _prediction(tissue_run, s, _sample_mask(s, "1", ds.num_markers), isz)
            elif s.tissue is not None:
                tissue = s.tissue.astype(bool)
            else:
                raise ContractError(f"sample {s.id}: no tissue mask and no --tissue-checkpoint")
            fractions.append(quantify_fraction(pred, tissue))
            avail_rows.append([Path(path).name, s.id] + ["x" if k in s.available_markers else "-"
                                                         for k in range(1, ds.num_markers + 1)])
        report["groups"].append({"data": str(path), "ids": [s.id for s in ds.samples],
                                 "fractions": fractions, "summary": boxplot_summary(fractions)})
    if len(report["groups"]) >= 2:
        tests = []
        g = report["groups"]
        for i in range(len(g)):
            for j in range(i + 1, len(g)):
                t = mann_whitney_u(g[i]["fractions"], g[j]["fractions"])
                tests.append({"a": g[i]["data"], "b": g[j]["data"], "U": t.statistic, "pvalue": t.pvalue,
                              "exact": t.exact, "stars": t.stars})
        report["tests"] = tests
    out = Path(cfg["out"])
    (out / "quantification.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    K = max(len(r) - 2 for r in avail_rows)
    _print_table(["group", "sample"] + [f"m{k}" for k in range(1, K + 1)], avail_rows)
    for gr in report["groups"]:
        sm = gr["summary"]
        print(f"{gr['data']}: n={sm['n']} median fraction {sm['median']:.4f} (IQR {sm['q1']:.4f}-{sm['q3']:.4f})")
    for t in report.get("tests", []):
        print(f"Mann-Whitney {t['a']} vs {t['b']}: U={t['U']:.1f} p={t['pvalue']:.4g} {t['stars']}")
    return EXIT_OK


def _load_table(path, model):
    t = MetricTable.from_csv(path)
    if model:
        t = t.select(model=model)
        if not len(t):
            raise ContractError(f"{path} has no rows for model {model!r}")
    return t


def cmd_compare(cfg: dict) -> int:
    _require(cfg, "candidate", "reference")
    cand = _load_table(cfg["candidate"], cfg["candidate_model"])
    ref = _load_table(cfg["reference"], cfg["reference_model"])
    _snapshot(cfg, "compare")
    result = compare_tables(cand, ref, paired=not cfg["unpaired"])
    out = Path(cfg["out"])
    (out / "comparison.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    d = result["difference_summary"]
    print(f"{result['test']}: n={result['n']} statistic={result['statistic']:g} p={result['pvalue']:.4g} "
          f"{result['stars']}{' (degenerate: all differences zero)' if result['degenerate'] else ''}")
    print(f"relative F1: mean {result['mean_difference']:+.4f} median {d['median']:+.4f} "
          f"IQR [{d['q1']:+.4f}, {d['q3']:+.4f}]")
    un = result["unmatched"]
    if un["candidate"] or un["reference"]:
        print(f"unmatched keys: candidate {un['candidate']} reference {un['reference']}")
    return EXIT_OK


def cmd_report(cfg: dict) -> int:
    out = Path(cfg["out"])
    if cfg["recipe"]:
        _require(cfg, "data")
        recipe = get_recipe(cfg["recipe"])
        ds = read_dataset(cfg["data"])
        case = read_case_file(cfg["case_file"]) if cfg["case_file"] else None
        _snapshot(cfg, "report")
        table = run_recipe(recipe, ds.samples, _settings(cfg), out, [int(c) for c in cfg["class_indices"]],
                           cfg["folds_to_run"], case, jobs=int(cfg["jobs"]))
        table.to_csv(out / "metrics.csv")
    elif cfg["tables"]:
        _snapshot(cfg, "report")
        table = MetricTable()
        for p in cfg["tables"]:
            table.extend(MetricTable.from_csv(p))
    else:
        raise ConfigError("report needs --recipe (with --data) or one or more --table files")
    models = table.models()
    combos = sorted({r.combination for r in table})
    rows = []
    for m in models:
        sel = table.select(model=m)
        row = [m]
        for c in combos:
            v = sel.select(combination=c).f1_values()
            row.append(f"{v.mean():.3f}" if v.size else "-")
        row.append(f"{sel.f1_values().mean():.3f}")
        rows.append(row)
    _print_table(["model"] + [combination_name(c) for c in combos] + ["mean"], rows)
    summary = {"models": {m: boxplot_summary(table.select(model=m).f1_values()) for m in models}}
    reference = models[0] if not cfg["recipe"] else get_recipe(cfg["recipe"]).runs[0].label
    comps = {}
    for m in models:
        if m == reference:
            continue
        try:
            comps[m] = compare_tables(table.select(model=m), table.select(model=reference))
        except ContractError as exc:
            comps[m] = {"error": str(exc)}
    summary["reference"] = reference
    summary["comparisons"] = comps
    for m, c in comps.items():
        if "error" not in c:
            print(f"{m} vs {reference}: mean diff {c['mean_difference']:+.4f} p={c['pvalue']:.4g} {c['stars']}")
    (out / "report.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


COMMANDS = {
    "generate-data": cmd_generate_data, "train": cmd_train, "eval": cmd_eval, "segment": cmd_segment,
    "quantify": cmd_quantify, "compare": cmd_compare, "report": cmd_report,
}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_run_flags(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--depth", type=int)
    p.add_argument("--base-filters", dest="base_filters", type=int)
    p.add_argument("--input-size", dest="input_size", type=int)
    p.add_argument("--r-drop", dest="r_drop", type=float)
    p.add_argument("--val-mode", dest="val_mode", choices=["full", "combinations"])
    p.add_argument("--weight-floor", dest="weight_floor", type=float)
    p.add_argument("--dtype", choices=["float32", "float64"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msme", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file of settings (flags take precedence)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int, help="worker processes for independent work units")
        return p

    p = command("generate-data", "write a synthetic dataset")
    p.add_argument("--preset")
    p.add_argument("--k", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--z", type=int)
    p.add_argument("--force", action="store_true", default=None)

    p = command("train", "train one model or a UB ensemble for one fold and class")
    p.add_argument("--data")
    p.add_argument("--model", choices=sorted(MODEL_NAMES))
    p.add_argument("--class-index", dest="class_index", type=int)
    p.add_argument("--fold", type=int)
    p.add_argument("--case-file", dest="case_file")
    _add_run_flags(p)

    p = command("eval", "evaluate a checkpoint over marker combinations on its test fold")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--combinations", help="'all' or comma-separated digit sets, e.g. 1,12,123")
    p.add_argument("--class-index", dest="class_index", type=int)
    p.add_argument("--fold", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--input-size", dest="input_size", type=int)
    p.add_argument("--name", help="model name written to the table")

    p = command("segment", "write binary segmentations of every sample")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--combination")
    p.add_argument("--input-size", dest="input_size", type=int)

    p = command("quantify", "fraction of tissue occupied by a structure, per sample and group")
    p.add_argument("--data", action="append", default=[])
    p.add_argument("--checkpoint")
    p.add_argument("--tissue-checkpoint", dest="tissue_checkpoint")
    p.add_argument("--class-index", dest="class_index", type=int)
    p.add_argument("--combination")
    p.add_argument("--input-size", dest="input_size", type=int)

    p = command("compare", "relative F1 of two metric tables with a rank test")
    p.add_argument("--candidate")
    p.add_argument("--reference")
    p.add_argument("--candidate-model", dest="candidate_model")
    p.add_argument("--reference-model", dest="reference_model")
    p.add_argument("--unpaired", action="store_true", default=None)

    p = command("report", "run a named recipe, or summarize metric tables")
    p.add_argument("--data")
    p.add_argument("--recipe")
    p.add_argument("--table", dest="tables", action="append", default=[])
    p.add_argument("--class-index", dest="class_indices", type=int, action="append", default=[])
    p.add_argument("--fold", dest="folds_to_run", type=int, action="append", default=None)
    p.add_argument("--case-file", dest="case_file")
    _add_run_flags(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args.command, args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, GeometryError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorruptionError, ContractError, DimensionError, MSMEError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
