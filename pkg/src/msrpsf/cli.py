"""Command-line entry point.

    msrpsf simulate --trial 0 --out run/
    msrpsf solve --stack run/stack --out run/solve
    msrpsf pipeline --trials 5 --out run/pipeline
    msrpsf sweep gamma --out run/gamma
    msrpsf score --scene run/scene.json --detections run/solve/detections.csv

Every experiment setting has a flag; ``--config`` loads a JSON or TOML file
whose values the flags then override.  Failures print a JSON error object
on stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import scipy.fft as sfft

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .detect import extract_detections, match_truth, merge_clusters, read_detections, write_detections
from .harness import (SWEEP_KINDS, ExperimentConfig, Resources, aggregate, provenance, run_sweep, run_trial,
                      simulate, thread_count, truth_table, write_trial_report)
from .metrics import classification_scores, localization_scores, write_confusion
from .scene import load_scene, load_stack, save_scene, save_stack
from .stage1 import SolverConfig, solve_stage1
from .stage2 import stage2_alternate, write_flux_table
from .stage3 import assign_labels, unmix_simplex_ls, write_classification

logger = logging.getLogger("msrpsf")

_EXPERIMENT_FIELDS = [f for f in dataclasses.fields(ExperimentConfig) if f.name != "solver"]
# The solver's noise model always follows the experiment's.
_SOLVER_FIELDS = [f for f in dataclasses.fields(SolverConfig) if f.name != "noise_model"]


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_field(group, f, default, dest: str) -> None:
    kw = dict(dest=dest, default=argparse.SUPPRESS, help=f"(default: {default})")
    if not isinstance(default, (bool, tuple)):
        kw["metavar"] = f.name.upper()
    if isinstance(default, bool):
        group.add_argument(_flag(f.name), action=argparse.BooleanOptionalAction, **kw)
    elif isinstance(default, tuple):
        group.add_argument(_flag(f.name), nargs="+", type=float, metavar="NM", **kw)
    elif isinstance(default, (int, float)):
        group.add_argument(_flag(f.name), type=type(default), **kw)
    else:
        group.add_argument(_flag(f.name), type=str, **kw)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON or TOML experiment file; flags override it")
    p.add_argument("--preset", choices=["poisson", "gaussian"], default=None,
                   help="start from the Poisson or Gaussian defaults")
    exp = ExperimentConfig()
    g = p.add_argument_group("experiment")
    for f in _EXPERIMENT_FIELDS:
        _add_field(g, f, getattr(exp, f.name), f"exp__{f.name}")
    g = p.add_argument_group("solver")
    for f in _SOLVER_FIELDS:
        _add_field(g, f, getattr(exp.solver, f.name), f"solver__{f.name}")


def _read_config_file(path: Path) -> dict:
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        return tomllib.loads(text)
    return json.loads(text)


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    data: dict = {}
    if getattr(args, "config", None):
        data = _read_config_file(args.config)
    preset = getattr(args, "preset", None) or data.get("noise_model", "poisson")
    base = ExperimentConfig.gaussian() if preset == "gaussian" else ExperimentConfig()
    merged = base.to_dict()
    solver = dict(merged["solver"])
    solver.update(data.pop("solver", {}))
    merged.update(data)
    for key, value in vars(args).items():
        if key.startswith("exp__"):
            merged[key[5:]] = tuple(value) if isinstance(value, list) else value
        elif key.startswith("solver__"):
            solver[key[8:]] = value
    solver["noise_model"] = merged["noise_model"]
    merged["solver"] = solver
    return ExperimentConfig.from_dict(merged)


# ------------------------------------------------------------------ commands

def cmd_simulate(args, cfg: ExperimentConfig) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene, stack = simulate(cfg, args.trial, Resources())
    save_scene(scene, out / "scene.json")
    save_stack(stack, out / "stack")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return {"scene": str(out / "scene.json"), "stack": str(out / "stack"), "sources": len(scene.sources)}


def cmd_solve(args, cfg: ExperimentConfig) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stack = load_stack(args.stack)
    cfg = dataclasses.replace(cfg, bands_nm=tuple(b.wavelength_nm for b in stack.bands),
                              stage2_band_count=min(cfg.stage2_band_count, len(stack.bands)),
                              stage1_band_count=min(cfg.stage1_band_count, len(stack.bands)))
    res = Resources()
    dicts = res.dictionaries(cfg)
    lib = res.library(cfg)
    k1, k2 = cfg.stage1_band_count, cfg.stage2_band_count
    t0 = time.perf_counter()
    with sfft.set_workers(thread_count()):
        est, state = solve_stage1(stack.subset(range(k1)), dicts[:k1], cfg.effective_solver())
    state.write_diagnostics(out / "stage1_diagnostics.csv")
    merged = merge_clusters(extract_detections(est.voxels))
    write_detections(merged, out / "stage1_detections.csv")
    s2 = stage2_alternate(merged, stack.subset(range(k2)), dicts[:k2], cfg.gamma, cfg.noise_model)
    write_detections(s2.detections, out / "detections.csv")
    write_flux_table(s2, out / "fluxes.csv")
    summary = {"stage1_candidates": len(merged), "detections": len(s2.detections),
               "stage1_iterations": state.iterations, "seconds": round(time.perf_counter() - t0, 3)}
    if s2.detections:
        abund = unmix_simplex_ls(s2.fluxes.values, lib.at_bands(cfg.bands()[:k2]))
        labels = assign_labels(abund)
        write_classification(abund, labels, lib.endmember_names, out / "classification.csv")
        summary["labels"] = [lib.endmember_names[int(i)] for i in labels]
    return summary


def cmd_pipeline(args, cfg: ExperimentConfig) -> dict:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = Resources()
    trials = [args.trial] if args.trial is not None else range(cfg.trials)
    reports = []
    for t in trials:
        r = run_trial(cfg, t, res)
        reports.append(r)
        write_trial_report(r, cfg, out / f"trial_{t:03d}.json", res)
        logger.info("trial %d: recall %.3f precision %.3f OA %.3f", t, r.recall, r.precision,
                    r.overall_accuracy)
    summary = {**aggregate(reports), "provenance": provenance(cfg, res), "config": cfg.to_dict()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    total = np.sum([r.confusion for r in reports if r.confusion], axis=0)
    if np.ndim(total) == 2:
        write_confusion(total, res.library(cfg).endmember_names, out / "confusion.csv")
    return {k: summary[k] for k in ("recall", "precision", "overall_accuracy", "kappa", "trials", "failed")}


def _parse_values(kind: str, raw):
    if not raw:
        return None
    if kind == "regularizer":
        return list(raw)
    if kind.startswith("bands"):
        return [int(v) for v in raw]
    return [float(v) for v in raw]


def cmd_sweep(args, cfg: ExperimentConfig) -> dict:
    out = Path(args.out or cfg.output_dir)
    rows = run_sweep(cfg, args.kind, _parse_values(args.kind, args.values), out)
    return {"kind": args.kind, "points": rows}


def cmd_score(args, cfg: ExperimentConfig) -> dict:
    scene = load_scene(args.scene)
    dets = read_detections(args.detections)
    res = Resources()
    dicts = res.dictionaries(cfg)
    m = match_truth(dets, truth_table(scene, dicts[0]))
    recall, precision, flags = localization_scores(m)
    report = {"recall": recall, "precision": precision, "matched": m.n_matched, "detections": m.n_detections,
              "truths": m.n_truth, "flags": flags}
    if args.classification:
        names = res.library(cfg).endmember_names
        with open(args.classification, newline="") as fh:
            labels = {int(r["detection_id"]): names.index(r["label"]) for r in csv.DictReader(fh)}
        pairs = [(i, j) for i, j in m.pairs if i in labels]
        pred = [labels[i] for i, _ in pairs]
        true = [scene.sources[j].material for _, j in pairs]
        oa, kappa, C = classification_scores(pred, true, len(names))
        report.update(overall_accuracy=oa, kappa=kappa, confusion=C.tolist())
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msrpsf", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render one random trial scene and its noisy images")
    s.add_argument("--trial", type=int, default=0)
    s.add_argument("--out", required=True)
    _add_config_flags(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("solve", help="run stages 1-3 on a saved image stack")
    s.add_argument("--stack", required=True, help="directory written by 'simulate'")
    s.add_argument("--out", required=True)
    _add_config_flags(s)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("pipeline", help="run and score full trials")
    s.add_argument("--trial", type=int, default=None, help="run only this trial index")
    s.add_argument("--out", default=None)
    _add_config_flags(s)
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("sweep", help="average scores over trials for each value of one parameter")
    s.add_argument("kind", choices=SWEEP_KINDS)
    s.add_argument("--values", nargs="+", default=None)
    s.add_argument("--out", default=None)
    _add_config_flags(s)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("score", help="score detections against a scene file")
    s.add_argument("--scene", required=True)
    s.add_argument("--detections", required=True)
    s.add_argument("--classification", default=None)
    s.add_argument("--out", default=None)
    _add_config_flags(s)
    s.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        result = args.func(args, cfg)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON error
        logger.debug("command failed", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, sort_keys=True, default=_json_default))
    return 0


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


if __name__ == "__main__":
    sys.exit(main())
