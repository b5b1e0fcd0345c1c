"""Command-line entry point: generate, train, calibrate, evaluate, predict, stats, sweep.

Settings resolve as CLI flag > ``--config`` key=value file > built-in default.
Errors go to stderr as ``ERROR(<category>): message``; exit status is 1 for
usage and configuration problems and 2 for data or numeric failures.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import baselines
from .calibration import Thresholds, load_thresholds, save_thresholds, select_thresholds
from .cohort import GeneratorConfig, generate_cohort, load_cohort, save_cohort, split_cohort
from .errors import ConfigError, MicronError
from .inference import MODES, copy_forward_rollouts, rollout_cohort
from .metrics import METRIC_NAMES, NORMALIZATIONS, consecutive_jaccard_stats, evaluate
from .trainer import Hyperparams, load_checkpoint, save_checkpoint, train

log = logging.getLogger("micron")

GENERATOR_FLAGS = {
    "patients": "n_patients", "visits_min": "visits_min", "visits_max": "visits_max",
    "n_diag": "n_diag", "n_proc": "n_proc", "n_med": "n_med",
    "diag_per_visit_min": "diag_per_visit_min", "diag_per_visit_max": "diag_per_visit_max",
    "diag_persistence": "diag_persistence", "med_rule_fanout": "med_rule_fanout",
    "med_carryover": "med_carryover", "noise_rate": "noise_rate", "ddi_density": "ddi_density",
}
HP_FLAGS = ("embed_size", "hidden", "lr", "weight_decay", "epochs", "gamma", "eta", "lam",
            "mbl", "mbl_gamma", "activation", "no_rec", "no_multi", "no_ddi")
RUN_KEYS = ("seed", "split_seed", "split")
PARTS = ("train", "val", "test", "all")
MODEL_KINDS = ("micron", "simnn", "dualnn")


class UsageError(MicronError):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def read_config_file(path) -> dict[str, str]:
    values = {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    allowed = set(GeneratorConfig.__dataclass_fields__) | set(HP_FLAGS) | set(RUN_KEYS) | {"patients"}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    if "patients" in values:
        values["n_patients"] = values.pop("patients")
    return values


def _resolve(args, keys, file_values: dict, rename: dict | None = None) -> dict:
    out = {}
    for key in keys:
        target = (rename or {}).get(key, key)
        flag = getattr(args, key, None)
        if flag is not None:
            out[target] = flag
        elif target in file_values:
            out[target] = file_values[target]
    return out


def _file_values(args) -> dict:
    return read_config_file(args.config) if getattr(args, "config", None) else {}


def generator_config(args, file_values) -> GeneratorConfig:
    values = _resolve(args, GENERATOR_FLAGS, file_values, GENERATOR_FLAGS)
    return GeneratorConfig.from_mapping(values)


def hyperparams(args, file_values) -> Hyperparams:
    values = _resolve(args, HP_FLAGS, file_values)
    seed = getattr(args, "seed", None)
    if seed is not None:
        values["seed"] = seed
    elif "seed" in file_values:
        values["seed"] = file_values["seed"]
    return Hyperparams.from_mapping(values)


def _split_seed(args, file_values) -> int:
    if args.split_seed is not None:
        return args.split_seed
    return int(file_values.get("split_seed", 0))


def _require(path, what):
    if path is None or not Path(path).is_file():
        raise ConfigError(f"{what} not found: {path}")
    return path


def cohort_part(args, file_values, default: str):
    cohort = load_cohort(_require(args.cohort, "cohort file"))
    part = args.part or file_values.get("split") or default
    if part not in PARTS:
        raise ConfigError(f"--part must be one of {PARTS}")
    if part == "all":
        return cohort, cohort, part
    train_c, val_c, test_c = split_cohort(cohort, seed=_split_seed(args, file_values))
    return cohort, {"train": train_c, "val": val_c, "test": test_c}[part], part


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


# -- subcommands -----------------------------------------------------------

def cmd_generate(args, out) -> int:
    fv = _file_values(args)
    cfg = generator_config(args, fv)
    seed = args.seed if args.seed is not None else int(fv.get("seed", 0))
    cohort = generate_cohort(cfg, seed)
    save_cohort(cohort, args.output)
    print(_dump({"output": str(args.output), "patients": len(cohort), "visits": cohort.n_visits,
                 "config": cohort.generator_config}), file=out)
    return 0


def cmd_train(args, out) -> int:
    fv = _file_values(args)
    hp = hyperparams(args, fv)
    cohort = load_cohort(_require(args.cohort, "cohort file"))
    train_c, val_c, _ = split_cohort(cohort, seed=_split_seed(args, fv))
    on_epoch = (lambda e: print(_dump(e), file=out)) if args.log_json else None
    if args.model == "micron":
        ckpt = train(train_c, val_c, hp, on_epoch=on_epoch)
    else:
        ckpt = baselines.train_baseline(args.model, train_c, val_c, hp, on_epoch=on_epoch)
    save_checkpoint(ckpt, args.output)
    if not args.log_json:
        last = ckpt.training_log[-1]
        print(f"trained {args.model} for {hp.epochs} epochs; final mean loss {last['loss_total']:.6f}"
              f" -> {args.output}", file=out)
    return 0


def _thresholds_path(args) -> Path:
    return Path(args.thresholds) if args.thresholds else Path(str(args.checkpoint) + ".thresholds")


def cmd_calibrate(args, out) -> int:
    fv = _file_values(args)
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    if ckpt.kind != "micron":
        raise ConfigError("only micron checkpoints are calibrated")
    _, val_c, _ = cohort_part(args, fv, "val")
    th = select_thresholds(ckpt.params, val_c)
    path = _thresholds_path(args)
    save_thresholds(th, path)
    print(_dump({"delta1": th.delta1, "delta2": th.delta2, "output": str(path)}), file=out)
    return 0


def _rollouts(args, ckpt, cohort):
    if ckpt.kind != "micron":
        return baselines.baseline_rollout_cohort(ckpt.kind, ckpt.params, cohort, args.delta or 0.5)
    if args.delta is not None:
        th = Thresholds.single(args.delta)
    else:
        path = _thresholds_path(args)
        if not path.is_file():
            raise ConfigError(f"thresholds sidecar not found: {path} (run calibrate first)")
        th = load_thresholds(path)
    return rollout_cohort(ckpt.params, th, cohort, mode=args.mode, memory=not args.no_memory)


def cmd_evaluate(args, out) -> int:
    fv = _file_values(args)
    full, cohort, part = cohort_part(args, fv, "test")
    config = {"part": part, "split_seed": _split_seed(args, fv), "normalization": args.normalization}
    if args.baseline == "copy-forward":
        rollouts = copy_forward_rollouts(cohort)
        config["model"] = "copy-forward"
    else:
        ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
        ckpt.params.check_vocabulary(cohort.vocabulary)
        rollouts = _rollouts(args, ckpt, cohort)
        config.update(model=ckpt.kind, mode=args.mode, memory=not args.no_memory, delta=args.delta,
                      hyperparams=ckpt.hyperparams.as_dict())
    report = evaluate(rollouts, cohort, normalization=args.normalization)
    if args.format == "json":
        print(_dump({**report.as_dict(), "config": config}), file=out)
    else:
        print(report.table(), file=out)
        print(f"config {_dump(config)}", file=out)
    return 0


def cmd_predict(args, out) -> int:
    fv = _file_values(args)
    _, cohort, _ = cohort_part(args, fv, "test")
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    ckpt.params.check_vocabulary(cohort.vocabulary)
    rollouts = _rollouts(args, ckpt, cohort)
    lines = [_dump(rec) for p in cohort.patients for rec in rollouts[p.patient_id].records()]
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        out.write(text)
    return 0


def cmd_stats(args, out) -> int:
    cohort = load_cohort(_require(args.cohort, "cohort file"))
    st = consecutive_jaccard_stats(cohort, bins=args.bins)
    if args.format == "json":
        print(_dump({"diag_mean": st.diag_mean, "med_mean": st.med_mean, "pairs": len(st.diag),
                     "bin_edges": st.bin_edges.tolist(), "diag_hist": st.diag_hist.tolist(),
                     "med_hist": st.med_hist.tolist()}), file=out)
    else:
        width = 40
        peak = max(int(st.diag_hist.max()), int(st.med_hist.max()), 1)
        print(f"consecutive-visit Jaccard over {len(st.diag)} pairs", file=out)
        print(f"mean diagnosis {st.diag_mean:.4f}  mean medication {st.med_mean:.4f}", file=out)
        for label, hist in (("diagnosis", st.diag_hist), ("medication", st.med_hist)):
            print(f"\n{label}", file=out)
            for lo, hi, n in zip(st.bin_edges[:-1], st.bin_edges[1:], hist):
                bar = "#" * round(width * int(n) / peak)
                print(f"[{lo:.2f},{hi:.2f}) {int(n):5d} {bar}", file=out)
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "diagnosis_count", "medication_count"])
            for lo, hi, d, m in zip(st.bin_edges[:-1], st.bin_edges[1:], st.diag_hist, st.med_hist):
                w.writerow([f"{lo:.2f}", f"{hi:.2f}", int(d), int(m)])
    return 0


def _sweep_one(job):
    cohort, hp, split_seed, normalization = job
    train_c, val_c, test_c = split_cohort(cohort, seed=split_seed)
    ckpt = train(train_c, val_c, hp)
    th = select_thresholds(ckpt.params, val_c)
    report = evaluate(rollout_cohort(ckpt.params, th, test_c), test_c, normalization=normalization)
    return report.means


def cmd_sweep(args, out) -> int:
    fv = _file_values(args)
    cohort = load_cohort(_require(args.cohort, "cohort file"))
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad --seeds {args.seeds!r}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")
    base = hyperparams(args, fv)
    jobs = [(cohort, dataclasses.replace(base, seed=s), _split_seed(args, fv), args.normalization) for s in seeds]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as ex:
            results = list(ex.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    summary = {name: {"mean": float(np.mean([r[name] for r in results])),
                      "std": float(np.std([r[name] for r in results]))} for name in METRIC_NAMES}
    if args.format == "json":
        print(_dump({"seeds": seeds, "runs": results, "summary": summary,
                     "hyperparams": base.as_dict()}), file=out)
    else:
        print(f"{'metric':<12}{'mean':>12}{'std':>12}   seeds={seeds}", file=out)
        for name in METRIC_NAMES:
            print(f"{name:<12}{summary[name]['mean']:>12.6f}{summary[name]['std']:>12.6f}", file=out)
    return 0


# -- parser ----------------------------------------------------------------

def _add_hp_flags(p):
    g = p.add_argument_group("hyperparameters")
    g.add_argument("--embed-size", type=int)
    g.add_argument("--hidden", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--gamma", type=float)
    g.add_argument("--eta", type=float)
    g.add_argument("--lam", help="four comma-separated loss weights (rec,ddi,bce,multi)")
    g.add_argument("--mbl", action="store_true", default=None, help="momentum-based loss weights")
    g.add_argument("--mbl-gamma", type=float)
    g.add_argument("--activation", choices=("relu", "identity"))
    g.add_argument("--no-rec", action="store_true", default=None)
    g.add_argument("--no-multi", action="store_true", default=None)
    g.add_argument("--no-ddi", action="store_true", default=None)
    g.add_argument("--seed", type=int)


def _add_cohort_part(p):
    p.add_argument("--cohort", required=True)
    p.add_argument("--part", choices=PARTS)
    p.add_argument("--split-seed", type=int)


def _add_inference_flags(p):
    p.add_argument("--checkpoint")
    p.add_argument("--thresholds", help="thresholds sidecar (default: <checkpoint>.thresholds)")
    p.add_argument("--mode", choices=MODES, default="dense")
    p.add_argument("--delta", type=float, help="single threshold used for both additions and removals")
    p.add_argument("--no-memory", action="store_true", help="threshold the residual update alone")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="micron", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic cohort file")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    for flag in GENERATOR_FLAGS:
        kind = int if flag in ("patients", "visits_min", "visits_max", "n_diag", "n_proc", "n_med",
                               "diag_per_visit_min", "diag_per_visit_max", "med_rule_fanout") else float
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=kind)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on the train split")
    p.add_argument("--cohort", required=True)
    p.add_argument("--split-seed", type=int)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--model", choices=MODEL_KINDS, default="micron")
    p.add_argument("--config")
    p.add_argument("--log-json", action="store_true", help="one JSON object per epoch on stdout")
    _add_hp_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="select addition/removal thresholds on the val split")
    _add_cohort_part(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--thresholds", help="output path (default: <checkpoint>.thresholds)")
    p.add_argument("--config")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="score predictions on the test split")
    _add_cohort_part(p)
    _add_inference_flags(p)
    p.add_argument("--baseline", choices=("copy-forward",))
    p.add_argument("--normalization", choices=NORMALIZATIONS, default="as_printed")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--config")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="per-visit change predictions as JSON lines")
    _add_cohort_part(p)
    _add_inference_flags(p)
    p.add_argument("-o", "--output")
    p.add_argument("--config")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("stats", help="consecutive-visit Jaccard histograms")
    p.add_argument("--cohort", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--csv")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("sweep", help="train/calibrate/evaluate over several seeds")
    p.add_argument("--cohort", required=True)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--normalization", choices=NORMALIZATIONS, default="as_printed")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--config")
    _add_hp_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def run(argv=None, out=None, err=None) -> int:
    out = sys.stdout if out is None else out
    err = sys.stderr if err is None else err
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args, out)
    except (UsageError, ConfigError) as exc:
        print(f"ERROR({exc.category}): {exc}", file=err)
        return 1
    except MicronError as exc:
        print(f"ERROR({exc.category}): {exc}", file=err)
        return 2
    except OSError as exc:
        print(f"ERROR(io): {exc}", file=err)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
