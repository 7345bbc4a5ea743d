"""Command-line surface: data generation, training, evaluation, sweeps,
path-ensemble analysis, ablations, neurophysiology, and report emission.

Exit codes: 0 ok, 2 config error, 3 data/artifact error, 4 numerical failure.
"""

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import multipath as mp
from . import neurophys as np_mod
from .data import (TeacherSpec, generate_teacher_dataset, load_dataset,
                   preprocess, save_dataset, training_subset)
from .metrics import dataset_score, write_per_neuron_csv
from .models import (Model, ModelConfig, build_model, load_model,
                     matched_feedforward_config, param_count, save_model)
from .training import TrainSchedule, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def config_hash(obj) -> str:
    """Stable short hash of a JSON-serializable config."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _out_dir(args):
    out = os.environ.get("RECNSI_OUTPUT_DIR", args.out)
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _model_config(d) -> ModelConfig:
    try:
        return ModelConfig.from_dict(d)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad model config: {exc}") from exc


def _schedule(d) -> TrainSchedule:
    try:
        return TrainSchedule.from_dict(d or {})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad schedule: {exc}") from exc


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args):
    cfg = _load_json(args.config)
    out = _out_dir(args)
    try:
        model_cfg = _model_config(cfg["teacher"])
        spec_args = {k: v for k, v in cfg.items() if k not in ("teacher", "seed")}
        for key in ("noise",):
            if key in spec_args:
                spec_args[key] = tuple(spec_args[key])
        spec = TeacherSpec(config=model_cfg, **spec_args)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    seed = int(cfg.get("seed", 0))
    dataset, teacher = generate_teacher_dataset(spec, seed)
    save_dataset(dataset, os.path.join(out, "dataset.bin"))
    save_model(teacher, os.path.join(out, "teacher.ckpt"))
    _write_json(os.path.join(out, "gen-data.json"),
                {"config_hash": config_hash(cfg), "seed": seed,
                 "num_stimuli": dataset.num_stimuli,
                 "num_neurons": dataset.num_neurons,
                 "num_trials": dataset.num_trials})
    print(f"wrote {out}/dataset.bin ({dataset.num_stimuli} stimuli)")
    return EXIT_OK


def _prepare_dataset(cfg, args):
    dataset = load_dataset(args.data, truncate_trials=cfg.get("truncate_trials"))
    if cfg.get("preprocess", True):
        dataset = preprocess(dataset, cfg.get("target_size",
                                              dataset.images.shape[1]))
    frac = cfg.get("training_fraction", 1.0)
    if frac < 1.0:
        dataset = training_subset(dataset, frac)
    return dataset


def _train_one(model_cfg, dataset, schedule, out, tag, cfg_hash):
    model = build_model(model_cfg)
    run_dir = os.path.join(out, tag)
    os.makedirs(run_dir, exist_ok=True)
    model, history = train(model, dataset, schedule,
                           history_path=os.path.join(run_dir, "history.csv"),
                           checkpoint_dir=run_dir)
    score, table = dataset_score(model, dataset)
    save_model(model, os.path.join(run_dir, "model.ckpt"))
    write_per_neuron_csv(os.path.join(run_dir, "per_neuron.csv"), table)
    result = {"tag": tag, "config_hash": cfg_hash, "seed": model_cfg.seed,
              "kind": model_cfg.kind, "multipath": model_cfg.multipath,
              "iterations": model_cfg.iterations,
              "readout_mode": model_cfg.readout_mode,
              "score": score, "best_val": history.best_val,
              "epochs": len(history.epochs),
              "conv_params": param_count(model)["conv"]}
    _write_json(os.path.join(run_dir, "result.json"), result)
    return model, result


def cmd_train(args):
    cfg = _load_json(args.config)
    out = _out_dir(args)
    model_cfg = _model_config(cfg["model"])
    schedule = _schedule(cfg.get("schedule"))
    dataset = _prepare_dataset(cfg, args)
    _, result = _train_one(model_cfg, dataset, schedule, out, "train",
                           config_hash(cfg))
    print(f"score {result['score']:.4f} after {result['epochs']} epochs")
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_json(args.config) if args.config else {}
    out = _out_dir(args)
    try:
        model = load_model(args.model)
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    dataset = _prepare_dataset(cfg, args)
    score, table = dataset_score(model, dataset)
    write_per_neuron_csv(os.path.join(out, "per_neuron.csv"), table)
    _write_json(os.path.join(out, "eval.json"),
                {"config_hash": config_hash(cfg), "score": score,
                 "seed": model.config.seed,
                 "n_reliable": int(table["reliable"].sum())})
    print(f"mean CC_norm^2: {score:.4f}")
    return EXIT_OK


def _sweep_grid(cfg):
    """Expand the sweep grid; every recurrent entry gets a parameter-matched
    feedforward twin."""
    base = cfg["model"]
    seeds = cfg.get("seeds", [0, 1])
    iterations = cfg.get("iterations", [3, 5, 7])
    modes = cfg.get("readout_modes", ["two_avg"])
    fractions = cfg.get("training_fractions", [1.0])
    entries = []
    for seed in seeds:
        for mode in modes:
            for frac in fractions:
                ff_done = set()
                for T in iterations:
                    rcfg = _model_config({**base, "kind": "recurrent",
                                          "iterations": T, "readout_mode": mode,
                                          "seed": seed})
                    fcfg = matched_feedforward_config(rcfg)
                    rtag = f"rec_T{T}_{mode}_s{seed}_f{int(frac * 100)}"
                    ftag = f"ff_b{fcfg.num_blocks}_s{seed}_f{int(frac * 100)}"
                    entries.append({"tag": rtag, "config": rcfg, "fraction": frac,
                                    "pair": ftag})
                    if ftag not in ff_done:
                        entries.append({"tag": ftag, "config": fcfg,
                                        "fraction": frac, "pair": None})
                        ff_done.add(ftag)
    return entries


def cmd_sweep(args):
    cfg = _load_json(args.config)
    out = _out_dir(args)
    schedule_cfg = cfg.get("schedule")
    dataset_full = _prepare_dataset({**cfg, "training_fraction": 1.0}, args)
    entries = _sweep_grid(cfg)
    cfg_hash = config_hash(cfg)
    manifest = []
    results = []
    for i, entry in enumerate(entries):
        schedule = _schedule(schedule_cfg)
        schedule = dataclasses.replace(schedule, seed=schedule.seed + i)
        dataset = (training_subset(dataset_full, entry["fraction"])
                   if entry["fraction"] < 1.0 else dataset_full)
        _, result = _train_one(entry["config"], dataset, schedule, out,
                               entry["tag"], cfg_hash)
        result["fraction"] = entry["fraction"]
        result["pair"] = entry["pair"]
        results.append(result)
        manifest.append({"tag": entry["tag"], "pair": entry["pair"],
                         "fraction": entry["fraction"],
                         "conv_params": result["conv_params"],
                         "score": result["score"]})
        print(f"[{i + 1}/{len(entries)}] {entry['tag']}: {result['score']:.4f}")
    _write_json(os.path.join(out, "manifest.json"),
                {"config_hash": cfg_hash, "runs": manifest})
    _write_json(os.path.join(out, "sweep_results.json"), results)
    return EXIT_OK


def cmd_multipath(args):
    out = _out_dir(args)
    try:
        model = load_model(args.model)
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    summary = mp.ensemble_summary(model)
    report = {
        "config_hash": config_hash(model.config.to_dict()),
        "seed": model.config.seed,
        "num_paths": len(summary.paths),
        "degenerate": summary.degenerate,
        "average_path_length": None if summary.degenerate
        else summary.average_path_length,
        "diversity": summary.diversity,
        "paths": [{"entry": list(p.entry_iterations), "end": p.end_iteration,
                   "length": p.length,
                   "strength": float(s)}
                  for p, s in zip(summary.paths, summary.strengths)],
    }
    _write_json(os.path.join(out, "ensemble.json"), report)
    if summary.degenerate:
        print("degenerate ensemble: all path strengths are zero")
    else:
        print(f"{len(summary.paths)} paths, average length "
              f"{summary.average_path_length:.3f}")
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load_json(args.config)
    out = _out_dir(args)
    model_cfg = _model_config(cfg["model"])
    if model_cfg.kind != "recurrent":
        raise ConfigError("ablation requires a recurrent model config")
    schedule = _schedule(cfg.get("schedule"))
    dataset = _prepare_dataset(cfg, args)
    cfg_hash = config_hash(cfg)

    base_model, base_result = _train_one(
        dataclasses.replace(model_cfg, multipath=True), dataset, schedule,
        out, "multipath_baseline", cfg_hash)
    baseline = base_result["score"]

    lengths = sorted({p.length for p in mp.enumerate_paths(
        model_cfg.num_recurrent_blocks, model_cfg.iterations,
        model_cfg.readout_mode)})
    if args.windows:
        windows = mp.length_windows(lengths, args.windows)
    else:
        windows = [tuple(l for l in lengths if l != keep) for keep in lengths]
    rows = []
    for window in windows:
        if not set(lengths) - set(window):
            continue
        _, score, delta = mp.ablate_paths(model_cfg, window, dataset, schedule,
                                          baseline_score=baseline)
        rows.append({"removed": list(window), "score": score, "delta": delta})
        print(f"removed {window}: score {score:.4f} (delta {delta:+.4f})")
    _write_json(os.path.join(out, "ablation.json"),
                {"config_hash": cfg_hash, "seed": model_cfg.seed,
                 "baseline": baseline, "rows": rows})
    with open(os.path.join(out, "ablation.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["removed_lengths", "score", "delta"])
        for r in rows:
            w.writerow(["-".join(map(str, r["removed"])),
                        f"{r['score']:.6f}", f"{r['delta']:.6f}"])
    return EXIT_OK


def cmd_neurophys(args):
    out = _out_dir(args)
    if args.model:
        try:
            model = load_model(args.model)
        except (FileNotFoundError, ValueError) as exc:
            raise DataError(str(exc)) from exc
    else:
        model = np_mod.build_suppressive_circuit()
    rfmap = np_mod.map_receptive_fields(model)
    lt = np_mod.length_tuning(model, rfmap)
    st = np_mod.size_tuning(model, rfmap)
    td = np_mod.temporal_dynamics(model)
    lt["last"].write_csv(os.path.join(out, "length_tuning_last.csv"))
    lt["first"].write_csv(os.path.join(out, "length_tuning_first.csv"))
    st["last"].write_csv(os.path.join(out, "size_tuning_last.csv"))
    st["first"].write_csv(os.path.join(out, "size_tuning_first.csv"))
    summary = {
        "config_hash": config_hash(model.config.to_dict()),
        "seed": model.config.seed,
        "length_si_first": np_mod.suppression_index(lt["first"]),
        "length_si_last": np_mod.suppression_index(lt["last"]),
        "size_si_first": np_mod.suppression_index(st["first"]),
        "size_si_last": np_mod.suppression_index(st["last"]),
        "temporal_dynamics": [float(v) for v in td],
    }
    _write_json(os.path.join(out, "neurophys.json"), summary)
    print(f"size-tuning SI first {summary['size_si_first']:.3f} "
          f"last {summary['size_si_last']:.3f}")
    return EXIT_OK


def cmd_report(args):
    out = _out_dir(args)
    results_path = os.path.join(args.results, "sweep_results.json")
    if not os.path.exists(results_path):
        raise DataError(f"no sweep results at {results_path}")
    with open(results_path) as fh:
        results = json.load(fh)
    if not results:
        raise DataError("empty results")
    by_tag = {r["tag"]: r for r in results}
    pairs = []
    for r in results:
        if r.get("pair") and r["pair"] in by_tag:
            f = by_tag[r["pair"]]
            gain = ((r["score"] - f["score"]) / abs(f["score"])
                    if f["score"] else float("nan"))
            pairs.append({"recurrent": r["tag"], "feedforward": f["pair"] or f["tag"],
                          "rec_score": r["score"], "ff_score": f["score"],
                          "relative_gain": gain,
                          "fraction": r.get("fraction", 1.0)})
    _write_json(os.path.join(out, "report.json"),
                {"config_hash": config_hash(results), "pairs": pairs})
    with open(os.path.join(out, "pairs.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["recurrent", "feedforward", "fraction",
                    "rec_score", "ff_score", "relative_gain"])
        for p in pairs:
            w.writerow([p["recurrent"], p["feedforward"], p["fraction"],
                        f"{p['rec_score']:.6f}", f"{p['ff_score']:.6f}",
                        f"{p['relative_gain']:.6f}"])
    if args.plot_data:
        with open(os.path.join(out, "scatter.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tag", "kind", "iterations", "fraction", "score"])
            for r in results:
                w.writerow([r["tag"], r["kind"], r["iterations"],
                            r.get("fraction", 1.0), f"{r['score']:.6f}"])
    print(f"{len(pairs)} matched pairs reported")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="recnsi",
                                description="recurrent encoding-model toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic teacher dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", default="out")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", default="out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config")
    e.add_argument("--out", default="out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train a matched recurrent/feedforward grid")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", default="out")
    s.add_argument("--jobs", type=int, default=1,
                   help="reserved for process-level parallelism")
    s.set_defaults(func=cmd_sweep)

    m = sub.add_parser("multipath", help="path-ensemble report for a checkpoint")
    m.add_argument("--model", required=True)
    m.add_argument("--out", default="out")
    m.set_defaults(func=cmd_multipath)

    a = sub.add_parser("ablate", help="retrain with path-length windows removed")
    a.add_argument("--config", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--windows", type=int, default=0,
                   help="width of sliding removed-length windows")
    a.add_argument("--out", default="out")
    a.set_defaults(func=cmd_ablate)

    n = sub.add_parser("neurophys", help="tuning curves and suppression indices")
    n.add_argument("--model", help="checkpoint; defaults to the built-in circuit")
    n.add_argument("--out", default="out")
    n.set_defaults(func=cmd_neurophys)

    r = sub.add_parser("report", help="aggregate sweep results")
    r.add_argument("--results", required=True)
    r.add_argument("--plot-data", action="store_true")
    r.add_argument("--out", default="out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
