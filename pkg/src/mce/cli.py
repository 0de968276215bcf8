"""Command-line entry point: ``mce <subcommand> [flags]``.

Every subcommand reads the same INI config (``--config``) with
``--override section.key=value`` and ``--seed`` applied on top, and writes
into a run directory (``--out``, default ``runs/<config digest>``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import plotting
from .analysis import (ABLATION_COLUMNS, ABLATION_ROWS, CAPABILITY_COLUMNS, REPR_COLUMNS, ablation_settings,
                       capability_report, repr_quality)
from .coalition import exact_shapley, mc_shapley, read_game_file
from .config import ExperimentConfig, dump_config, load_config
from .csvio import file_hash, read_csv, write_csv
from .errors import ConfigurationError
from .model import load_checkpoint, load_frozen, save_frozen
from .synth_data import export_csv, generate, generate_test, save_dataset
from .trainer import (EVAL_COLUMNS, FACTOR_COLUMNS, LOSS_COLUMNS, PROBE_COLUMNS, encoder_params,
                      evaluate_all_subsets, fused_features, pretrain_all, probe_capability, train_mce)

log = logging.getLogger("mce")

SUBCOMMANDS = ("gen-data", "pretrain", "train", "eval", "probe", "shapley", "ablate", "report")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--seed", type=int, metavar="U64")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    parser = argparse.ArgumentParser(prog="mce", description="Modality capability enhancement experiments")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.add_parser("gen-data", parents=[common], help="write the synthetic train/test split")
    sub.add_parser("pretrain", parents=[common], help="pretrain the frozen unimodal models")
    sub.add_parser("train", parents=[common], help="pretrain, then joint training")
    sub.add_parser("eval", parents=[common], help="all-subset accuracy of a trained run")
    sub.add_parser("probe", parents=[common], help="capability probes of a trained run's encoders")
    p = sub.add_parser("shapley", parents=[common], help="Shapley values of a game file")
    p.add_argument("--game", required=True, metavar="PATH")
    p.add_argument("--method", choices=("exact", "mc"), default="exact")
    p.add_argument("--K", type=int, default=100)
    p = sub.add_parser("ablate", parents=[common], help="component ablation grid")
    p.add_argument("--rows", default="".join(ABLATION_ROWS), help="row letters to run, e.g. 'am'")
    p = sub.add_parser("report", parents=[common], help="tables and figures from logged runs")
    p.add_argument("--compare", nargs=2, metavar="DIR")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.override)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
        cfg.validate()
    return cfg


def _out(args, cfg) -> Path:
    out = Path(args.out) if args.out else Path("runs") / cfg.digest()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data(cfg):
    return generate(cfg.synth), generate_test(cfg.synth, cfg.run.test_samples)


def _write_manifest(out: Path, cfg: ExperimentConfig, outputs, extra=None):
    manifest = {
        "config_digest": cfg.digest(),
        "config": cfg.as_dict(),
        "seeds": {"synth": cfg.synth.seed, "train": cfg.train.seed},
        "rng": "numpy PCG64 (default_rng), streams keyed by [seed, stream id]",
        "outputs": {name: file_hash(out / name) for name in sorted(outputs)},
    }
    if extra:
        manifest.update(extra)
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=list) + "\n",
                                       encoding="utf-8")


def cmd_gen_data(args, cfg):
    out = _out(args, cfg)
    train, test = _data(cfg)
    for name, ds in (("train", train), ("test", test)):
        save_dataset(ds, out / name)
        export_csv(ds, out / f"{name}.csv")
    _write_manifest(out, cfg, ["train.csv", "test.csv"], {"dataset": train.fingerprint()})
    print(f"wrote {train.n} train / {test.n} test samples to {out}")


def _pretrain(cfg, out, train, test):
    frozen = pretrain_all(train, cfg.model_config(), cfg.train, holdout=test)
    save_frozen(frozen, out / "frozen")
    rows = [{"modality": f.modality, "upperbound": f.accuracy} for f in frozen]
    write_csv(out / "upperbound.csv", ("modality", "upperbound"), rows)
    return frozen


def cmd_pretrain(args, cfg):
    out = _out(args, cfg)
    train, test = _data(cfg)
    frozen = _pretrain(cfg, out, train, test)
    _write_manifest(out, cfg, ["upperbound.csv"], {"dataset": train.fingerprint()})
    print("unimodal accuracy:", ", ".join(f"m{f.modality + 1}={f.accuracy:.4f}" for f in frozen))


def _train_run(cfg, out):
    train, test = _data(cfg)
    frozen = _pretrain(cfg, out, train, test)
    model, runlog = train_mce(train, frozen, cfg.model_config(), cfg.train, test=test, run_dir=out)
    rows, avg = evaluate_all_subsets(model, test)
    final = cfg.train.epochs
    eval_rows = [r for r in runlog.eval_rows if r["epoch"] != final]
    eval_rows += [{"epoch": final, "subset": r["subset"], "samples": r["samples"], "accuracy": r["accuracy"]}
                  for r in rows]
    eval_rows.append({"epoch": final, "subset": "average", "samples": test.n, "accuracy": avg})
    probes = runlog.probe_rows
    if not any(r["epoch"] == final for r in probes):
        probes = probes + [{"epoch": final, "modality": m,
                            "capability": probe_capability(encoder_params(model, m), m, train, test, cfg.train,
                                                           seed=cfg.train.seed)}
                           for m in range(train.modality_count)]
    rq = repr_quality(fused_features(model, test), test.y)
    write_csv(out / "losses.csv", LOSS_COLUMNS, runlog.loss_rows)
    write_csv(out / "factors.csv", FACTOR_COLUMNS, runlog.factor_rows)
    write_csv(out / "eval.csv", EVAL_COLUMNS, eval_rows)
    write_csv(out / "probes.csv", PROBE_COLUMNS, probes)
    write_csv(out / "repr_quality.csv", REPR_COLUMNS, [rq.as_row()])
    write_csv(out / "factor_A.csv", ("modality", "A"),
              [{"modality": m, "A": float(a)} for m, a in enumerate(runlog.A)])
    outputs = ["losses.csv", "factors.csv", "eval.csv", "probes.csv", "repr_quality.csv", "factor_A.csv",
               "upperbound.csv"]
    _write_manifest(out, cfg, outputs, {"dataset": train.fingerprint(), "steps": len(runlog.loss_rows)})
    return avg, rq


def cmd_train(args, cfg):
    out = _out(args, cfg)
    avg, rq = _train_run(cfg, out)
    print(f"average all-subset accuracy {avg:.4f}; intra/inter ratio {rq.ratio:.4f}; run dir {out}")


def _load_trained(out):
    if not (out / "model.json").exists():
        raise ConfigurationError(f"no trained model in {out}; run 'train' first", field="out")
    model, _ = load_checkpoint(out / "model")
    return model


def cmd_eval(args, cfg):
    out = _out(args, cfg)
    model = _load_trained(out)
    _, test = _data(cfg)
    rows, avg = evaluate_all_subsets(model, test)
    rows = [{"epoch": cfg.train.epochs, "subset": r["subset"], "samples": r["samples"], "accuracy": r["accuracy"]}
            for r in rows]
    rows.append({"epoch": cfg.train.epochs, "subset": "average", "samples": test.n, "accuracy": avg})
    write_csv(out / "eval_subsets.csv", EVAL_COLUMNS, rows)
    rq = repr_quality(fused_features(model, test), test.y)
    write_csv(out / "repr_quality.csv", REPR_COLUMNS, [rq.as_row()])
    for r in rows:
        print(f"{r['subset']:>10}  {r['accuracy']:.4f}")


def cmd_probe(args, cfg):
    out = _out(args, cfg)
    model = _load_trained(out)
    train, test = _data(cfg)
    ceilings = {}
    if (out / "frozen.json").exists():
        ceilings = {f.modality: f.accuracy for f in load_frozen(out / "frozen")}
    rows = []
    for m in range(train.modality_count):
        acc = probe_capability(encoder_params(model, m), m, train, test, cfg.train, seed=cfg.train.seed)
        rows.append({"epoch": cfg.train.epochs, "modality": m, "capability": acc,
                     "upperbound": ceilings.get(m, float("nan"))})
        print(f"m{m + 1}: capability {acc:.4f}")
    write_csv(out / "probe.csv", CAPABILITY_COLUMNS, rows)


def cmd_shapley(args, cfg):
    game = read_game_file(args.game)
    if args.method == "exact":
        res = exact_shapley(game)
    else:
        res = mc_shapley(game, K=args.K, seed=args.seed if args.seed is not None else 0)
    rows = [{"player": i, "phi": float(v)} for i, v in enumerate(res.phi)]
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_csv(Path(args.out) / "shapley.csv", ("player", "phi"), rows)
    print("player,phi")
    for r in rows:
        print(f"{r['player']},{r['phi']!r}")


def cmd_ablate(args, cfg):
    out = _out(args, cfg)
    letters = [c for c in args.rows if c in ABLATION_ROWS]
    if not letters or len(letters) != len(args.rows):
        raise ConfigurationError(f"--rows must use letters from {''.join(ABLATION_ROWS)}", field="rows")
    seeds = list(cfg.run.ablation_seeds) if args.seed is None else [args.seed]
    results = []
    for seed in seeds:
        base = cfg.with_seed(seed)
        train, test = _data(base)
        frozen = pretrain_all(train, base.model_config(), base.train, holdout=test)
        for row in letters:
            tcfg = replace(base.train, **ablation_settings(row, cfg.train.lambdas))
            model, _ = train_mce(train, frozen, base.model_config(), tcfg, test=None)
            _, avg = evaluate_all_subsets(model, test)
            flags = ABLATION_ROWS[row]
            results.append({"row": row, "A": flags[0], "B": flags[1], "single": flags[2], "sub": flags[3],
                            "aux": flags[4], "seed": seed, "average_accuracy": avg})
            print(f"{row}  seed {seed}  {avg:.4f}", flush=True)
    write_csv(out / "ablation.csv", ABLATION_COLUMNS, results)
    _write_manifest(out, cfg, ["ablation.csv"])


def _capability_rows(run: Path):
    probes = read_csv(run / "probes.csv")
    ceilings = {r["modality"]: r["upperbound"] for r in read_csv(run / "upperbound.csv")}
    return capability_report(probes, ceilings)


def cmd_report(args, cfg):
    if args.compare:
        runs = [Path(d) for d in args.compare]
        out = Path(args.out) if args.out else runs[0]
    else:
        out = Path(args.out) if args.out else Path("runs") / cfg.digest()
        runs = [out]
    for r in runs:
        if not (r / "probes.csv").exists():
            raise ConfigurationError(f"{r} has no logged run (probes.csv missing)", field="out")
    out.mkdir(parents=True, exist_ok=True)
    tables = {}
    for r in runs:
        rows = _capability_rows(r)
        name = "capability.csv" if len(runs) == 1 else f"capability_{r.name}.csv"
        write_csv(out / name, CAPABILITY_COLUMNS, rows)
        tables[r.name] = rows
        if (r / "factors.csv").exists():
            plotting.plot_factor_traces(read_csv(r / "factors.csv"), out / f"factor_traces_{r.name}.png")
        if (r / "losses.csv").exists():
            plotting.plot_losses(read_csv(r / "losses.csv"), out / f"losses_{r.name}.png")
    plotting.plot_capability(tables, out / ("capability.png" if len(runs) == 1 else "capability_compare.png"))
    print(f"report written to {out}")


HANDLERS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
    "probe": cmd_probe, "shapley": cmd_shapley, "ablate": cmd_ablate, "report": cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        HANDLERS[args.command](args, cfg)
    except ConfigurationError as exc:
        where = f"{exc.field}: " if exc.field else ""
        print(f"mce: error: {where}{exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"mce: error: {exc}", file=sys.stderr)
        return 1
    return 0


cli_main = main

if __name__ == "__main__":
    sys.exit(main())
