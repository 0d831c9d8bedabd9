"""Command-line entry point: ``iclsynth <command> [flags]``.

Every command resolves its parameters as defaults <- ``--config`` JSON file <-
explicit flags, prints the resolved record and writes it as
``run_config.json`` beside its outputs. Exit codes: 0 success, 2 usage or
configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import metrics
from .corpus import (DEFAULT_VARIANTS, INFERENCE_CONTEXT_RATIO, ManifestError, desk_manifest,
                     dump_manifest, expand_corpus, parse_manifest, read_corpus, write_corpus)
from .denoiser import DESK_DENOISER, PAPER_DENOISER, load_checkpoint
from .encdec import (DESK_DECODER, PAPER_DECODER, DataError, DivergenceError, SchemaError, Table,
                     read_table, write_table)
from .ndnum import ContractError
from .pipeline import (DEFAULT_SYNTH_ROWS, DESK_TRAIN, PAPER_TRAIN, TrainConfig, TrainingError,
                       pretrain, select_checkpoint, synthesize, train_dataset_specific)
from .schedule import DomainError

log = logging.getLogger("iclsynth")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ABLATE_EPOCHS = {"S": 2000, "N": 20}
ICL_RATIOS = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
PRESETS = {
    "desk": (DESK_DENOISER, DESK_TRAIN, DESK_DECODER),
    "paper": (PAPER_DENOISER, PAPER_TRAIN, PAPER_DECODER),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"command": self.command, **self.params}

    def write(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "run_config.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


# Per-command defaults; every key is also a flag (underscores -> dashes).
DEFAULTS: dict[str, dict] = {
    "corpus": {"manifest": None, "desk_tasks": 200, "manifest_seed": 0, "out": None,
               "variants": DEFAULT_VARIANTS, "no_permute": False},
    "pretrain": {"corpus": None, "out": None, "preset": "desk", "epochs": None, "lr": None,
                 "warmup_ratio": None, "seed": 0, "encoder_seed": 0, "checkpoint_every": None,
                 "dtype": None, "validation": None},
    "synth": {"checkpoint": None, "data": None, "schema": None, "k": DEFAULT_SYNTH_ROWS,
              "ratio": INFERENCE_CONTEXT_RATIO, "seed": 0, "encoder_seed": 0, "preset": "desk",
              "decoder_epochs": None, "out": None},
    "eval": {"syn": None, "train": None, "val": None, "test": None, "learners": list(metrics.LEARNERS),
             "k_neighbors": 5, "out": None, "dataset": None, "method": None, "seed": None},
    "frontier": {"data": None, "mode": "dataset_specific", "checkpoint": None, "n": 200,
                 "cadence": 1000, "epochs": 8000, "k": 500, "seed": 0, "preset": "desk",
                 "learner": "boosted_stumps", "ratios": list(ICL_RATIOS), "out": None},
    "ablate": {"data": None, "variant": "S", "manifest": None, "desk_tasks": 20, "manifest_seed": 0,
               "validation_tasks": 5, "n": 200, "epochs": None, "k": 500, "seed": 0, "preset": "desk",
               "out": None},
    "report": {"inputs": [], "out": None},
}
REQUIRED = {"corpus": ["out"], "pretrain": ["corpus", "out"], "synth": ["checkpoint", "data", "out"],
            "eval": ["syn", "train", "test", "out"], "frontier": ["data", "out"],
            "ablate": ["data", "out"], "report": ["inputs", "out"]}


def resolve(command: str, flags: dict, config_path: str | None) -> RunConfig:
    params = dict(DEFAULTS[command])
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        unknown = set(loaded) - set(params) - {"command"}
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
        params.update({k: v for k, v in loaded.items() if k != "command"})
    params.update({k: v for k, v in flags.items() if v is not None and k in params})
    missing = [k for k in REQUIRED[command] if params.get(k) in (None, [])]
    if missing:
        raise ConfigError(f"{command}: missing required setting(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    if "preset" in params and params["preset"] not in PRESETS:
        raise ConfigError(f"unknown preset {params['preset']!r}")
    return RunConfig(command, params)


def _train_config(p: dict) -> TrainConfig:
    base = PRESETS[p["preset"]][1]
    over = {k: p[k] for k in ("epochs", "lr", "warmup_ratio", "checkpoint_every", "dtype") if p.get(k) is not None}
    over.update(seed=p.get("seed", 0), encoder_seed=p.get("encoder_seed", 0))
    try:
        return replace(base, **over)
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc


def _decoder_config(p: dict):
    dec = PRESETS[p.get("preset", "desk")][2]
    if p.get("decoder_epochs") is not None:
        dec = replace(dec, epochs=int(p["decoder_epochs"]))
    return dec


def _split_eval(table: Table, n: int, seed: int) -> tuple[Table, Table, Table]:
    """Disjoint train (n rows) / val / test halves of the remainder."""
    rest = table.n_rows - n
    if n < 10 or rest < 20:
        raise DataError(f"dataset has {table.n_rows} rows; need n={n} training rows plus >= 20 held out")
    perm = np.random.default_rng([seed, 7]).permutation(table.n_rows)
    half = n + rest // 2
    return table.take(perm[:n]), table.take(perm[n:half]), table.take(perm[half:])


# ------------------------------------------------------------------ commands

def cmd_corpus(p: dict, out: Path) -> None:
    if p["manifest"]:
        try:
            text = Path(p["manifest"]).read_text()
        except OSError as exc:
            raise DataError(f"cannot read manifest: {exc}") from exc
        specs = parse_manifest(text)
    else:
        specs = desk_manifest(int(p["desk_tasks"]), seed=int(p["manifest_seed"]))
    k = 1 if p["no_permute"] else int(p["variants"])
    paths = write_corpus(specs, out, k=k, permute=not p["no_permute"])
    print(dump_manifest(specs) if len(specs) <= 20 else f"{len(specs)} tasks")
    print(f"wrote {len(paths)} datasets to {out}")


def cmd_pretrain(p: dict, out: Path) -> None:
    denoiser_cfg = PRESETS[p["preset"]][0]
    train_cfg = _train_config(p)
    print(json.dumps({"denoiser": denoiser_cfg.to_dict(), "train": train_cfg.to_dict()}, sort_keys=True))
    data = read_corpus(p["corpus"])
    ckpts = pretrain(data, denoiser_cfg, train_cfg, out_dir=out)
    if p["validation"]:
        val = read_corpus(p["validation"])
        best, report = select_checkpoint(ckpts, val, [i for i, _ in data], train_cfg.encoder_seed,
                                         seed=train_cfg.seed)
        (out / "selection.json").write_text(json.dumps(
            {**report.to_dict(), "best_checkpoint": str(best.path)}, indent=2, sort_keys=True))
        print(f"selected step {best.step} (validation FID {best.fid:.4f})")
    print(f"{len(ckpts)} checkpoints in {out}")


def cmd_synth(p: dict, out: Path) -> None:
    model, _ = load_checkpoint(p["checkpoint"])
    table = read_table(p["data"], p["schema"])
    res = synthesize(table, model, k=int(p["k"]), ratio=float(p["ratio"]), seed=int(p["seed"]),
                     encoder_seed=int(p["encoder_seed"]), decoder_config=_decoder_config(p))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(res.table, out)
    sidecar = {"seeds": res.seeds, "decoder_losses": res.decoder_losses, "rows": res.table.n_rows,
               "context_rows": len(res.context_rows), "query_rows": len(res.query_rows)}
    Path(str(out) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    print(f"wrote {res.table.n_rows} rows to {out}")


def cmd_eval(p: dict, out: Path) -> None:
    syn, train, test = read_table(p["syn"]), read_table(p["train"]), read_table(p["test"])
    val = read_table(p["val"]) if p["val"] else None
    rep = metrics.evaluate(syn, train, test, val, p["learners"], int(p["k_neighbors"]))
    rep.meta = {k: p[k] for k in ("dataset", "method", "seed") if p.get(k) is not None}
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.save_report(rep, out)
    print(json.dumps(rep.to_dict(), sort_keys=True))


def _quality_privacy(syn: Table, train: Table, val: Table, test: Table, learner: str) -> tuple[float, float]:
    _, privacy = metrics.dcr_overfit(syn, train, val)
    return metrics.utility(syn, test, learner), privacy


def cmd_frontier(p: dict, out: Path) -> None:
    table = read_table(p["data"])
    train, val, test = _split_eval(table, int(p["n"]), int(p["seed"]))
    dec = _decoder_config(p)
    points = []
    if p["mode"] == "dataset_specific":
        cfg = replace(_train_config({**p, "checkpoint_every": int(p["cadence"]), "lr": None,
                                     "warmup_ratio": None, "dtype": None, "encoder_seed": 0}))
        ckpts = train_dataset_specific(train, PRESETS[p["preset"]][0], cfg, out_dir=out.parent / "frontier_ckpts")
        for ck in ckpts[1:]:
            res = synthesize(train, ck.model, k=int(p["k"]), seed=int(p["seed"]), decoder_config=dec)
            q, pr = _quality_privacy(res.table, train, val, test, p["learner"])
            points.append(metrics.FrontierPoint(ck.step, q, pr))
            print(f"step {ck.step}: quality {q:.4f} privacy {pr:.4f}")
    elif p["mode"] == "icl":
        if not p["checkpoint"]:
            raise ConfigError("icl mode needs --checkpoint")
        model, _ = load_checkpoint(p["checkpoint"])
        for r in p["ratios"]:
            res = synthesize(train, model, k=int(p["k"]), ratio=float(r), seed=int(p["seed"]), decoder_config=dec)
            q, pr = _quality_privacy(res.table, train, val, test, p["learner"])
            points.append(metrics.FrontierPoint(float(r), q, pr))
            print(f"ratio {r}: quality {q:.4f} privacy {pr:.4f}")
    else:
        raise ConfigError(f"unknown frontier mode {p['mode']!r}")
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_frontier(points, out, key="step_or_ratio")


def cmd_ablate(p: dict, out: Path) -> None:
    table = read_table(p["data"])
    train, val, test = _split_eval(table, int(p["n"]), int(p["seed"]))
    denoiser_cfg = PRESETS[p["preset"]][0]
    cfg = _train_config({**p, "lr": None, "warmup_ratio": None, "checkpoint_every": 0, "dtype": None,
                         "encoder_seed": 0})
    work = out.parent / f"ablate_{p['variant']}"
    if p["epochs"] is None:
        # one step per epoch on a single dataset (S) vs one pass over the corpus (N)
        cfg = replace(cfg, epochs=ABLATE_EPOCHS.get(p["variant"], 20))
    if p["variant"] == "S":
        model = train_dataset_specific(train, denoiser_cfg, cfg, out_dir=work)[-1].model
    elif p["variant"] == "N":
        specs = (parse_manifest(Path(p["manifest"]).read_text()) if p["manifest"]
                 else desk_manifest(int(p["desk_tasks"]), seed=int(p["manifest_seed"])))
        corpus = expand_corpus(specs, k=1, permute=False)
        ckpts = pretrain(corpus, denoiser_cfg, cfg, out_dir=work)
        held = desk_manifest(int(p["validation_tasks"]), seed=int(p["manifest_seed"]) + 10_000)
        model = select_checkpoint(ckpts, expand_corpus(held, k=1, permute=False), [i for i, _ in corpus],
                                  seed=int(p["seed"]))[0].model
    else:
        raise ConfigError(f"unknown ablation variant {p['variant']!r}")
    res = synthesize(train, model, k=int(p["k"]), seed=int(p["seed"]), decoder_config=_decoder_config(p))
    rep = metrics.evaluate(res.table, train, test, val)
    rep.meta = {"method": f"ablation_{p['variant']}", "seed": int(p["seed"]), "dataset": Path(p["data"]).stem}
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.save_report(rep, out)
    print(json.dumps(rep.to_dict(), sort_keys=True))


def _flatten(rep: metrics.MetricReport) -> dict:
    flat = {k: getattr(rep, k) for k in ("dcr_overfit", "shape", "trend", "ip_alpha", "ir_beta", "balanced_score")}
    flat.update({f"utility_{k}": v for k, v in rep.utility.items()})
    return {k: v for k, v in flat.items() if v is not None}


def cmd_report(p: dict, out: Path) -> None:
    """Aggregate many reports: mean/std per (dataset, method, metric), z-scored
    correlation matrices, and long-format plot data."""
    reports = []
    for path in p["inputs"]:
        try:
            reports.append(metrics.load_report(path))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"cannot read report {path}: {exc}") from exc
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, rep in enumerate(reports):
        ds = str(rep.meta.get("dataset", "default"))
        method = str(rep.meta.get("method", "default"))
        for metric, value in _flatten(rep).items():
            rows.append((ds, method, metric, i, float(value)))
    groups: dict = {}
    for ds, method, metric, _, v in rows:
        groups.setdefault((ds, method, metric), []).append(v)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "method", "metric", "n", "mean", "std"])
        for (ds, method, metric), vals in sorted(groups.items()):
            v = np.asarray(vals)
            std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
            w.writerow([ds, method, metric, len(v), repr(float(v.mean())), repr(std)])
    # z-normalise within (dataset, metric) across methods and seeds
    by_dm: dict = {}
    for ds, method, metric, i, v in rows:
        by_dm.setdefault((ds, metric), []).append((i, v))
    dropped: list = []
    z = metrics.zscore_normalize({k: [v for _, v in items] for k, items in by_dm.items()}, dropped)
    points: dict = {}
    for (ds, metric), values in z.items():
        for (i, _), zv in zip(by_dm[(ds, metric)], values):
            points.setdefault(i, {})[metric] = float(zv)
    names = sorted({m for _, _, m, _, _ in rows})
    corr = metrics.correlation_matrix([points[i] for i in sorted(points)], names)
    metrics.write_matrix_csv(corr.metrics, corr.pearson, out / "correlation_pearson.csv")
    metrics.write_matrix_csv(corr.metrics, corr.spearman, out / "correlation_spearman.csv")
    with open(out / "plot_data.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "method", "report", "metric", "value", "zscore"])
        for ds, method, metric, i, v in rows:
            zv = points.get(i, {}).get(metric)
            w.writerow([ds, method, i, metric, repr(v), "" if zv is None else repr(zv)])
    (out / "dropped_groups.json").write_text(json.dumps([list(k) for k in dropped], indent=2))
    print(f"aggregated {len(reports)} report(s) into {out}")


COMMANDS: dict[str, Callable[[dict, Path], None]] = {
    "corpus": cmd_corpus, "pretrain": cmd_pretrain, "synth": cmd_synth, "eval": cmd_eval,
    "frontier": cmd_frontier, "ablate": cmd_ablate, "report": cmd_report,
}
# where run_config.json goes: the output directory, or beside an output file
OUT_IS_DIR = {"corpus", "pretrain", "report"}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="iclsynth", description="In-context latent diffusion for small tables.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file of settings (flags override it)")
        return sp

    c = cmd("corpus", "materialise a procedural corpus")
    c.add_argument("--manifest")
    c.add_argument("--desk-tasks", type=int, help="generate a desk manifest of this many tasks (default 200)")
    c.add_argument("--manifest-seed", type=int)
    c.add_argument("--out")
    c.add_argument("--variants", type=int, help="permutation variants per task (default 5)")
    c.add_argument("--no-permute", action="store_true", default=None)

    c = cmd("pretrain", "pretrain the conditional denoiser on a corpus")
    c.add_argument("--corpus")
    c.add_argument("--out")
    c.add_argument("--preset", choices=sorted(PRESETS))
    c.add_argument("--epochs", type=int)
    c.add_argument("--lr", type=float)
    c.add_argument("--warmup-ratio", type=float)
    c.add_argument("--seed", type=int)
    c.add_argument("--encoder-seed", type=int)
    c.add_argument("--checkpoint-every", type=int)
    c.add_argument("--dtype", choices=["float32", "float64"])
    c.add_argument("--validation", help="corpus directory of held-out tasks for FID selection")

    c = cmd("synth", "generate a synthetic table from one dataset")
    c.add_argument("--checkpoint")
    c.add_argument("--data")
    c.add_argument("--schema")
    c.add_argument("--k", type=int, help="rows to generate (default 2500)")
    c.add_argument("--ratio", type=float, help="context ratio (default 0.3)")
    c.add_argument("--seed", type=int)
    c.add_argument("--encoder-seed", type=int)
    c.add_argument("--preset", choices=sorted(PRESETS))
    c.add_argument("--decoder-epochs", type=int)
    c.add_argument("--out")

    c = cmd("eval", "evaluate a synthetic table")
    for f in ("syn", "train", "val", "test", "out", "dataset", "method"):
        c.add_argument(f"--{f}")
    c.add_argument("--seed", type=int)
    c.add_argument("--learners", nargs="+", choices=list(metrics.LEARNERS))
    c.add_argument("--k-neighbors", type=int)

    c = cmd("frontier", "trace the quality/privacy frontier")
    c.add_argument("--data")
    c.add_argument("--mode", choices=["dataset_specific", "icl"])
    c.add_argument("--checkpoint")
    c.add_argument("--n", type=int)
    c.add_argument("--cadence", type=int, help="epochs between checkpoints")
    c.add_argument("--epochs", type=int)
    c.add_argument("--k", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--preset", choices=sorted(PRESETS))
    c.add_argument("--learner", choices=list(metrics.LEARNERS))
    c.add_argument("--ratios", type=float, nargs="+")
    c.add_argument("--out")

    c = cmd("ablate", "run the S (single dataset) or N (no permutation) ablation")
    c.add_argument("--data")
    c.add_argument("--variant", choices=["S", "N"])
    c.add_argument("--manifest")
    c.add_argument("--desk-tasks", type=int)
    c.add_argument("--manifest-seed", type=int)
    c.add_argument("--validation-tasks", type=int)
    c.add_argument("--n", type=int)
    c.add_argument("--epochs", type=int)
    c.add_argument("--k", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--preset", choices=sorted(PRESETS))
    c.add_argument("--out")

    c = cmd("report", "aggregate metric reports")
    c.add_argument("--inputs", nargs="+")
    c.add_argument("--out")
    del S
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        ns = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "verbose")}
    try:
        run = resolve(ns.command, flags, ns.config)
        out = Path(run.params["out"])
        run.write(out if ns.command in OUT_IS_DIR else out.parent)
        COMMANDS[ns.command](run.params, out)
    except (ConfigError, ContractError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SchemaError, ManifestError, metrics.MetricError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, DivergenceError, ArithmeticError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
