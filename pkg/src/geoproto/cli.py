"""``geoproto`` command line: train, eval, ablate, validate-prior, export-episodes.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import plotting
from .checkpoint import CheckpointFormatError
from .config import ConfigKeyError, TrainConfig, load_config
from .episodes import DEFAULT_FAMILIES, GenerationError, episode_seed
from .geometry import binmap_to_gray, bin_map
from .metrics import SUMMARY_COLUMNS, aggregate, paired_deltas, write_csv, write_records
from .pgm import write_pgm
from .prior import validate_prior
from .trainer import (HELDOUT_COLUMNS, LOG_COLUMNS, ModelParams, evaluate, feature_grid, load_checkpoint,
                      make_episode, train)

log = logging.getLogger("geoproto")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


SWEEPS = {
    "components": [
        ("baseline", {"enrichment": False, "osb_loss": False}),
        ("+PE", {"enrichment": False, "osb_loss": False, "position_embedding": True}),
        ("+Geo-E", {"enrichment": True, "osb_loss": False}),
        ("+OSB-L", {"enrichment": False, "osb_loss": True}),
        ("full", {"enrichment": True, "osb_loss": True}),
    ],
    "fusion": [("fusion=" + m, {"fusion": m}) for m in ("additive", "concat_proj", "scale_gate")],
    "bins": [(f"K={k}", {"K": k}) for k in (5, 10, 15, 20)],
    "grid": [(f"G={g}", {"G": g}) for g in (2, 4, 8, 16)],
}
BASELINE = ("baseline", {"enrichment": False, "osb_loss": False})

ABLATION_COLUMNS = ["cell", "overrides", "status", "n", "mean_dsc", "delta_dsc", "delta_std",
                    "wins", "losses", "mean_bin_mae"]


# -- plumbing -----------------------------------------------------------------------
def _run_dir(args, command: str) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = Path(args.out) / f"{command}-{stamp}-seed{args.seed}"
        n = 1
        while path.exists():
            path = Path(args.out) / f"{command}-{stamp}-seed{args.seed}-{n}"
            n += 1
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args, base: TrainConfig | None = None) -> TrainConfig:
    return load_config(args.config, args.set or (), base)


def _echo(run_dir: Path, config: TrainConfig, seed: int, extra: dict | None = None) -> None:
    lines = [f"# seed = {seed}\n"]
    for k, v in (extra or {}).items():
        lines.append(f"# {k} = {v}\n")
    (run_dir / "config.txt").write_text("".join(lines) + config.to_lines())


# -- train ---------------------------------------------------------------------------
def cmd_train(args) -> int:
    config = _config(args)
    run_dir = _run_dir(args, "train")
    _echo(run_dir, config, args.seed)

    def progress(n, bundle):
        if n % 100 == 0:
            v = bundle.values()
            log.info("episode %d  L_seg %.4f  L_align %.4f  L_OSB %.4f", n, v["L_seg"],
                     v["L_align"], v["L_OSB"])

    result = train(config, args.seed, run_dir, progress)
    write_csv(run_dir / "train_log.csv", result.log, LOG_COLUMNS)
    write_csv(run_dir / "heldout.csv", result.heldout, HELDOUT_COLUMNS)
    plotting.training_curves(result.log, result.heldout, run_dir / "training_curves.svg")
    print(run_dir)
    return EXIT_OK


# -- eval -----------------------------------------------------------------------------
PROTO_FIXED = ["episode", "kind", "cell", "d_bar"]


def _proto_rows(index: int, protos) -> list[dict]:
    rows = []
    raw = protos.fg_raw.values
    enr = protos.fg.values
    dbar = protos.fg_meandist.values if protos.fg_meandist is not None else np.full(len(raw), math.nan)
    for j, cell in enumerate(protos.fg_cells):
        rows.append({"episode": index, "kind": "fg", "cell": int(cell), "d_bar": float(dbar[j]),
                     "raw": raw[j], "enriched": enr[j]})
    if protos.bg is not None:
        for j, cell in enumerate(protos.bg_cells):
            v = protos.bg.values[j]
            rows.append({"episode": index, "kind": "bg", "cell": int(cell), "d_bar": math.nan,
                         "raw": v, "enriched": v})
    return rows


def _flatten_protos(rows: list[dict]) -> tuple[list[dict], list[str]]:
    C = len(rows[0]["raw"]) if rows else 0
    cols = PROTO_FIXED + [f"raw_{c}" for c in range(C)] + [f"enriched_{c}" for c in range(C)]
    flat = []
    for r in rows:
        d = {k: r[k] for k in PROTO_FIXED}
        d.update({f"raw_{c}": float(r["raw"][c]) for c in range(C)})
        d.update({f"enriched_{c}": float(r["enriched"][c]) for c in range(C)})
        flat.append(d)
    return flat, cols


def _export_maps(maps_dir: Path, index: int, episode, out, K: int) -> None:
    stem = maps_dir / f"ep{index:04d}"
    img, mask = episode.support[0]
    write_pgm(f"{stem}_support_image.pgm", img.values[0])
    write_pgm(f"{stem}_support_mask.pgm", mask)
    write_pgm(f"{stem}_gt_bins.pgm", binmap_to_gray(out.gt_bins_s[0]))
    if out.binpred_s[0] is not None:
        hard = np.where(out.mask_s[0], out.binpred_s[0].hard, -1)
        write_pgm(f"{stem}_pred_bins.pgm", binmap_to_gray(type(out.gt_bins_s[0])(hard, K)))
    write_pgm(f"{stem}_query_image.pgm", episode.query[0].values[0])
    write_pgm(f"{stem}_pred_mask.pgm", out.scores.mask)


def cmd_eval(args) -> int:
    if not args.ckpt:
        raise UsageError("eval needs --ckpt")
    ckpt = Path(args.ckpt)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    params, ck_config, meta = load_checkpoint(ckpt)
    config = _config(args, ck_config)
    if config != ck_config:
        # overrides that change tensor shapes surface here as format errors
        fresh = ModelParams.init(config, 0)
        fresh.load_state(params.state())
        params = fresh
    run_dir = _run_dir(args, "eval")
    _echo(run_dir, config, args.seed, {"checkpoint": ckpt.resolve()})

    n_maps = args.export_maps or 0
    n_protos = args.dump_prototypes or 0
    maps_dir = run_dir / "maps"
    if n_maps:
        maps_dir.mkdir(exist_ok=True)
    proto_rows: list[dict] = []
    counter = {"i": 0}

    def on_output(i, episode, out):
        k = counter["i"]
        counter["i"] += 1
        if k < n_maps:
            _export_maps(maps_dir, k, episode, out, config.K)
        if k < n_protos:
            proto_rows.extend(_proto_rows(k, out.protos))

    records = evaluate(params, config, args.episodes, args.domain, config.eval_seed + args.seed,
                       on_output)
    write_records(run_dir / "eval_records.csv", records)
    write_csv(run_dir / "eval_summary.csv", aggregate(records), SUMMARY_COLUMNS)
    if proto_rows:
        flat, cols = _flatten_protos(proto_rows)
        write_csv(run_dir / "prototypes.csv", flat, cols)
    mean = float(np.mean([r.dsc for r in records]))
    print(f"{run_dir}\nmean DSC {mean:.4f} over {len(records)} episodes")
    return EXIT_OK


# -- ablate -----------------------------------------------------------------------------
def _run_cell(name: str, config: TrainConfig, seed: int, cell_dir: str, n_eval, domain) -> dict:
    """Train and evaluate one ablation cell; returns records or the failure."""
    try:
        res = train(config, seed, cell_dir)
        records = evaluate(res.params, config, n_eval, domain)
        write_records(Path(cell_dir) / "eval_records.csv", records)
        write_csv(Path(cell_dir) / "train_log.csv", res.log, LOG_COLUMNS)
        write_csv(Path(cell_dir) / "heldout.csv", res.heldout, HELDOUT_COLUMNS)
        return {"name": name, "status": "ok", "records": records}
    except (GenerationError, FloatingPointError, ValueError) as exc:
        return {"name": name, "status": f"failed: {exc}", "records": []}


def _ablation_table(cells, results: dict) -> list[dict]:
    base = results[cells[0][0]]["records"]
    rows = []
    for name, changes in cells:
        res = results[name]
        recs = res["records"]
        row = {"cell": name, "overrides": " ".join(f"{k}={v}" for k, v in changes.items()),
               "status": res["status"], "n": len(recs), "mean_dsc": math.nan, "delta_dsc": math.nan,
               "delta_std": math.nan, "wins": 0, "losses": 0, "mean_bin_mae": math.nan}
        if recs:
            row["mean_dsc"] = float(np.mean([r.dsc for r in recs]))
            maes = [r.bin_mae for r in recs if not math.isnan(r.bin_mae)]
            row["mean_bin_mae"] = float(np.mean(maes)) if maes else math.nan
            if base:
                d = paired_deltas(base, recs)
                row.update(delta_dsc=d["mean"], delta_std=d["std"], wins=d["wins"], losses=d["losses"])
        rows.append(row)
    return rows


def cmd_ablate(args) -> int:
    config = _config(args)
    cells = list(SWEEPS[args.sweep])
    if args.sweep != "components":
        cells = [BASELINE] + cells
    run_dir = _run_dir(args, "ablate")
    _echo(run_dir, config, args.seed, {"sweep": args.sweep})
    jobs = []
    for name, changes in cells:
        cell_dir = run_dir / "cells" / name.replace("=", "_").replace("+", "plus_")
        cell_dir.mkdir(parents=True, exist_ok=True)
        cell_cfg = config.replace(**changes)
        _echo(cell_dir, cell_cfg, args.seed)
        jobs.append((name, cell_cfg, args.seed, str(cell_dir), args.episodes, args.domain))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outs = list(pool.map(_run_cell, *zip(*jobs)))
    else:
        outs = [_run_cell(*j) for j in jobs]
    results = {o["name"]: o for o in outs}
    rows = _ablation_table(cells, results)
    write_csv(run_dir / "ablation.csv", rows, ABLATION_COLUMNS)
    plotting.ablation_bars([r for r in rows if r["status"] == "ok"], run_dir / "ablation.svg")
    for r in rows:
        print(f"{r['cell']:14s} {r['status']:8s} DSC {r['mean_dsc']:.4f}  delta {r['delta_dsc']:+.4f}")
    print(run_dir)
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_RUNTIME


# -- validate-prior ------------------------------------------------------------------------
def cmd_validate_prior(args) -> int:
    config = _config(args)
    run_dir = _run_dir(args, "validate-prior")
    _echo(run_dir, config, args.seed, {"n": args.n})
    fams = {n: DEFAULT_FAMILIES[n] for n in config.family_list}
    rep = validate_prior(fams, args.n, config.K, args.seed, feature_grid(config), config.source_domain)

    hist_rows = []
    for fam in rep.families:
        mean = rep.mean_hist(fam)
        for k in range(rep.K):
            hist_rows.append({"family": fam, "bin": k, "mass": float(mean[k])})
    write_csv(run_dir / "prior_histograms.csv", hist_rows, ["family", "bin", "mass"])

    bc_rows = []
    for fam, v in rep.within.items():
        bc_rows.append({"support": fam, "query": fam, "kind": "within", "n": v.size,
                        "median": float(np.median(v)), "mean": float(v.mean()), "std": float(v.std())})
    for (a, b), v in rep.cross.items():
        bc_rows.append({"support": a, "query": b, "kind": "cross", "n": v.size,
                        "median": float(np.median(v)), "mean": float(v.mean()), "std": float(v.std())})
    write_csv(run_dir / "prior_bc.csv", bc_rows, ["support", "query", "kind", "n", "median", "mean", "std"])

    summary = [{"family": f, "lower_half_mass": rep.lower_half_mass(f),
                "max_bin_mass": float(rep.mean_hist(f).max()),
                "median_within_bc": float(np.median(rep.within[f]))} for f in rep.families]
    summary.append({"family": "all", "lower_half_mass": math.nan, "max_bin_mass": math.nan,
                    "median_within_bc": rep.median_within()})
    write_csv(run_dir / "prior_summary.csv", summary,
              ["family", "lower_half_mass", "max_bin_mass", "median_within_bc"])

    plotting.bin_histograms({f: rep.mean_hist(f) for f in rep.families}, run_dir / "prior_histograms.svg")
    plotting.bc_distributions(rep.within, run_dir / "prior_bc.svg")
    print(f"{run_dir}\nmedian BC within {rep.median_within():.4f}, cross {rep.median_cross():.4f}")
    return EXIT_OK


# -- export-episodes ----------------------------------------------------------------------------
def cmd_export_episodes(args) -> int:
    config = _config(args)
    run_dir = _run_dir(args, "export-episodes")
    _echo(run_dir, config, args.seed, {"n": args.n, "split": args.split})
    stream = 0 if args.split == "train" else 2
    for i in range(args.n):
        ep = make_episode(config, episode_seed(args.seed, i, stream), split=args.split, domain=args.domain)
        d = run_dir / f"ep{i:04d}"
        d.mkdir(exist_ok=True)
        for s, (img, mask) in enumerate(ep.support):
            write_pgm(d / f"support{s}_image.pgm", img.values[0])
            write_pgm(d / f"support{s}_mask.pgm", mask)
            write_pgm(d / f"support{s}_bins.pgm", binmap_to_gray(bin_map(mask, config.K)))
        write_pgm(d / "query_image.pgm", ep.query[0].values[0])
        write_pgm(d / "query_mask.pgm", ep.query[1])
        meta = {"seed": ep.seed, "family": ep.family, "domain": ep.domain, "split": ep.split,
                "shots": len(ep.support)}
        (d / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    print(run_dir)
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="K=V", help="override one config key")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1, help="parallel ablation cells")
    common.add_argument("--out", default="runs", help="parent of the timestamped run directory")
    common.add_argument("--run-dir", help="exact output directory (overrides --out)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="geoproto", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="episodic training")

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--ckpt")
    ev.add_argument("--episodes", type=int)
    ev.add_argument("--domain", choices=("source", "target", "both"))
    ev.add_argument("--export-maps", type=int, nargs="?", const=8, metavar="N",
                    help="write PGM maps for the first N episodes")
    ev.add_argument("--dump-prototypes", type=int, nargs="?", const=1, metavar="N",
                    help="write prototype vectors of the first N episodes")

    ab = sub.add_parser("ablate", parents=[common], help="train and compare a sweep of cells")
    ab.add_argument("--sweep", choices=sorted(SWEEPS), default="components")
    ab.add_argument("--episodes", type=int, help="evaluation episodes per cell")
    ab.add_argument("--domain", choices=("source", "target", "both"))

    vp = sub.add_parser("validate-prior", parents=[common], help="bin-distribution statistics")
    vp.add_argument("--n", type=int, default=500, help="episodes per family")

    ex = sub.add_parser("export-episodes", parents=[common], help="write episodes as PGM files")
    ex.add_argument("--n", type=int, default=8)
    ex.add_argument("--split", choices=("train", "eval"), default="train")
    ex.add_argument("--domain")
    return p


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "validate-prior": cmd_validate_prior,
    "export-episodes": cmd_export_episodes,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigKeyError, CheckpointFormatError, FileNotFoundError) as exc:
        print(f"geoproto {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GenerationError, FloatingPointError, ValueError) as exc:
        print(f"geoproto {args.command}: aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
