"""Command-line entry point: ``cdif <command> [options]``.

Commands: simulate, train, sample, osl, eval, plot, selftest. Every command
except ``simulate`` writes into a fresh run directory
``<out_dir>/<command>-<hash>`` named after the resolved configuration, and never
touches existing runs. ``simulate`` writes the dataset into ``--out`` itself,
which must be empty or absent. Each run directory receives ``config.txt``,
the resolved configuration.

Failures print a single ``error: <kind>: <message>`` line to stderr and exit
with status 1; usage errors exit with status 2.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, Option, RunConfig, read_config_file, resolve

log = logging.getLogger("cdif")

COMMON = [Option("out_dir", "str", "runs", "output root")]

OPTIONS: dict[str, list[Option]] = {
    "simulate": [
        Option("out", "str", "data", "dataset directory (created)"),
        Option("n", "int", 4, "number of slice triples"),
        Option("side", "int", 64, "image side in pixels"),
        Option("doses", "floats", [0.05], "dose fractions"),
        Option("seed", "int", 0, "dataset seed"),
        Option("n_angles", "int", 180, "projection angles over [0, pi)"),
        Option("pixel_mm", "float", 5.0, "pixel and detector spacing in mm"),
    ],
    "train": COMMON + [
        Option("data_dir", "str", "data", "dataset directory"),
        Option("lr", "float", 2e-4, "Adam learning rate"),
        Option("iters", "int", 5000, "total iterations"),
        Option("batch", "int", 4, "batch size"),
        Option("T", "int", 10, "diffusion steps"),
        Option("seed", "int", 0, "training seed"),
        Option("ckpt_every", "int", 1000, "checkpoint cadence"),
        Option("dose", "opt_float", None, "dose fraction to train on"),
        Option("base_channels", "int", 32, "network width"),
        Option("embed_dim", "int", 128, "step embedding width"),
        Option("emm_channels", "int", 16, "error-modulation conv width"),
        Option("max_grad_norm", "float", 0.0, "gradient clipping (0 = off)"),
        Option("detach_stage1", "bool", False, "block stage-II gradients into the stage-I prediction"),
        Option("resume", "opt_str", None, "checkpoint to resume from"),
    ],
    "sample": COMMON + [
        Option("ckpt", "str", "", "checkpoint path"),
        Option("data_dir", "opt_str", None, "dataset directory"),
        Option("slices", "str", "all", "triple ids (comma separated) or 'all'"),
        Option("files", "opt_str", None, "prev,cur,next CDIF files instead of a dataset"),
        Option("dose", "opt_float", None, "low-dose level to read from the dataset"),
        Option("trajectory", "bool", False, "also write every sampling state"),
        Option("first_step", "str", "none", "error-modulation input at t=T: none|zeros"),
    ],
    "osl": COMMON + [
        Option("ckpt", "str", "", "checkpoint path"),
        Option("data_dir", "opt_str", None, "dataset directory"),
        Option("slice", "int", 0, "triple id of the new-dose slice"),
        Option("dose", "opt_float", None, "new dose level in the dataset"),
        Option("files", "opt_str", None, "prev,cur,next CDIF files instead of a dataset"),
        Option("ref", "opt_str", None, "reference normal-dose CDIF file"),
        Option("mode", "str", "paired", "paired|unpaired"),
        Option("lr", "float", 2e-3, "learning rate for the weights"),
        Option("iters", "int", 3000, "optimisation steps"),
        Option("batch", "int", 8, "patches per step"),
        Option("patch_size", "int", 32, "patch side"),
        Option("stride", "int", 16, "patch stride"),
        Option("seed", "int", 0, "patch shuffling seed"),
    ],
    "eval": COMMON + [
        Option("pred", "str", "", "directory of predicted CDIF slices"),
        Option("gt", "str", "", "ground-truth directory or dataset"),
        Option("window", "floats", [-1000.0, 1000.0], "HU window lo hi"),
        Option("roi", "opt_str", None, "ROI file (role x y w h per line)"),
    ],
    "plot": COMMON + [
        Option("kind", "str", "drift", "profile|residual|drift"),
        Option("a", "opt_str", None, "image (profile/residual)"),
        Option("b", "opt_str", None, "reference image (residual)"),
        Option("line", "floats", [], "r0 c0 r1 c1 for profile"),
        Option("T", "int", 10, "steps for the drift plot"),
        Option("sigma", "float", 20.0, "endpoint noise for the drift plot"),
        Option("x0", "float", 100.0, "clean value for the drift plot"),
        Option("n", "int", 10000, "draws for the drift plot"),
        Option("seed", "int", 0, "seed for the drift plot"),
    ],
    "selftest": [Option("full", "bool", False, "include the slower checks")],
}


class CommandError(RuntimeError):
    def __init__(self, kind, msg):
        super().__init__(msg)
        self.kind = kind


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdif", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for cmd, opts in OPTIONS.items():
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", help="key = value config file")
        for o in opts:
            flags = ["--" + o.name.replace("_", "-")] + (["--out"] if o.name == "out_dir" else [])
            extra = {"nargs": "+"} if o.kind == "floats" else {}
            if o.kind == "bool":
                extra = {"nargs": "?", "const": "true"}
            sp.add_argument(*flags, dest=o.name, default=None,
                            help=f"{o.help} (default: {o.default})", **extra)
    return p


def _resolve(args) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    flags = {}
    for o in OPTIONS[args.command]:
        v = getattr(args, o.name)
        if isinstance(v, list):
            v = " ".join(v)
        flags[o.name] = v
    return resolve(args.command, OPTIONS[args.command], file_values, flags)


def _run_dir(cfg: RunConfig) -> Path:
    d = Path(cfg["out_dir"]) / f"{cfg.command}-{cfg.digest()}"
    if d.exists():
        raise CommandError("exists", f"run directory {d} already exists; refusing to overwrite")
    d.mkdir(parents=True)
    (d / "config.txt").write_text(cfg.dump())
    return d


def _threads():
    n = os.environ.get("CDIF_THREADS")
    if n:
        import torch

        torch.set_num_threads(max(1, int(n)))


def cmd_simulate(cfg):
    from .phantom_sim.dataset import make_dataset

    out = Path(cfg["out"])
    try:
        make_dataset(out, cfg["n"], cfg["side"], cfg["doses"], cfg["seed"], cfg["n_angles"], cfg["pixel_mm"])
    except FileExistsError as e:
        raise CommandError("exists", str(e)) from None
    (out / "config.txt").write_text(cfg.dump())
    print(out)


def cmd_train(cfg):
    from .trainer import TrainConfig, train_loop

    tc = TrainConfig(**{k: cfg[k] for k in TrainConfig.field_types() if k in cfg.values})
    ds = _dataset(cfg["data_dir"])
    run = _run_dir(cfg)
    params, trace = train_loop(ds, tc, out_dir=run, resume=cfg["resume"])
    print(run)
    log.info("final loss %.6f, params %s", trace[-1][3] if trace else float("nan"), params.fingerprint())


def _dataset(path):
    from .phantom_sim.dataset import Dataset

    try:
        return Dataset(path)
    except FileNotFoundError as e:
        raise CommandError("missing", str(e)) from None


def _read(path):
    from .phantom_sim.cdif_io import read_slice

    if not Path(path).exists():
        raise CommandError("missing", f"no such file: {path}")
    return read_slice(path)


def _inputs(cfg, ids=None):
    """Yield ``(name, prev, cur, next, triple)`` for the requested slices."""
    if cfg["files"]:
        parts = cfg["files"].split(",")
        if len(parts) != 3:
            raise CommandError("usage", "--files needs prev,cur,next")
        prev, cur, nxt = (_read(p) for p in parts)
        yield Path(parts[1]).stem, prev, cur, nxt, None
        return
    if not cfg["data_dir"]:
        raise CommandError("usage", "give --data-dir or --files")
    ds = _dataset(cfg["data_dir"])
    if ids is None:
        ids = [t.index for t in ds.triples]
    for i in ids:
        yield f"t{i:04d}", ds.ld(i, -1, cfg["dose"]), ds.ld(i, 0, cfg["dose"]), ds.ld(i, 1, cfg["dose"]), (ds, i)


def _load(cfg):
    from .restoration_net.checkpoint import load_checkpoint
    from .schedule import make_schedule

    if not cfg["ckpt"] or not Path(cfg["ckpt"]).exists():
        raise CommandError("missing", f"checkpoint not found: {cfg['ckpt']!r}")
    params, _ = load_checkpoint(cfg["ckpt"])
    return params, make_schedule(params.config.T)


def cmd_sample(cfg):
    from .phantom_sim.cdif_io import write_slice
    from .sampler import sample

    params, s = _load(cfg)
    ids = None if cfg["slices"] == "all" else [int(v) for v in cfg["slices"].split(",")]
    items = list(_inputs(cfg, ids))
    run = _run_dir(cfg)
    for name, prev, cur, nxt, _ in items:
        x0, traj = sample(cur, prev, nxt, params, s, first_step=cfg["first_step"])
        write_slice(run / f"{name}.cdif", x0)
        if cfg["trajectory"]:
            (run / "trajectory").mkdir(exist_ok=True)
            for t in range(traj.T):
                write_slice(run / "trajectory" / f"{name}_x{t:03d}.cdif", traj.at(t))
    print(run)


def cmd_osl(cfg):
    from .one_shot import OSLConfig, osl_apply, osl_fit
    from .phantom_sim.cdif_io import write_slice
    from .phantom_sim.dataset import simulate_slice

    if cfg["mode"] not in ("paired", "unpaired"):
        raise CommandError("usage", "--mode must be paired or unpaired")
    params, s = _load(cfg)
    (name, prev, cur, nxt, src), = list(_inputs(cfg, [cfg["slice"]]))
    if cfg["ref"]:
        ref = _read(cfg["ref"])
    elif src is not None:
        ds, i = src
        if cfg["mode"] == "paired":
            ref = ds.nd(i, 0)
        else:
            rec = next(t for t in ds.triples if t.index == i)
            ref, _ = simulate_slice(rec.phantom_seed, rec.n_ellipses, 2, ds.side, [],
                                    0, int(ds.meta["n_angles"][0]), float(ds.meta["pixel_mm"][0]))
    else:
        raise CommandError("usage", "--ref is required with --files")
    oc = OSLConfig(cfg["lr"], cfg["iters"], cfg["batch"], cfg["patch_size"], cfg["stride"], cfg["seed"])
    res = osl_fit(cur, prev, nxt, ref, params, s, oc)
    run = _run_dir(cfg)
    (run / "weights.json").write_text(json.dumps([round(float(w), 12) for w in res.weights.w]) + "\n")
    write_slice(run / f"{name}_xopt.cdif", osl_apply(res.weights, res.trajectory))
    (run / "objective.txt").write_text(f"{res.objective!r}\n")
    print(run)


def _gt_lookup(gt_dir):
    gt = Path(gt_dir)
    if (gt / "manifest.txt").exists():
        ds = _dataset(gt)
        return lambda stem: ds.nd(int(stem[1:5]), 0) if stem.startswith("t") else None
    return lambda stem: _read(gt / f"{stem}.cdif") if (gt / f"{stem}.cdif").exists() else None


def cmd_eval(cfg):
    from .evalkit import cnr, evaluate_pairs, read_rois

    window = tuple(cfg["window"])
    if len(window) != 2:
        raise CommandError("usage", "--window needs two values")
    pred = Path(cfg["pred"])
    files = sorted(pred.glob("*.cdif"))
    if not files:
        raise CommandError("missing", f"no .cdif predictions in {pred}")
    lookup = _gt_lookup(cfg["gt"])
    pairs = []
    for f in files:
        g = lookup(f.stem)
        if g is None:
            raise CommandError("missing", f"no ground truth for {f.name}")
        pairs.append((f.stem, _read(f), g))
    rep = evaluate_pairs(pairs, window)
    rois = read_rois(cfg["roi"]) if cfg["roi"] else []
    sig = [r for r in rois if r.role == "signal"]
    bg = [r for r in rois if r.role == "background"]
    run = _run_dir(cfg)
    with open(run / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slice", "psnr_db", "ssim", "rmse_hu"] + (["cnr"] if sig and bg else []))
        for k, (name, p, _) in enumerate(pairs):
            row = [name, f"{rep.psnr_db[k]:.6f}", f"{rep.ssim[k]:.6f}", f"{rep.rmse_hu[k]:.6f}"]
            if sig and bg:
                row.append(f"{cnr(p, sig[0], bg[0]):.6f}")
            w.writerow(row)
    lines = [f"{k} {m:.6f} +- {sd:.6f}" for k, (m, sd) in rep.summary().items()]
    (run / "summary.txt").write_text("\n".join(lines) + "\n")
    print(run)
    print("\n".join(lines))


def cmd_plot(cfg):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .evalkit import drift_curve, profile, residual_map
    from .schedule import make_schedule

    kind = cfg["kind"]
    if kind not in ("profile", "residual", "drift"):
        raise CommandError("usage", "--kind must be profile, residual or drift")
    fig, ax = plt.subplots(figsize=(5, 4))
    if kind == "drift":
        s = make_schedule(cfg["T"])
        mp, cl = drift_curve(s, cfg["x0"], cfg["sigma"], cfg["n"], cfg["seed"])
        ts = np.arange(s.T + 1)
        ax.plot(ts, mp, "o-", label="mean-preserving")
        ax.plot(ts, cl, "s-", label="classical")
        ax.axhline(cfg["x0"], color="k", lw=0.5)
        ax.set_xlabel("t")
        ax.set_ylabel("E[x_t] (HU)")
        ax.legend()
    elif kind == "profile":
        if not cfg["a"] or len(cfg["line"]) != 4:
            raise CommandError("usage", "profile needs --a and --line r0 c0 r1 c1")
        r0, c0, r1, c1 = cfg["line"]
        ax.plot(profile(_read(cfg["a"]), (r0, c0), (r1, c1)))
        ax.set_ylabel("HU")
    else:
        if not cfg["a"] or not cfg["b"]:
            raise CommandError("usage", "residual needs --a and --b")
        im = ax.imshow(residual_map(_read(cfg["a"]), _read(cfg["b"])), cmap="gray")
        fig.colorbar(im, ax=ax)
        ax.axis("off")
    run = _run_dir(cfg)
    fig.tight_layout()
    fig.savefig(run / f"{kind}.png", dpi=120)
    plt.close(fig)
    print(run)


def cmd_selftest(cfg):
    from .selftest import run_selftest

    ok = run_selftest(full=cfg["full"])
    if not ok:
        raise CommandError("selftest", "one or more checks failed")


COMMANDS = {
    "simulate": cmd_simulate, "train": cmd_train, "sample": cmd_sample, "osl": cmd_osl,
    "eval": cmd_eval, "plot": cmd_plot, "selftest": cmd_selftest,
}


def dispatch(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # argparse usage errors (2) and --help (0)
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        _threads()
        COMMANDS[args.command](cfg)
    except CommandError as e:
        print(f"error: {e.kind}: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, FloatingPointError) as e:
        print(f"error: {type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
