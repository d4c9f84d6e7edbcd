"""Command-line entry point: ``bridgesim <subcommand> ...``.

Exit codes: 0 on success, 1 for invalid input (bad flags, configs or
files), 2 when the numerics fail (non-finite states, singular matrices).
Every run writes its files under ``--out`` together with a manifest.json
recording the config hash and seed. ``BRIDGESIM_THREADS`` caps the number
of threads used by the linear-algebra backend.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from contextlib import nullcontext
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .analytics import (
    EmptyInput,
    endpoint_report,
    loss_summary,
    marginal_histogram,
    mode_count,
    shared_histograms,
    tv_distance,
)
from .config import ParseError, ValidationError, from_dict, load_config
from .guided import sample_guided_batch, sample_neural_batch
from .network import load_checkpoint, save_checkpoint
from .pcn import run_chains
from .sde import NonFiniteState, TimeGrid, euler_maruyama_batch, read_trajectory_csv, wiener_increments, write_trajectory_csv
from .training import train

MODEL_DEFAULT_CONFIGS = {
    "brownian": "brownian",
    "ou": "ou_bridge",
    "cell": "cell_normal",
    "fhn": "fhn_normal",
    "landmark": "landmark",
}
CHUNK = 10_000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _thread_limit():
    raw = os.environ.get("BRIDGESIM_THREADS")
    if raw is None or raw == "":
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"BRIDGESIM_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# ---------------------------------------------------------------- helpers


def _config(args):
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    elif getattr(args, "model", None):
        cfg = load_config(MODEL_DEFAULT_CONFIGS[args.model])
    else:
        raise UsageError("give --config (a file or bundled name) or --model")
    if getattr(args, "seed", None) is not None:
        raw = cfg.to_dict()
        raw["seed"] = args.seed
        cfg = from_dict(raw)
    return cfg


def _out_dir(args, cfg) -> Path:
    out = Path(args.out if getattr(args, "out", None) else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n")


def _manifest(out: Path, command: str, cfg, files, extra=None) -> None:
    payload = {
        "command": command,
        "version": __version__,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config_name": cfg.name if cfg is not None else None,
        "config_sha256": cfg.digest() if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else None,
        "files": sorted(str(f) for f in files),
    }
    if extra:
        payload.update(extra)
    _write_json(out / "manifest.json", payload)


def _save_paths(out: Path, times, states, prefix="path") -> list:
    names = []
    for n, s in enumerate(states):
        name = f"{prefix}_{n:05d}.csv"
        write_trajectory_csv(out / name, times, s)
        names.append(name)
    return names


def _stats(x) -> dict:
    x = np.asarray(x, dtype=float)
    return {"mean": float(x.mean()), "std": float(x.std()), "min": float(x.min()), "max": float(x.max())}


def _load_paths(directory) -> tuple:
    files = sorted(Path(directory).glob("*.csv"))
    if not files:
        raise EmptyInput(f"no CSV trajectories in {directory}")
    times, first = read_trajectory_csv(files[0])
    states = np.empty((len(files), *first.shape))
    states[0] = first
    for i, f in enumerate(files[1:], start=1):
        t, s = read_trajectory_csv(f)
        if s.shape != first.shape or not np.array_equal(t, times):
            raise ValueError(f"{f} is on a different grid from {files[0]}")
        states[i] = s
    return times, states


def _grid_from_times(times):
    return TimeGrid(float(times[-1]), len(times) - 1)


# ------------------------------------------------------------- subcommands


def cmd_odes(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    sol = cfg.system().sol
    with open(out / "odes.jsonl", "w") as fh:
        for m, t in enumerate(sol.grid.nodes):
            row = {
                "t": float(t),
                "L": sol.L_t[m].tolist(),
                "Mdag": sol.Mdag_t[m].tolist(),
                "M": sol.M_t[m].tolist(),
                "u": sol.u_t[m].tolist(),
            }
            fh.write(json.dumps(row) + "\n")
    _write_json(out / "config.json", cfg.to_dict())
    _manifest(out, "odes", cfg, ["odes.jsonl", "config.json"])
    return 0


def cmd_forward(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    model, grid, obs = cfg.model, cfg.grid, cfg.obs
    times = grid.nodes
    kept, n_finite = [], 0
    survivors = 0
    for start in range(0, args.paths, CHUNK):
        idx = np.arange(start, min(start + CHUNK, args.paths))
        bundle = euler_maruyama_batch(model, cfg.x0, wiener_increments(grid, model.d_w, cfg.seed, idx), grid)
        n_finite += int(bundle.finite.sum())
        mask = bundle.finite.copy()
        if args.filter is not None:
            err = np.linalg.norm(bundle.states[:, -1] @ obs.L_obs.T - obs.v, axis=1)
            mask &= err <= args.filter
        survivors += int(mask.sum())
        room = args.save - sum(len(k) for k in kept)
        if room > 0:
            kept.append(bundle.states[mask][:room])
    states = np.concatenate(kept) if kept else np.empty((0, grid.M + 1, model.d))
    files = _save_paths(out, times, states)
    summary = {"paths": args.paths, "finite": n_finite, "saved": len(files)}
    if args.filter is not None:
        summary.update(filter_tolerance=args.filter, survivors=survivors)
    _write_json(out / "summary.json", summary)
    _manifest(out, "forward", cfg, files + ["summary.json"])
    print(json.dumps(summary))
    return 0


def cmd_guided(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    sys_ = cfg.system()
    dw = wiener_increments(sys_.grid, sys_.d_w, cfg.seed, range(args.paths))
    bundle = sample_guided_batch(sys_, dw)
    if not bundle.finite.any():
        raise NonFiniteState("every guided path left the finite reals")
    states = bundle.states[bundle.finite]
    files = _save_paths(out, sys_.grid.nodes, states)
    summary = {
        "paths": args.paths,
        "finite": int(bundle.finite.sum()),
        "endpoint": endpoint_report(states, cfg.obs).to_dict(),
        "log_psi": _stats(bundle.log_psi[bundle.finite]),
    }
    _write_json(out / "summary.json", summary)
    _manifest(out, "guided", cfg, files + ["summary.json"])
    print(json.dumps(summary))
    return 0


def cmd_pcn(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    p = dict(cfg.pcn)
    for key in ("eta", "iters", "burn_in", "thin", "chains"):
        val = getattr(args, key)
        if val is not None:
            p[key] = val
    if not 0 <= p["eta"] <= 1 or p["iters"] < 1 or p["thin"] < 1 or p["chains"] < 1:
        raise UsageError("need 0 <= eta <= 1 and iters, thin, chains >= 1")
    if not 0 <= p["burn_in"] < p["iters"]:
        raise UsageError(f"need 0 <= burn-in < iters, got burn-in {p['burn_in']} and iters {p['iters']}")
    sys_ = cfg.system()
    seeds = [cfg.seed * 1000 + c for c in range(p["chains"])]
    t0 = time.perf_counter()
    res = run_chains(sys_, p["eta"], p["iters"], p["burn_in"], p["thin"], seeds)
    elapsed = time.perf_counter() - t0
    files = []
    for c in range(len(seeds)):
        files += _save_paths(out, sys_.grid.nodes, res.states[c][: args.save], prefix=f"chain{c}")
    summary = {
        **p,
        "seeds": seeds,
        "acceptance_rates": res.acceptance_rates.tolist(),
        "acceptance_rate": res.acceptance_rate,
        "samples_per_chain": int(res.states.shape[1]),
        "elapsed_s": elapsed,
    }
    _write_json(out / "summary.json", summary)
    _manifest(out, "pcn", cfg, files + ["summary.json"])
    print(json.dumps(summary))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.iterations is not None:
        raw = cfg.to_dict()
        raw["train"]["iterations"] = args.iterations
        cfg = from_dict(raw)
    ckpt = Path(args.out) if args.out else Path(cfg.out) / "checkpoint.json"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else ckpt.with_suffix(".ndjson")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    sys_ = cfg.system()
    with open(log_path, "w") as log:

        def callback(k, loss, gnorm, elapsed):
            log.write(json.dumps({"iter": k, "loss": loss, "grad_norm": gnorm, "elapsed_s": elapsed}) + "\n")
            if args.verbose and (k % 100 == 0 or k == 1):
                print(f"iter {k}: loss {loss:.5f}", file=sys.stderr)

        trace = train(sys_, cfg.arch, cfg.train, callback=callback)
    save_checkpoint(ckpt, trace.params, cfg.to_dict())
    summary = loss_summary(trace.losses, min(100, len(trace)), trace.lower_bound)
    summary["wall_time_s"] = trace.wall_time
    _write_json(ckpt.parent / "train_summary.json", summary)
    _manifest(ckpt.parent, "train", cfg, [ckpt.name, log_path.name, "train_summary.json"])
    print(json.dumps(summary))
    return 0


def cmd_sample(args) -> int:
    params, stored = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = load_config(args.config)
    elif stored is not None:
        cfg = from_dict(stored)
    else:
        raise UsageError("checkpoint carries no config; pass --config")
    if args.seed is not None:
        raw = cfg.to_dict()
        raw["seed"] = args.seed
        cfg = from_dict(raw)
    if params.arch.state_dim != cfg.model.d or params.arch.output_dim != cfg.model.d_w:
        raise UsageError("checkpoint architecture does not match the config's model")
    out = _out_dir(args, cfg)
    sys_ = cfg.system()
    dw = wiener_increments(sys_.grid, sys_.d_w, cfg.seed, range(args.paths))
    t0 = time.perf_counter()
    bundle = sample_neural_batch(sys_, params, dw)
    elapsed = time.perf_counter() - t0
    if not bundle.finite.any():
        raise NonFiniteState("every neural bridge path left the finite reals")
    states = bundle.states[bundle.finite]
    files = _save_paths(out, sys_.grid.nodes, states)
    summary = {
        "paths": args.paths,
        "finite": int(bundle.finite.sum()),
        "endpoint": endpoint_report(states, cfg.obs).to_dict(),
        "wall_time_s": elapsed,
    }
    if args.time_forward:
        t0 = time.perf_counter()
        euler_maruyama_batch(cfg.model, cfg.x0, dw, sys_.grid)
        fwd = time.perf_counter() - t0
        summary.update(forward_wall_time_s=fwd, cost_ratio=elapsed / fwd)
    _write_json(out / "summary.json", summary)
    _manifest(out, "sample", cfg, files + ["summary.json"], {"checkpoint": str(args.checkpoint)})
    print(json.dumps(summary))
    return 0


def cmd_hist(args) -> int:
    times, states = _load_paths(args.input)
    grid = _grid_from_times(times)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = []
    for t in args.time:
        h = marginal_histogram(states, grid, t, args.coordinate, args.bins)
        result.append({**h.to_dict(), "modes": mode_count(h, args.prominence)})
    _write_json(out / "hist.json", {"input": str(args.input), "histograms": result})
    _manifest(out, "hist", None, ["hist.json"])
    return 0


def cmd_compare(args) -> int:
    ta, a = _load_paths(args.a)
    tb, b = _load_paths(args.b)
    if not np.array_equal(ta, tb):
        raise UsageError("the two path sets are on different time grids")
    grid = _grid_from_times(ta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = []
    for t in args.time:
        ha, hb = shared_histograms(a, b, grid, t, args.coordinate, args.bins)
        result.append(
            {
                "time": ha.time,
                "coordinate": args.coordinate,
                "edges": ha.edges.tolist(),
                "density_a": ha.density.tolist(),
                "density_b": hb.density.tolist(),
                "tv": tv_distance(ha, hb),
                "modes_a": mode_count(ha, args.prominence),
                "modes_b": mode_count(hb, args.prominence),
            }
        )
    _write_json(out / "compare.json", {"a": str(args.a), "b": str(args.b), "comparisons": result})
    _manifest(out, "compare", None, ["compare.json"])
    print(json.dumps([{"time": r["time"], "tv": r["tv"]} for r in result]))
    return 0


# ------------------------------------------------------------------ parser


def _positive_int(text):
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {n}")
    return n


def _nonneg_int(text):
    n = int(text)
    if n < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {n}")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bridgesim", description="Conditioned diffusion sampling with guided proposals and neural bridges.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def experiment(p, paths=False):
        p.add_argument("--config", help="config file or bundled config name")
        p.add_argument("--model", choices=sorted(MODEL_DEFAULT_CONFIGS), help="use the model's bundled config")
        p.add_argument("--seed", type=_nonneg_int, help="override the config seed")
        p.add_argument("--out", help="output directory (default: the config's out)")
        if paths:
            p.add_argument("--paths", type=_positive_int, default=30)

    p = sub.add_parser("odes", help="dump the backward ODE solution as JSON lines")
    experiment(p)
    p.set_defaults(func=cmd_odes)

    p = sub.add_parser("forward", help="simulate the unconditioned process")
    experiment(p, paths=True)
    p.add_argument("--filter", type=float, help="keep paths with |L x_T - v| <= this tolerance")
    p.add_argument("--save", type=_nonneg_int, default=30, help="how many (kept) paths to write as CSV")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("guided", help="sample guided proposals")
    experiment(p, paths=True)
    p.set_defaults(func=cmd_guided)

    p = sub.add_parser("pcn", help="run pCN Metropolis-Hastings chains")
    experiment(p)
    p.add_argument("--eta", type=float)
    p.add_argument("--iters", type=_positive_int)
    p.add_argument("--burn-in", dest="burn_in", type=_nonneg_int)
    p.add_argument("--thin", type=_positive_int)
    p.add_argument("--chains", type=_positive_int)
    p.add_argument("--save", type=_nonneg_int, default=30, help="samples per chain to write as CSV")
    p.set_defaults(func=cmd_pcn)

    p = sub.add_parser("train", help="train the neural drift correction")
    p.add_argument("--config", help="config file or bundled config name")
    p.add_argument("--model", choices=sorted(MODEL_DEFAULT_CONFIGS))
    p.add_argument("--seed", type=_nonneg_int)
    p.add_argument("--iterations", type=_positive_int, help="override train.iterations")
    p.add_argument("--out", help="checkpoint path (default: <config out>/checkpoint.json)")
    p.add_argument("--log", help="NDJSON training log path")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample the trained neural bridge")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="override the config stored in the checkpoint")
    p.add_argument("--seed", type=_nonneg_int)
    p.add_argument("--out")
    p.add_argument("--paths", type=_positive_int, default=30)
    p.add_argument("--time-forward", action="store_true", help="also time forward simulation of as many paths")
    p.set_defaults(func=cmd_sample)

    def analysis(p):
        p.add_argument("--time", type=float, nargs="+", required=True)
        p.add_argument("--coordinate", type=_nonneg_int, default=0)
        p.add_argument("--bins", type=_positive_int, default=50)
        p.add_argument("--prominence", type=float, default=0.05, help="mode prominence as a fraction of the peak")
        p.add_argument("--out", required=True)

    p = sub.add_parser("hist", help="marginal histograms of saved paths")
    p.add_argument("--input", required=True, help="directory of CSV trajectories")
    analysis(p)
    p.set_defaults(func=cmd_hist)

    p = sub.add_parser("compare", help="compare marginals of two path sets")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    analysis(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "bridgesim: error: a subcommand is required")
        with _thread_limit():
            with np.errstate(over="ignore", invalid="ignore"):
                return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (NonFiniteState, FloatingPointError, np.linalg.LinAlgError) as exc:
        # SingularMdag is a LinAlgError, which numpy derives from ValueError
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ParseError, ValidationError, EmptyInput, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
