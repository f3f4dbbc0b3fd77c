"""Command line interface.

Subcommands:

    gen         write train/test dataset files for a problem family
    train       train a model from a run-config file
    eval        evaluate a checkpoint on a dataset, write metrics
    invariance  evaluate one checkpoint across a nested-resolution family
    ablate      sweep one factor (radius, knn, pos_enc, data_size)

Every report path writes CSVs plus PNG figures next to them, and embeds the
resolved configuration and seed in its output directory.

Exit codes: 0 success, 1 numeric fault, 2 usage or configuration error,
3 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time

import numpy as np

from . import report
from .errors import (
    ConfigError,
    FormatError,
    IsolatedNodeError,
    NumericFaultError,
    ShapeError,
    ZeroTargetError,
)
from .graph import uniform_grid
from .model import OperatorModel, load_checkpoint, save_checkpoint
from .pde_data import (
    Dataset,
    _family_id,
    as_samples,
    convert_pointcloud_csv,
    gen_darcy,
    gen_darcy_family,
    gen_diffreact,
    gen_swe,
    read_dataset,
    write_dataset,
)
from .runconfig import (
    dump_runconfig,
    dumps_runconfig,
    load_runconfig,
    model_config_from,
    train_config_from,
)
from .training import (
    TrainSample,
    evaluate,
    predict,
    read_history_csv,
    train,
    write_history_csv,
)

_GEN_DEFAULT_GRID = {"darcy": 16, "swe": 24, "diffreact": 24}


def _ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    kind = args.kind
    if args.n < 1 or args.n_test < 0:
        raise ConfigError("need --n >= 1 and --n-test >= 0")
    if kind == "external":
        if not args.from_csv:
            raise ConfigError("gen external needs --from-csv")
        out = args.out + ".hmlt"
        ds = convert_pointcloud_csv(args.from_csv, out)
        print(f"wrote {out} ({ds.n_samples} samples, {ds.n_points} points)")
        return 0
    grid = args.grid or _GEN_DEFAULT_GRID[kind]
    if kind == "darcy" and args.resolutions:
        res = [int(r) for r in args.resolutions.split(",")]
        fam = _family_id(args.seed, tuple(sorted(set(res))))
        train_fam = gen_darcy_family(args.seed, args.n, res, beta=args.beta, family=fam)
        test_fam = gen_darcy_family(args.seed + 1, args.n_test, res, beta=args.beta, family=fam)
        for r in sorted(train_fam):
            for split, ds in (("train", train_fam[r]), ("test", test_fam[r])):
                path = f"{args.out}_r{r}_{split}.hmlt"
                write_dataset(path, ds)
                print(f"wrote {path} ({ds.n_samples} samples, {r}x{r})")
        return 0
    makers = {
        "darcy": lambda seed, n: gen_darcy(seed, n, grid, grid, beta=args.beta),
        "swe": lambda seed, n: gen_swe(seed, n, grid, grid, t_in=args.t_in, t_out=args.t_out),
        "diffreact": lambda seed, n: gen_diffreact(
            seed, n, grid, grid, t_in=args.t_in, t_out=args.t_out
        ),
    }
    for split, seed, n in (("train", args.seed, args.n), ("test", args.seed + 1, args.n_test)):
        if n == 0:
            continue
        ds = makers[kind](seed, n)
        path = f"{args.out}_{split}.hmlt"
        write_dataset(path, ds)
        print(f"wrote {path} ({ds.n_samples} samples, {grid}x{grid}, c={ds.c})")
    return 0


# ---------------------------------------------------------------------------
# train


def _batches_per_epoch(n: int, batch_size: int) -> int:
    bs = max(1, min(batch_size, n))
    return (n + bs - 1) // bs


def _load_train_pieces(cfg: dict):
    if not cfg["train_data"]:
        raise ConfigError("train_data is required")
    train_ds = read_dataset(cfg["train_data"])
    test_ds = read_dataset(cfg["test_data"]) if cfg["test_data"] else None
    mcfg = model_config_from(cfg, train_ds)
    tcfg = train_config_from(cfg, train_ds)
    return train_ds, test_ds, mcfg, tcfg


def _warn_isolated(model: OperatorModel, ds: Dataset) -> None:
    g = model.build_graph(ds.points())
    isolated = int(np.sum(g.degrees() == 1))
    if isolated:
        print(
            f"warning: {isolated}/{g.n_nodes} nodes have no neighbor within "
            f"radius {model.config.radius}",
            file=sys.stderr,
        )


def cmd_train(args) -> int:
    cfg = load_runconfig(args.config)
    out_dir = _ensure_dir(args.out or cfg["out_dir"])
    train_ds, test_ds, mcfg, tcfg = _load_train_pieces(cfg)
    tr_samples = as_samples(train_ds)
    te_samples = as_samples(test_ds) if test_ds is not None else None

    rows: list[dict] = []
    start_step = 0
    if args.resume:
        model = load_checkpoint(args.resume)
        if model.config != mcfg:
            raise ConfigError("checkpoint architecture does not match the config/dataset")
        hist_path = os.path.join(out_dir, "history.csv")
        if os.path.exists(hist_path):
            rows = read_history_csv(hist_path)
        start_step = len(rows) * _batches_per_epoch(len(tr_samples), tcfg.batch_size)
        if len(rows) >= tcfg.epochs:
            raise ConfigError(f"nothing to resume: {len(rows)} epochs already done")
    else:
        model = OperatorModel(mcfg, seed=tcfg.seed)
    if mcfg.graph_kind == "radius":
        _warn_isolated(model, train_ds)

    derived = {
        "mode": mcfg.mode,
        "in_channels": mcfg.in_channels,
        "out_channels": mcfg.out_channels,
        "rollout_steps": mcfg.rollout_steps,
        "loss": tcfg.loss,
        "n_train": len(tr_samples),
        "n_test": 0 if te_samples is None else len(te_samples),
    }
    dump_runconfig(cfg, os.path.join(out_dir, "config_resolved.txt"), derived)
    hist_path = os.path.join(out_dir, "history.csv")
    ckpt_path = os.path.join(out_dir, "model.ckpt")

    def log_row(row: dict) -> None:
        rows.append(row)
        write_history_csv(hist_path, rows)
        if args.verbose:
            msg = f"epoch {row['epoch']:4d}  loss {row['train_loss']:.3e}"
            if row["eval_nrmse"] == row["eval_nrmse"]:
                msg += f"  eval nRMSE {row['eval_nrmse']:.4f}"
            print(msg)

    try:
        train(
            model, tr_samples, tcfg,
            eval_samples=te_samples, start_step=start_step, log=log_row,
        )
    except NumericFaultError:
        # train() already restored the best parameters; keep them
        save_checkpoint(model, ckpt_path)
        write_history_csv(hist_path, rows)
        raise
    save_checkpoint(model, ckpt_path)
    write_history_csv(hist_path, rows)
    report.save_training_curves(rows, os.path.join(out_dir, "training.png"))
    last = rows[-1]
    line = f"done: {len(rows)} epochs, final train loss {last['train_loss']:.6e}"
    if te_samples is not None:
        final = evaluate(model, te_samples)
        line += f", test nRMSE {final['nrmse']:.6f}, test RMSE {final['rmse']:.6e}"
    print(line)
    print(f"checkpoint: {ckpt_path}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _check_compat(model: OperatorModel, ds: Dataset) -> None:
    c = model.config
    if ds.c != c.in_channels or ds.out_channels != c.out_channels:
        raise ConfigError(
            f"checkpoint expects {c.in_channels}->{c.out_channels} channels, "
            f"dataset has {ds.c}->{ds.out_channels}"
        )
    if c.mode == "steady" and ds.t_out != 0:
        raise ConfigError("steady checkpoint cannot evaluate a time-series dataset")
    if c.mode == "rollout" and ds.t_out != c.rollout_steps:
        raise ConfigError(
            f"rollout checkpoint emits {c.rollout_steps} frames, dataset has {ds.t_out}"
        )


def _write_metrics_csv(path: str, res: dict) -> None:
    with open(path, "w") as f:
        f.write("sample,nrmse,rmse\n")
        for i, (a, b) in enumerate(zip(res["per_sample_nrmse"], res["per_sample_rmse"])):
            f.write(f"{i},{a!r},{b!r}\n")
        f.write(f"mean,{res['nrmse']!r},{res['rmse']!r}\n")


def _field_rows(sample: TrainSample, pred: np.ndarray, sample_id: int):
    pos = sample.queries.positions
    tgt = sample.target
    if tgt.ndim == 2:
        pred3, tgt3 = pred[None], tgt[None]
    else:
        pred3, tgt3 = pred, tgt
    for fr in range(tgt3.shape[0]):
        for pt in range(pos.shape[0]):
            for ch in range(tgt3.shape[2]):
                t, p = tgt3[fr, pt, ch], pred3[fr, pt, ch]
                yield (sample_id, fr, pos[pt, 0], pos[pt, 1], ch, t, p, abs(p - t))


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data)
    _check_compat(model, ds)
    out_dir = _ensure_dir(args.out)
    samples = as_samples(ds)
    res = evaluate(model, samples)
    _write_metrics_csv(os.path.join(out_dir, "metrics.csv"), res)

    n_fields = min(args.fields, len(samples))
    if n_fields > 0:
        with open(os.path.join(out_dir, "error_fields.csv"), "w") as f:
            f.write("sample,frame,x,y,channel,target,pred,abs_err\n")
            for i in range(n_fields):
                pred = predict(model, samples[i])
                for row in _field_rows(samples[i], pred, i):
                    f.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
    # field maps for the first sample when the data lives on a grid
    if ds.nx * ds.ny == ds.n_points:
        pred = predict(model, samples[0])
        tgt = samples[0].target
        if tgt.ndim == 3:
            pred, tgt = pred[-1], tgt[-1]  # last frame
        report.save_field_maps(
            pred[:, 0].reshape(ds.ny, ds.nx),
            tgt[:, 0].reshape(ds.ny, ds.nx),
            os.path.join(out_dir, "error_map.png"),
            title=f"{ds.kind} sample 0",
        )

    if args.query_grid:
        r = args.query_grid
        q = uniform_grid(r, r, ds.bounds)
        path = os.path.join(out_dir, f"predictions_grid{r}.csv")
        with open(path, "w") as f:
            f.write("sample,frame,x,y,channel,pred\n")
            for i in range(max(1, n_fields)):
                s = samples[i]
                alt = TrainSample(points=s.points, theta=s.theta, queries=q, target=s.target)
                pred = predict(model, alt)
                pred3 = pred[None] if pred.ndim == 2 else pred
                for fr in range(pred3.shape[0]):
                    for pt in range(q.n_points):
                        for ch in range(pred3.shape[2]):
                            f.write(
                                f"{i},{fr},{q.positions[pt,0]!r},{q.positions[pt,1]!r},"
                                f"{ch},{pred3[fr,pt,ch]!r}\n"
                            )
        print(f"wrote {path} (metrics stay on the native {ds.nx}x{ds.ny} grid)")

    print(f"nRMSE {res['nrmse']:.6f}  RMSE {res['rmse']:.6e}  over {len(samples)} samples")
    return 0


# ---------------------------------------------------------------------------
# invariance


def cmd_invariance(args) -> int:
    model = load_checkpoint(args.checkpoint)
    datasets = [read_dataset(p) for p in args.data]
    fams = {ds.family for ds in datasets}
    if len(fams) != 1 or 0 in fams:
        raise ConfigError(
            "datasets do not form a nested-resolution family "
            f"(family ids: {sorted(fams)})"
        )
    datasets.sort(key=lambda d: d.nx)
    out_dir = _ensure_dir(args.out)
    rows = []
    for ds in datasets:
        _check_compat(model, ds)
        res = evaluate(model, as_samples(ds))
        rk = max(res["per_sample_nrmse"])
        rows.append((ds.nx, ds.n_samples, res["nrmse"], rk))
        print(f"resolution {ds.nx:3d}: nRMSE {res['nrmse']:.6f}  R_K {rk:.6f}")
    with open(os.path.join(out_dir, "rk.csv"), "w") as f:
        f.write("resolution,n_samples,nrmse,r_k\n")
        for r in rows:
            f.write(f"{r[0]},{r[1]},{r[2]!r},{r[3]!r}\n")
    report.save_invariance(
        [r[0] for r in rows], [r[3] for r in rows], [r[2] for r in rows],
        os.path.join(out_dir, "rk.png"),
    )
    return 0


# ---------------------------------------------------------------------------
# ablate


_ABLATE_DEFAULTS = {
    "radius": "0.04,0.08,0.12,0.16",
    "knn": "5,10,15,21",
    "pos_enc": "none,concat,rope",
    "data_size": "50,100,200",
}


def _apply_cell(cfg: dict, kind: str, value):
    cell = dict(cfg)
    if kind == "radius":
        cell["radius"] = float(value)
        cell["graph_kind"] = "radius"
    elif kind == "knn":
        cell["graph_kind"] = "knn"
        cell["knn_k"] = int(value)
    elif kind == "pos_enc":
        cell["pos_enc"] = str(value)
    return cell


def cmd_ablate(args) -> int:
    cfg = load_runconfig(args.config)
    if not cfg["train_data"] or not cfg["test_data"]:
        raise ConfigError("ablate needs both train_data and test_data")
    train_ds = read_dataset(cfg["train_data"])
    test_ds = read_dataset(cfg["test_data"])
    raw_values = (args.values or _ABLATE_DEFAULTS[args.kind]).split(",")
    if args.kind == "radius":
        values = [float(v) for v in raw_values]
    elif args.kind in ("knn", "data_size"):
        values = [int(v) for v in raw_values]
    else:
        values = [v.strip() for v in raw_values]
    out_dir = _ensure_dir(args.out)
    all_samples = as_samples(train_ds)
    te_samples = as_samples(test_ds)
    rows = []
    for v in values:
        cell_cfg = _apply_cell(cfg, args.kind, v)
        tr = all_samples
        if args.kind == "data_size":
            if not 1 <= int(v) <= len(all_samples):
                raise ConfigError(f"data_size {v} outside 1..{len(all_samples)}")
            tr = all_samples[: int(v)]
        mcfg = model_config_from(cell_cfg, train_ds)
        tcfg = train_config_from(cell_cfg, train_ds)
        model = OperatorModel(mcfg, seed=tcfg.seed)
        g = model.build_graph(train_ds.points())
        isolated = int(np.sum(g.degrees() == 1))
        if isolated:
            print(
                f"warning: cell {v}: {isolated}/{g.n_nodes} isolated nodes",
                file=sys.stderr,
            )
        t0 = time.perf_counter()
        train(model, tr, tcfg, eval_samples=te_samples)
        seconds = time.perf_counter() - t0
        res = evaluate(model, te_samples)
        chash = hashlib.sha256(dumps_runconfig(cell_cfg).encode()).hexdigest()[:12]
        rows.append((v, chash, g.n_edges, res["nrmse"], res["rmse"], seconds))
        print(
            f"{args.kind}={v}: nRMSE {res['nrmse']:.6f}  RMSE {res['rmse']:.6e}  "
            f"edges {g.n_edges}  ({seconds:.1f}s)"
        )
    with open(os.path.join(out_dir, "sweep.csv"), "w") as f:
        f.write("cell,value,config_hash,n_edges,nrmse,rmse,seconds\n")
        for i, r in enumerate(rows):
            f.write(f"{i},{r[0]},{r[1]},{r[2]},{r[3]!r},{r[4]!r},{r[5]:.3f}\n")
    report.save_sweep(
        values, [r[3] for r in rows], args.kind,
        os.path.join(out_dir, "sweep.png"),
        numeric_x=args.kind != "pos_enc",
    )
    return 0


# ---------------------------------------------------------------------------
# parser / entry


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gtno",
        description="graph-transformer neural operator: data generation, "
        "training, evaluation, invariance and ablation studies",
    )
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("gen", help="generate dataset files")
    g.add_argument("kind", choices=("darcy", "swe", "diffreact", "external"))
    g.add_argument("--out", required=True, help="output path prefix")
    g.add_argument("--n", type=int, default=200, help="training samples")
    g.add_argument("--n-test", type=int, default=50, help="test samples")
    g.add_argument("--grid", type=int, default=0, help="grid resolution per axis")
    g.add_argument("--beta", type=float, default=1.0, help="darcy forcing")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--t-in", type=int, default=4, help="input frames (time kinds)")
    g.add_argument("--t-out", type=int, default=10, help="output frames (time kinds)")
    g.add_argument("--resolutions", default="", help="comma list for a nested darcy family")
    g.add_argument("--from-csv", default="", help="point-cloud table for kind=external")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default="", help="output directory (overrides config)")
    t.add_argument("--resume", default="", help="checkpoint to continue from")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default="eval")
    e.add_argument("--fields", type=int, default=1, help="samples to dump as per-point CSV")
    e.add_argument("--query-grid", type=int, default=0,
                   help="also predict on an NxN query lattice (no targets there)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("invariance", help="resolution-invariance report")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", nargs="+", required=True, help="family dataset files")
    i.add_argument("--out", default="invariance")
    i.set_defaults(func=cmd_invariance)

    a = sub.add_parser("ablate", help="one-factor sweep")
    a.add_argument("kind", choices=("radius", "knn", "pos_enc", "data_size"))
    a.add_argument("--config", required=True)
    a.add_argument("--values", default="", help="comma list of cell values")
    a.add_argument("--out", default="ablate")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return int(args.func(args) or 0)
    except NumericFaultError as e:
        print(f"numeric fault: {e}", file=sys.stderr)
        return 1
    except (ConfigError, ShapeError, ZeroTargetError, IsolatedNodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FormatError as e:
        print(f"file format error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
