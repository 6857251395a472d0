"""Command line entry point: ``red <command> ...``.

Exit codes: 0 success, 2 usage, 3 data, 4 numeric, 5 checkpoint/integrity.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation
from .data import DatasetManifest, Standardizer, load_csv, prepare
from .exceptions import CheckpointError, ContractError, DataError, IntegrityError, NumericError
from .model import ModelConfig, init_model, load_checkpoint, read_checkpoint_header, save_checkpoint
from .numerics import derive_seed, make_rng
from .training import (
    DEFAULT_GRID,
    TrainConfig,
    gradient_check,
    grid_search,
    loss_and_gradients,
    train,
    write_leaderboard,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_INTEGRITY = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


# -- run manifests ------------------------------------------------------------


def load_manifest(path, seed=None, out=None):
    """Parse a run manifest.

    ``dataset`` is either an inline mapping or a path to a dataset manifest
    JSON file; relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    raw_text = path.read_text()
    raw = json.loads(raw_text)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = str(out)
    base = path.parent
    ds = raw.get("dataset")
    if ds is None:
        raise ContractError(f"{path}: manifest has no 'dataset' entry")
    dataset = DatasetManifest.read(base / ds) if isinstance(ds, str) else DatasetManifest.from_dict(ds, base)
    run_seed = int(raw.get("seed", 0))
    model_kw = dict(raw.get("model", {}))
    train_kw = dict(raw.get("train", {}))
    model_kw.setdefault("seed", derive_seed(run_seed, 10))
    train_kw.setdefault("seed", derive_seed(run_seed, 11))
    return {
        "raw": raw,
        "text": raw_text,
        "dataset": dataset,
        "model": model_kw,
        "train": TrainConfig(**train_kw),
        "out": base / raw.get("out", "runs"),
        "grid": raw.get("grid"),
        "seed": run_seed,
    }


def run_dir(manifest) -> Path:
    digest = hashlib.sha256(json.dumps(manifest["raw"], sort_keys=True).encode()).hexdigest()[:12]
    d = manifest["out"] / digest
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_run_files(outdir, manifest, model, scaler, history, columns, extra=None):
    ckpt = outdir / "model.ckpt"
    digest = save_checkpoint(model, ckpt)
    payload = scaler.to_dict()
    payload.update({"columns": columns, "checkpoint_sha256": digest})
    (outdir / "scaler.json").write_text(json.dumps(payload, indent=2) + "\n")
    history.to_csv(outdir / "history.csv", include_timing=False)
    with open(outdir / "timing.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "seconds"])
        w.writerows(zip(history.epoch, history.seconds))
    (outdir / "manifest.json").write_text(manifest["text"])
    (outdir / "manifest.resolved.json").write_text(json.dumps(manifest["raw"], indent=2, sort_keys=True) + "\n")
    summary = {
        "init_val_nll": history.val_nll[0],
        "best_val_nll": min(history.val_nll),
        "epochs": history.epoch[-1],
        "checkpoint_sha256": digest,
    }
    summary.update(extra or {})
    (outdir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _test_nll(model, prep):
    mean, _, _ = evaluation.test_nll_report(model, prep.test.X, prep.test.labels)
    return mean


def cmd_train(args):
    man = load_manifest(args.manifest, args.seed, args.out)
    prep = prepare(man["dataset"])
    cfg = ModelConfig(d=prep.train.d, **man["model"])
    model, history = train(init_model(cfg), prep.train.X, prep.val.X, man["train"])
    outdir = run_dir(man)
    summary = _write_run_files(
        outdir, man, model, prep.scaler, history, prep.train.column_names, {"test_nll": _test_nll(model, prep)}
    )
    print(f"run directory: {outdir}")
    print(f"val NLL {summary['init_val_nll']:.4f} -> {summary['best_val_nll']:.4f}; test NLL {summary['test_nll']:.4f}")
    return EXIT_OK


def cmd_grid(args):
    man = load_manifest(args.manifest, args.seed, args.out)
    space = man["grid"]
    if space is None:
        if not args.default_grid:
            raise UsageError("manifest has no 'grid' entry (pass --default-grid to use the built-in one)")
        space = DEFAULT_GRID
    prep = prepare(man["dataset"])
    base = ModelConfig(d=prep.train.d, **man["model"])
    best, board = grid_search(space, prep.train.X, prep.val.X, base, man["train"])
    outdir = run_dir(man)
    write_leaderboard(board, outdir / "leaderboard.csv")
    _write_run_files(
        outdir, man, best.model, prep.scaler, best.history, prep.train.column_names,
        {"best_config": best.config, "test_nll": _test_nll(best.model, prep)},
    )
    print(f"run directory: {outdir}")
    for rank, r in enumerate(board, 1):
        print(f"{rank:3d}  {r.val_nll:10.4f}  {r.config}" + (f"  FAILED: {r.error}" if r.error else ""))
    return EXIT_OK


def _load_model_and_scaler(checkpoint, scaler_path=None):
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    model = load_checkpoint(checkpoint)
    scaler_path = Path(scaler_path) if scaler_path else checkpoint.parent / "scaler.json"
    if not scaler_path.exists():
        raise FileNotFoundError(f"scaler not found: {scaler_path}")
    payload = json.loads(scaler_path.read_text())
    header = read_checkpoint_header(checkpoint)
    if payload.get("checkpoint_sha256") != header["payload_sha256"]:
        raise IntegrityError(f"{scaler_path} was not written for checkpoint {checkpoint}")
    return model, Standardizer.from_dict(payload), payload.get("columns")


def _load_data(args):
    path = Path(args.data)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    return load_csv(path, has_header=not args.no_header, label_column=args.label_column)


def cmd_eval(args):
    model, scaler, _ = _load_model_and_scaler(args.checkpoint, args.scaler)
    ds = _load_data(args)
    X = scaler.transform(ds.X)
    name = Path(args.data).stem
    rep = evaluation.evaluate(model, X, ds.labels, name=name)
    mean_orig, _, _ = evaluation.test_nll_report(model, X, ds.labels, scaler.log_abs_det())
    rep.extra["test_nll_original_units"] = mean_orig
    outdir = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    outdir.mkdir(parents=True, exist_ok=True)
    rep.to_json(outdir / "report.json")
    evaluation.write_nll_table([(name, len(ds), ds.d, rep.test_nll)], outdir / "nll_table.csv")
    if rep.anomaly is not None:
        a = rep.anomaly
        evaluation.write_ap_table([(name, a["anomaly_count"], a["average_precision"], a["ndcg"])], outdir / "ap_table.csv")
        rep.pr.to_csv(outdir / "pr_curve.csv")
    print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sample(args):
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    model, scaler, columns = _load_model_and_scaler(args.checkpoint, args.scaler)
    X = scaler.inverse_transform(model.sample(make_rng(args.seed), args.n))
    columns = columns or [f"x{j}" for j in range(model.d)]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(columns)
        for row in X:
            w.writerow([repr(float(v)) for v in row])
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_detect(args):
    if args.top_k is not None and args.log_likelihood_threshold is not None:
        raise UsageError("--top-k and --log-likelihood-threshold are mutually exclusive")
    if args.top_k is not None and args.top_k < 0:
        raise UsageError("--top-k must be non-negative")
    model, scaler, _ = _load_model_and_scaler(args.checkpoint, args.scaler)
    ds = _load_data(args)
    scores = model.log_prob(scaler.transform(ds.X)) + scaler.log_abs_det()
    rs = evaluation.RankedScores.from_scores(scores, ds.labels)
    ranks = rs.ranks
    if args.top_k is not None:
        flagged = ranks <= args.top_k
    elif args.log_likelihood_threshold is not None:
        flagged = scores <= args.log_likelihood_threshold
    else:
        flagged = np.zeros(len(ds), bool)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["row", "rank", "log_likelihood", "flagged"] + (["label"] if ds.labels is not None else []))
        for i in rs.order:
            row = [int(i) + 1, int(ranks[i]), repr(float(scores[i])), int(flagged[i])]
            if ds.labels is not None:
                row.append(int(ds.labels[i]))
            w.writerow(row)
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = ModelConfig(d=args.d, num_units=args.hidden, transform_hidden=args.hidden, num_components=args.components, seed=args.seed)
    rng = make_rng(args.seed)
    model = init_model(cfg, rng)
    # move away from the near-symmetric init so every parameter gets a real gradient
    for v in model.named_parameters().values():
        v += args.scale * rng.standard_normal(v.shape)
    model.project()
    batch = rng.standard_normal((args.batch, args.d))

    grad_fn = loss_and_gradients
    if args.corrupt:
        if args.corrupt not in model.named_parameters():
            raise UsageError(f"unknown parameter {args.corrupt!r}")

        def grad_fn(m, b):
            loss, g = loss_and_gradients(m, b)
            g[args.corrupt] = -g[args.corrupt]
            return loss, g

    rep = gradient_check(model, batch, eps=args.eps, tol=args.tol, grad_fn=grad_fn)
    print(f"checked {rep.n_checked} entries; max relative error {rep.max_rel_error:.3e} (tol {args.tol:g})")
    for name, i, a, n, e in rep.violations[:50]:
        print(f"  VIOLATION {name}[{i}]: analytic {a:.6e} numeric {n:.6e} rel {e:.3e}")
    if not rep.ok:
        print(f"gradient check FAILED for: {sorted({v[0] for v in rep.violations})}")
        return EXIT_NUMERIC
    print("gradient check passed")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="red", description="Recurrent density estimation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=False, checkpoint=False, data=False):
        if manifest:
            sp.add_argument("--manifest", required=True)
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
            sp.add_argument("--scaler", help="defaults to scaler.json next to the checkpoint")
        if data:
            sp.add_argument("--data", required=True)
            sp.add_argument("--label-column")
            sp.add_argument("--no-header", action="store_true")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")

    sp = sub.add_parser("train", help="train a model from a run manifest")
    common(sp, manifest=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("grid", help="grid search from a run manifest")
    common(sp, manifest=True)
    sp.add_argument("--default-grid", action="store_true")
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("eval", help="held-out NLL and anomaly metrics")
    common(sp, checkpoint=True, data=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sample", help="draw samples in original data units")
    common(sp, checkpoint=True)
    sp.add_argument("--n", type=int, default=1000)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("detect", help="rank rows by log-likelihood and flag anomalies")
    common(sp, checkpoint=True, data=True)
    sp.add_argument("--top-k", type=int)
    sp.add_argument("--log-likelihood-threshold", type=float)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("gradcheck", help="compare analytic and numerical gradients")
    sp.add_argument("--d", type=int, default=5)
    sp.add_argument("--hidden", type=int, default=8)
    sp.add_argument("--components", type=int, default=3)
    sp.add_argument("--batch", type=int, default=4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--scale", type=float, default=0.3)
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--corrupt", metavar="PARAM", help="flip the sign of one parameter's gradient")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "seed", None) is None and args.command == "sample":
        args.seed = 0
    try:
        return args.func(args)
    except BrokenPipeError:
        # downstream closed early (e.g. piped into head); not an error
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DataError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except IntegrityError as e:
        print(f"integrity error: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (NumericError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractError as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
