"""Command-line entry point: ``hst <command> [options]`` (see ``hst --help``)."""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import K_GRID, TrainConfig, WindowSpec, to_dict, train_config_from_dict
from .dataio import (
    SwitchingSystemSpec, attach_true_states, load_dataset, make_windows, random_switching_spec,
    synth_switching_lds, transition_variant, write_dataset, zscore_normalize,
)
from .dynstats import (
    compare_occupancy, occupancy, plot_comparison, read_token_csv, state_activation_map, write_token_csv,
)
from .evalkit import (
    confusion_metrics, cross_validate, reconstruction_metrics, stratified_kfold, subject_predictions,
)
from .trainkit import (
    load_checkpoint, predict_proba, save_checkpoint, tokenize, train_classifier, train_tokenizer,
)

log = logging.getLogger("hst")

OUTPUT_ROOT_ENV = "HST_OUTPUT_ROOT"


# ---------------------------------------------------------------- helpers

def _run_dir(args) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = root / f"{args.command}-{stamp}"
        n = 1
        while out.exists():
            out = root / f"{args.command}-{stamp}-{n}"
            n += 1
    if out.exists() and any(out.iterdir()):
        raise SystemExit(f"output directory {out} exists and is not empty")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_config(out: Path, args, cfg: TrainConfig | None = None) -> None:
    record = {
        "command": args.command,
        "version": __version__,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
    }
    if cfg is not None:
        record["train_config"] = to_dict(cfg)
    (out / "run_config.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str), encoding="utf-8")


def _train_config(args) -> TrainConfig:
    base = train_config_from_dict(json.loads(Path(args.config).read_text())) if args.config else TrainConfig()
    d = to_dict(base)
    m = d["model"]
    overrides = {
        ("phase1_steps",): args.steps, ("phase2_epochs",): args.epochs, ("learning_rate",): args.lr,
        ("batch_size",): args.batch_size, ("seed",): args.seed,
        ("model", "window"): args.window, ("model", "ssm", "hidden"): args.hidden,
        ("model", "ssm", "backend"): args.backend, ("model", "quantizer", "mode"): args.mode,
        ("loss", "commitment"): args.commitment,
    }
    for path, val in overrides.items():
        if val is None:
            continue
        node = d
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = val
    if args.codes is not None:
        q = m["quantizer"]
        q["state_codes"] = q["transition_codes"] = args.codes
        q["state_residual_codes"] = q["transition_residual_codes"] = args.codes
    return train_config_from_dict(d)


def _records(args, cfg: TrainConfig | None = None):
    records = load_dataset(args.manifest, min_length=cfg.model.window if cfg else None)
    attach_true_states(records, args.manifest)
    return records


def _fit_rois(cfg: TrainConfig, records) -> TrainConfig:
    d = to_dict(cfg)
    d["model"]["n_rois"] = records[0].M
    return train_config_from_dict(d)


# ---------------------------------------------------------------- commands

def cmd_synth(args, out: Path) -> None:
    if args.spec:
        spec = SwitchingSystemSpec.load(args.spec)
    else:
        spec = random_switching_spec(args.states, args.rois, args.dwell, args.noise, seed=args.seed,
                                     spectral_radius=args.spectral_radius)
    specs = {0: spec}
    if args.groups == 2:
        specs[1] = transition_variant(spec, args.dwell_ratio, seed=args.seed + 1)
    records = []
    for i in range(args.subjects):
        label = i % args.groups
        records.append(synth_switching_lds(specs[label], args.T, seed=args.seed * 100003 + i,
                                           subject_id=f"sub{i:04d}", label=label))
    write_dataset(records, out)
    for label, s in specs.items():
        s.save(out / f"spec_group{label}.json")
    _write_run_config(out, args)
    print(f"wrote {len(records)} subjects to {out / 'manifest.csv'}")


def cmd_train_tokenizer(args, out: Path) -> None:
    cfg = _train_config(args)
    records = _records(args, cfg)
    cfg = _fit_rois(cfg, records)
    _write_run_config(out, args, cfg)
    ws = make_windows(records, WindowSpec(cfg.model.window))
    ckpt = train_tokenizer(ws, cfg, metrics_path=out / "metrics.jsonl")
    save_checkpoint(ckpt, out / "tokenizer.hst")
    print(f"trained {ckpt.step} steps; checkpoint {out / 'tokenizer.hst'}")


def cmd_train_classifier(args, out: Path) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = copy.deepcopy(ckpt.config)
    if args.epochs is not None:
        cfg.phase2_epochs = args.epochs
    if args.seed is not None:
        cfg.seed = args.seed
    _write_run_config(out, args, cfg)
    records = load_dataset(args.manifest, min_length=cfg.model.window)
    ws = make_windows(records, WindowSpec(cfg.model.window))
    clf = train_classifier(ckpt, ws, cfg, metrics_path=out / "metrics.jsonl")
    save_checkpoint(clf, out / "classifier.hst")
    probs = predict_proba(clf, ws)
    subj = subject_predictions(ws.subject_ids, probs)
    by_id = {r.subject_id: r.label for r in records}
    m = confusion_metrics([p for _, p in subj.values()], [by_id[s] for s in subj])
    print(f"training-set subject accuracy {m.accuracy:.3f}; checkpoint {out / 'classifier.hst'}")


def _windows_for(args, ckpt):
    records = load_dataset(args.manifest, min_length=ckpt.config.model.window)
    W = ckpt.config.model.window
    return records, make_windows(records, WindowSpec(W, args.stride or W))


def cmd_tokenize(args, out: Path) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    _write_run_config(out, args, ckpt.config)
    _, ws = _windows_for(args, ckpt)
    tokens, _ = tokenize(ckpt, ws)
    write_token_csv(out / "tokens.csv", ws.subject_ids, ws.offsets, tokens)
    print(f"wrote {out / 'tokens.csv'}")


def cmd_reconstruct(args, out: Path) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    _write_run_config(out, args, ckpt.config)
    _, ws = _windows_for(args, ckpt)
    _, x_hat = tokenize(ckpt, ws)
    metrics = reconstruction_metrics(ws.windows, x_hat)
    np.savez_compressed(out / "reconstruction.npz", x=ws.windows, x_hat=x_hat,
                        offsets=ws.offsets, subject_ids=np.asarray(ws.subject_ids))
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True), encoding="utf-8")
    print(f"r={metrics['r']:.4f} mse={metrics['mse']:.5f}")


def cmd_evaluate(args, out: Path) -> None:
    cfg = _train_config(args)
    records = _records(args, cfg)
    cfg = _fit_rois(cfg, records)
    _write_run_config(out, args, cfg)
    report = cross_validate(records, cfg, k=args.folds, seed=cfg.seed,
                            out_dir=out / "folds" if args.save_folds else None)
    report.to_csv(out / "cv_results.csv")
    for key, (mu, sd) in report.summary().items():
        print(f"{key}: {mu:.4f} +/- {sd:.4f}")


def cmd_analyze(args, out: Path) -> None:
    _write_run_config(out, args)
    streams = read_token_csv(args.tokens)
    records = {r.subject_id: r for r in load_dataset(args.manifest)}
    if args.checkpoint:
        q = load_checkpoint(args.checkpoint).config.model.quantizer
        sizes = {"state_token": q.state_codes, "transition_token": q.transition_codes}
    else:
        sizes = {c: int(max(s[c].max() for s in streams.values())) + 1 for c in ("state_token", "transition_token")}
    groups = {1: [], 0: []}
    for sid in sorted(streams):
        groups.setdefault(records[sid].label, []).append(sid)
    for col, vocab in (("state_token", "state"), ("transition_token", "transition")):
        K = sizes[col]
        occ = {sid: occupancy(streams[sid][col], K) for sid in streams}
        report = compare_occupancy([occ[s] for s in groups[1]], [occ[s] for s in groups[0]],
                                   vocab, args.q, args.test)
        report.to_csv(out / f"{vocab}_report.csv")
        if args.plots:
            plot_comparison(report, out / f"{vocab}_occupancy.png", labels=("label 1", "label 0"))
        xs, ks = [], []
        for sid, s in streams.items():
            Z = zscore_normalize(records[sid].X)
            xs.append(Z[s["t"]])
            ks.append(s[col])
        X, tok = np.concatenate(xs), np.concatenate(ks)
        with (out / f"{vocab}_maps.csv").open("w", encoding="utf-8") as fh:
            fh.write("token," + ",".join(f"roi_{j}" for j in range(X.shape[1])) + "\n")
            for k in range(K):
                v = state_activation_map(X, tok, k)
                cells = ["" for _ in range(X.shape[1])] if v is None else [repr(float(a)) for a in v]
                fh.write(f"{k}," + ",".join(cells) + "\n")
        print(f"{vocab}: {int(report.significant.sum())} of {K} tokens significant at q={args.q}")


def cmd_sweep_k(args, out: Path) -> None:
    base = _train_config(args)
    records = _records(args, base)
    base = _fit_rois(base, records)
    _write_run_config(out, args, base)
    plan = stratified_kfold(records, args.folds, base.seed)
    by_id = {r.subject_id: r for r in records}
    train = make_windows([by_id[s] for s in plan.train_subjects(0)], WindowSpec(base.model.window))
    test = make_windows([by_id[s] for s in plan.test_subjects(0)], WindowSpec(base.model.window))
    rows = []
    for mode in args.modes.split(","):
        for K in [int(k) for k in args.grid.split(",")]:
            d = to_dict(base)
            q = d["model"]["quantizer"]
            q.update(mode=mode, state_codes=K, transition_codes=K, state_residual_codes=K,
                     transition_residual_codes=K)
            cfg = train_config_from_dict(d)
            ckpt = train_tokenizer(train, cfg, log_every=0)
            _, x_hat = tokenize(ckpt, test)
            row = {"mode": mode, "K": K, **reconstruction_metrics(test.windows, x_hat)}
            if args.classify:
                clf = train_classifier(ckpt, train, cfg)
                subj = subject_predictions(test.subject_ids, predict_proba(clf, test))
                ids = sorted(subj)
                row["acc"] = confusion_metrics([subj[s][1] for s in ids], [by_id[s].label for s in ids]).accuracy
            rows.append(row)
            print(json.dumps(row, sort_keys=True))
    cols = ["mode", "K", "r", "mse"] + (["acc"] if args.classify else [])
    with (out / "sweep.csv").open("w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(str(r[c]) for c in cols) + "\n")


# ---------------------------------------------------------------- parser

def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON training config; flags override it")
    p.add_argument("--steps", type=int, help="phase-1 optimizer steps")
    p.add_argument("--epochs", type=int, help="phase-2 epochs")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--backend", choices=["RNN", "LSTM", "GRU", "SelectiveSSM"])
    p.add_argument("--codes", type=int, help="size of every codebook")
    p.add_argument("--mode", choices=["hierarchical", "flat", "continuous"])
    p.add_argument("--commitment", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hst", description="Hierarchical state/transition tokenizer for ROI time series.")
    parser.add_argument("--version", action="version", version=f"hst {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command>-<timestamp>)")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "write a synthetic switching-LDS dataset")
    p.add_argument("--states", type=int, default=4)
    p.add_argument("--rois", type=int, default=16)
    p.add_argument("--subjects", type=int, default=40)
    p.add_argument("--T", type=int, default=400)
    p.add_argument("--dwell", type=float, default=20.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--spectral-radius", type=float, default=0.5)
    p.add_argument("--groups", type=int, choices=[1, 2], default=1,
                   help="2: odd-indexed subjects (label 1) use a different transition matrix")
    p.add_argument("--dwell-ratio", type=float, default=0.4, help="group-1 dwell mean relative to group 0")
    p.add_argument("--spec", help="JSON switching-system spec instead of a random one")
    p.add_argument("--seed", type=int, default=0)

    p = add("train-tokenizer", cmd_train_tokenizer, "phase 1: train the tokenizer")
    _train_flags(p)

    p = add("train-classifier", cmd_train_classifier, "phase 2: frozen quantizer + MLP classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)

    for name, func, help_ in (("tokenize", cmd_tokenize, "emit token CSV"),
                              ("reconstruct", cmd_reconstruct, "reconstruct windows and report r / MSE")):
        p = add(name, func, help_)
        p.add_argument("--manifest", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--stride", type=int, help="window stride (default: window length)")

    p = add("evaluate", cmd_evaluate, "stratified k-fold cross-validation of the two-phase pipeline")
    _train_flags(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--save-folds", action="store_true")

    p = add("analyze", cmd_analyze, "occupancy group comparison with FDR control")
    p.add_argument("--tokens", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", help="tokenizer checkpoint (for vocabulary sizes)")
    p.add_argument("--q", type=float, default=0.05)
    p.add_argument("--test", choices=["welch", "mannwhitney"], default="welch")
    p.add_argument("--plots", action="store_true")

    p = add("sweep-k", cmd_sweep_k, "codebook-size sweep over the K grid")
    _train_flags(p)
    p.add_argument("--grid", default=",".join(map(str, K_GRID)))
    p.add_argument("--modes", default="hierarchical")
    p.add_argument("--folds", type=int, default=5, help="held-out split is fold 0 of this plan")
    p.add_argument("--classify", action="store_true", help="also run phase 2 and report test accuracy")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    out = _run_dir(args)
    try:
        args.func(args, out)
    except BaseException as exc:
        shutil.rmtree(out, ignore_errors=True)
        if isinstance(exc, (KeyboardInterrupt, SystemExit)):
            raise
        print(f"hst {args.command}: error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
