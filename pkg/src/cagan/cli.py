"""Command-line entry point: data generation, training, evaluation and reports.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
The thread count for numeric libraries comes from ``CAGAN_THREADS`` (default 1).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import persistence as io
from .config import RunConfig
from .engine import DimensionError, NumericError, ParameterError, StateError, UsageError
from .metrics import evaluate_all
from .synth import ConfigError, generate_dataset

log = logging.getLogger("cagan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "CAGAN_THREADS"


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", help="JSON or YAML run configuration")
    p.add_argument("--seed", type=int, help="overrides train.seed and the synthetic data seed")
    p.add_argument("--out", help="output directory (default: output.directory)")
    p.add_argument("--variant", choices=list("abcdefgh"))
    p.add_argument("--preset", choices=["desk32", "paper224"])


def build_parser():
    parser = _Parser(prog="cagan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset and its manifest")
    _common(p)

    p = sub.add_parser("train", help="train one variant and save checkpoints")
    _common(p)
    p.add_argument("--data", help="dataset directory (default: data.path)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int, help="stop after this many epochs in total")

    p = sub.add_parser("eval", help="metrics, prediction CSVs and timeline plots for a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: data.path)")
    p.add_argument("--split", choices=["train", "val", "test"])

    p = sub.add_parser("predict", help="per-frame predictions for sequence files")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("inputs", nargs="+", help="sequence files or dataset directories")

    p = sub.add_parser("ablate", help="train and evaluate several variants over shared seeds")
    _common(p)
    p.add_argument("--data", help="dataset directory (default: data.path)")
    p.add_argument("--seeds", help="comma-separated seeds (default: ablate.seeds)")
    p.add_argument("--epochs", type=int, help="override the epoch budget for every variant")

    p = sub.add_parser("export-embeddings", help="2-D PCA of generator block-5 activations")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: data.path)")
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--stride", type=int, help="keep every n-th frame (default: eval.embedding_stride)")
    return parser


def _load_config(args, config_path=None):
    return RunConfig.load(config_path or args.config, seed=args.seed, variant=args.variant,
                          preset=args.preset, out=args.out)


def _out_dir(cfg):
    path = Path(cfg["output"]["directory"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def _read_dataset(path):
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise DataError(f"no dataset at {path} (manifest.json missing); run gen-data first")
    return io.read_dataset(path)


def _bundle_for(cfg, variant=None, seed=None):
    from .models import build_bundle
    tc = cfg.train_config()
    return build_bundle(cfg.preset(), variant or tc.variant, seed=tc.seed if seed is None else seed)


def _run_config_near(checkpoint):
    """The config.json a training run wrote next to its checkpoints, if any."""
    for parent in Path(checkpoint).resolve().parents[:2]:
        candidate = parent / "config.json"
        if candidate.exists():
            return candidate
    return None


def _bundle_from_checkpoint(args):
    config_path = args.config or _run_config_near(args.checkpoint)
    cfg = _load_config(args, config_path)
    bundle = _bundle_for(cfg)
    io.load_checkpoint(args.checkpoint, bundle)
    return cfg, bundle


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _load_config(args)
    out = Path(args.out) if args.out else Path(cfg["data"]["path"])
    data = cfg["data"]
    dataset = generate_dataset(cfg.synth_config(), count=data["count"], split_ratios=tuple(data["split_ratios"]))
    io.write_dataset(out, dataset)
    print(f"wrote {data['count']} sequences and manifest.json to {out}")
    return EXIT_OK


def _epoch_report(state):
    # wall-clock seconds are left out so reruns are byte-identical
    return [{k: v for k, v in rec.items() if k != "seconds"} for rec in state.log]


def _previous_log(out, epoch):
    path = out / "epoch_log.json"
    if not path.exists():
        return []
    return [r for r in io.read_report(path)["payload"] if r["epoch"] <= epoch]


def train_run(cfg, dataset, out, resume=None, epochs=None, variant=None, seed=None):
    """Train per ``cfg`` and write checkpoints plus reports under ``out``. Returns the state."""
    from .models import architecture_audit
    from .trainer import new_state, train_sequences
    tc = cfg.train_config()
    if variant is not None or seed is not None:
        tc = type(tc)(**{**tc.to_dict(), **({"variant": variant} if variant else {}),
                         **({"seed": seed} if seed is not None else {})})
    bundle = _bundle_for(cfg, tc.variant, tc.seed)
    state = new_state(bundle, tc)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"
    run_cfg = {**cfg.to_dict(), "train": tc.to_dict()}
    io.atomic_write(out / "config.json", io.dumps_json(run_cfg))
    io.write_report(out / "arch_audit.json", io.make_report("arch_audit", architecture_audit(bundle)))
    if resume:
        io.load_checkpoint(resume, bundle, state)
        state.log = _previous_log(out, state.epoch)
        log.info("resumed at epoch %d from %s", state.epoch, resume)
    boundaries = set(tc.boundaries())
    target = tc.total_epochs if epochs is None else epochs

    def on_epoch_end(st):
        if st.epoch in boundaries or st.epoch == target:
            io.save_checkpoint(ckpt_dir / f"epoch_{st.epoch:04d}.cagn", st.bundle, st)
        io.write_report(out / "epoch_log.json", io.make_report("epoch_log", _epoch_report(st)))

    train_sequences(state, dataset.train, epochs=target, on_epoch_end=on_epoch_end)
    io.save_checkpoint(out / "final.cagn", bundle, state)
    return state


def cmd_train(args):
    cfg = _load_config(args)
    dataset = _read_dataset(args.data or cfg["data"]["path"])
    _check_dataset(cfg, dataset)
    out = _out_dir(cfg)
    state = train_run(cfg, dataset, out, resume=args.resume, epochs=args.epochs)
    print(f"trained variant {state.config.variant} for {state.epoch} epochs; checkpoint {out / 'final.cagn'}")
    return EXIT_OK


def _check_dataset(cfg, dataset):
    preset = cfg.preset()
    sample = (dataset.train or dataset.test)[0]
    if sample.rgb.shape[1] != preset.input_hw:
        raise DataError(f"dataset frames are {sample.rgb.shape[1]}px but preset {preset.name} "
                        f"expects {preset.input_hw}px")
    if sample.aux.shape[-1] != preset.aux_channels:
        raise DataError(f"dataset aux has {sample.aux.shape[-1]} channels, model expects {preset.aux_channels}")
    if sample.k != preset.k:
        raise DataError(f"dataset has k={sample.k}, model expects k={preset.k}")


def evaluate_bundle(bundle, samples, cfg):
    from .trainer import predict_dataset
    ev = cfg["eval"]
    results = predict_dataset(bundle, samples, noise_at_inference=ev["noise_at_inference"],
                              seed=cfg.train_config().seed)
    report = evaluate_all([r[0] for r in results], [s.labels for s in samples],
                          [r[1] for r in results], k=bundle.preset.k, pooled=ev["pooled_map"])
    return report, results


def prediction_csv(truth, pred):
    rows = ["frame,truth,pred"] + [f"{t},{a},{b}" for t, (a, b) in enumerate(zip(truth, pred))]
    return "\n".join(rows) + "\n"


def cmd_eval(args):
    from .plots import timeline_svg
    cfg, bundle = _bundle_from_checkpoint(args)
    dataset = _read_dataset(args.data or cfg["data"]["path"])
    split = args.split or cfg["eval"]["split"]
    samples = dataset.split(split)
    if not samples:
        raise DataError(f"split {split!r} is empty")
    report, results = evaluate_bundle(bundle, samples, cfg)
    out = _out_dir(cfg)
    for s, (pred, _) in zip(samples, results):
        io.atomic_write(out / "predictions" / f"seq_{s.id:04d}.csv", prediction_csv(s.labels, pred).encode())
        if cfg["eval"]["plots"]:
            svg = timeline_svg(s.labels, pred, title=f"sequence {s.id} ({split})")
            io.atomic_write(out / "plots" / f"seq_{s.id:04d}.svg", svg.encode())
    payload = {"split": split, "variant": bundle.variant.id, **report.as_dict()}
    io.write_report(out / "metrics.json", io.make_report("metrics", payload))
    print(f"{split}: acc {report.frame_accuracy:.2f}  F1@10/25/50 "
          + "/".join(f"{v:.2f}" for v in report.f1_at.values())
          + f"  edit {report.edit:.2f}  mAP@mid {report.map_mid:.2f}")
    return EXIT_OK


def cmd_predict(args):
    from .trainer import predict_sequence
    cfg, bundle = _bundle_from_checkpoint(args)
    out = _out_dir(cfg)
    samples = []
    for item in args.inputs:
        path = Path(item)
        if path.is_dir():
            ds = _read_dataset(path)
            samples += ds.train + ds.val + ds.test
        elif path.exists():
            samples.append(io.read_sequence(path))
        else:
            raise DataError(f"no such input {path}")
    k = bundle.preset.k
    for s in samples:
        pred, dist = predict_sequence(bundle, s, cfg["eval"]["noise_at_inference"], cfg.train_config().seed)
        header = "frame,truth,pred," + ",".join(f"p{c}" for c in range(k))
        rows = [header] + [f"{t},{s.labels[t]},{pred[t]}," + ",".join(f"{p:.17g}" for p in dist[t])
                           for t in range(s.length)]
        io.atomic_write(out / "predictions" / f"seq_{s.id:04d}.csv", ("\n".join(rows) + "\n").encode())
    print(f"wrote predictions for {len(samples)} sequences to {out / 'predictions'}")
    return EXIT_OK


ABLATION_COLUMNS = ("F1@10", "F1@25", "F1@50", "mAP@mid", "accuracy")


def ablation_table(rows):
    lines = ["| variant | " + " | ".join(ABLATION_COLUMNS) + " |", "|---" * (len(ABLATION_COLUMNS) + 1) + "|"]
    for r in rows:
        if "error" in r:
            lines.append(f"| {r['variant']} | failed: {r['error']} |")
        else:
            lines.append(f"| {r['variant']} | " + " | ".join(f"{r[c]:.1f}" for c in ABLATION_COLUMNS) + " |")
    return "\n".join(lines) + "\n"


def run_ablation(cfg, dataset, out, variants, seeds, epochs=None):
    rows = []
    for v in variants:
        per_seed = []
        try:
            for seed in seeds:
                state = train_run(cfg, dataset, out / f"{v}_seed{seed}", epochs=epochs, variant=v, seed=seed)
                report, _ = evaluate_bundle(state.bundle, dataset.test, cfg)
                per_seed.append(report)
        except Exception as exc:  # one failed row must not sink the others
            log.error("variant %s failed: %s", v, exc)
            rows.append({"variant": v, "error": str(exc)})
            continue
        row = {"variant": v, "seeds": list(seeds)}
        for name, get in (("F1@10", lambda r: r.f1_at[10]), ("F1@25", lambda r: r.f1_at[25]),
                          ("F1@50", lambda r: r.f1_at[50]), ("mAP@mid", lambda r: r.map_mid),
                          ("accuracy", lambda r: r.frame_accuracy)):
            vals = [get(r) for r in per_seed]
            row[name] = float(np.mean(vals))
            row[name + "/per_seed"] = vals
        row["edit"] = float(np.mean([r.edit for r in per_seed]))
        rows.append(row)
    return rows


def cmd_ablate(args):
    cfg = _load_config(args)
    dataset = _read_dataset(args.data or cfg["data"]["path"])
    _check_dataset(cfg, dataset)
    variants = [args.variant] if args.variant else list(cfg["ablate"]["variants"])
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",")]
        except ValueError:
            raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    elif args.seed is not None:
        seeds = [args.seed]
    else:
        seeds = list(cfg["ablate"]["seeds"])
    out = _out_dir(cfg)
    rows = run_ablation(cfg, dataset, out, variants, seeds, epochs=args.epochs)
    io.write_report(out / "ablation.json", io.make_report("metrics", {"ablation": rows}))
    table = ablation_table(rows)
    io.atomic_write(out / "ablation.md", table.encode())
    print(table, end="")
    return EXIT_OK


def cmd_export_embeddings(args):
    from .embed import collect_activations, export_rows, pca_project
    cfg, bundle = _bundle_from_checkpoint(args)
    dataset = _read_dataset(args.data or cfg["data"]["path"])
    samples = dataset.split(args.split or cfg["eval"]["split"])
    stride = args.stride or cfg["eval"]["embedding_stride"]
    ids, classes, acts = collect_activations(bundle, samples, stride=stride)
    projected = pca_project(acts)
    out = _out_dir(cfg)
    io.atomic_write(out / "embeddings.csv", export_rows(ids, classes, projected).encode())
    print(f"projected {len(ids)} frames to {out / 'embeddings.csv'}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "ablate": cmd_ablate, "export-embeddings": cmd_export_embeddings}


def _thread_count():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def main(argv=None):
    from threadpoolctl import threadpool_limits
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with threadpool_limits(limits=_thread_count()):
            return COMMANDS[args.command](args)
    except (ConfigError, UsageError, ParameterError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DimensionError, io.PersistenceError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
