"""Command-line entry points: synth, train-ep1, train-ep2, eval, calibrate, ablate."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from modelattrib import data_io, protocol
from modelattrib.data_io import SyntheticSpec, generate_synthetic, load_manifest, load_split
from modelattrib.protocol import TrainConfig


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if getattr(args, "L", None) is not None:
        cfg = cfg.replace(L=args.L)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _print_history(history, taxonomy=None) -> None:
    print(f"{'task':>4}  {'avg':>7}  {'auth':>7}  {'unseen':>7}")
    for rec in history:
        unseen = "---" if rec.unseen_acc is None else f"{rec.unseen_acc:7.4f}"
        print(f"{rec.task_index:>4}  {rec.avg_acc:7.4f}  {rec.auth_acc:7.4f}  {unseen:>7}")
    if taxonomy is not None and history:
        print("\nper-class accuracy (final task):")
        for cid, acc in sorted(history[-1].per_class_acc.items()):
            print(f"  {taxonomy.class_name(cid):<24} {acc:.4f}")


def _write_history(history, path: Path) -> None:
    with open(path, "w") as f:
        for rec in history:
            f.write(json.dumps(rec.as_dict()) + "\n")


def _parse_grid(text: str) -> list[float]:
    """Grid syntax: 'lo:hi:step' or a comma-separated list."""
    if ":" in text:
        lo, hi, step = (float(x) for x in text.split(":"))
        n = int(round((hi - lo) / step))
        return [round(lo + i * step, 10) for i in range(n + 1)]
    return [float(x) for x in text.split(",")]


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        families=args.families,
        models_per_family=args.models_per_family,
        dim=args.dim,
        train_per_class=args.samples,
        test_per_class=args.test_samples,
        calib_per_class=args.calib_samples,
        holdout_families=args.holdout_families,
        seed=args.seed,
    )
    manifest = generate_synthetic(spec, args.out)
    print(f"wrote {manifest}")
    return 0


def _open_log(path):
    return open(path, "w") if path else nullcontext(None)


def cmd_train_ep1(args) -> int:
    cfg = _load_config(args)
    manifest = load_manifest(args.manifest)
    with _open_log(args.log) as log:
        state = protocol.run_ep1(manifest, cfg, log_file=log)
    data_io.save_checkpoint(state, args.out)
    _print_history(state.history)
    if args.history:
        _write_history(state.history, Path(args.history))
    print(f"saved checkpoint to {args.out}")
    return 0


def cmd_train_ep2(args) -> int:
    cfg = _load_config(args)
    manifest = load_manifest(args.manifest)
    with _open_log(args.log) as log:
        state, record = protocol.train_static_ep2(manifest, cfg, log_file=log)
    data_io.save_checkpoint(state, args.out)
    _print_history([record], taxonomy=state.taxonomy)
    print(f"saved checkpoint to {args.out}")
    return 0


def cmd_eval(args) -> int:
    state = data_io.load_checkpoint(args.ckpt)
    manifest = load_manifest(args.manifest)
    stream_seed = np.random.SeedSequence(state.config.seed).spawn(2)[0]
    stream = protocol.build_stream_ep1(manifest, state.config.L, stream_seed)
    seen = stream.seen_through(len(state.history) - 1)
    record = protocol.evaluate(state, seen, stream.holdout, tau=args.tau)
    _print_history([record], taxonomy=state.taxonomy)
    if args.msp_csv:
        _export_msp(state, seen, stream.holdout, Path(args.msp_csv))
        print(f"wrote per-sample max-softmax values to {args.msp_csv}")
    return 0


def _export_msp(state, seen, holdout, path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class_name", "role", "decision", "max_softmax"])
        for entry, role in [(e, "seen") for e in seen] + [(e, "holdout") for e in holdout]:
            feats = load_split(entry, "test")
            preds, pmax = protocol.decide_batch(state, feats)
            for d, p in zip(preds, pmax):
                label = "unseen" if d == protocol.UNSEEN else state.taxonomy.class_name(int(d))
                writer.writerow([entry.name, role, label, f"{p:.6f}"])


def cmd_calibrate(args) -> int:
    state = data_io.load_checkpoint(args.ckpt)
    manifest = load_manifest(args.manifest)
    stream_seed = np.random.SeedSequence(state.config.seed).spawn(2)[0]
    stream = protocol.build_stream_ep1(manifest, state.config.L, stream_seed)
    seen = stream.seen_through(len(state.history) - 1)
    grid = _parse_grid(args.grid)
    tau, table = protocol.calibrate_tau(state, seen, grid)
    print(f"{'tau':>6}  {'accept':>7}  {'reject':>7}  {'hmean':>7}")
    for row in table:
        print(
            f"{row['tau']:6.2f}  {row['seen_accept']:7.4f}  "
            f"{row['pseudo_reject']:7.4f}  {row['hmean']:7.4f}"
        )
    print(f"selected tau = {tau}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    manifest = load_manifest(args.manifest)
    if args.toggles:
        toggles = [t.strip() for t in args.toggles.split(",") if t.strip()]
        results = protocol.run_component_ablation(manifest, cfg, toggles)
        print(f"{'config':<12} {'final avg':>9}  {'unseen':>7}")
        for label, history in results:
            final = history[-1]
            unseen = "---" if final.unseen_acc is None else f"{final.unseen_acc:7.4f}"
            print(f"{label:<12} {final.avg_acc:9.4f}  {unseen:>7}")
    elif args.budgets:
        budgets = [int(b) for b in args.budgets.split(",")]
        for budget, history in protocol.run_budget_sweep(manifest, cfg, budgets):
            print(f"budget {budget:>5}: final avg {history[-1].avg_acc:.4f}")
    elif args.taus:
        state = protocol.run_ep1(manifest, cfg)
        for tau, avg, unseen in protocol.run_tau_sweep_eval(state, manifest, _parse_grid(args.taus)):
            print(f"tau {tau:.2f}: avg {avg:.4f}  unseen {unseen:.4f}")
    elif args.L_values:
        values = [int(v) for v in args.L_values.split(",")]
        for L, history in protocol.run_L_sweep(manifest, cfg, values):
            print(f"L {L:>2}: final avg {history[-1].avg_acc:.4f}")
    else:
        print("nothing to ablate: pass --toggles, --budgets, --taus, or --L-values")
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modelattrib",
        description="Continual open-set attribution of generated-image features",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="emit a synthetic manifest plus feature files")
    p.add_argument("--out", required=True)
    p.add_argument("--families", type=int, default=4, help="families incl. the real singleton")
    p.add_argument("--models-per-family", type=int, default=3)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--samples", type=int, default=500, help="train samples per class")
    p.add_argument("--test-samples", type=int, default=100)
    p.add_argument("--calib-samples", type=int, default=100)
    p.add_argument("--holdout-families", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-ep1", help="train the incremental task stream")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--L", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--log", default=None, help="per-step loss log (JSONL)")
    p.add_argument("--history", default=None, help="metric history output (JSONL)")
    p.set_defaults(func=cmd_train_ep1)

    p = sub.add_parser("train-ep2", help="joint training over all non-holdout classes")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.set_defaults(func=cmd_train_ep2)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--msp-csv", default=None, help="export per-sample max-softmax values")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("calibrate", help="sweep decision thresholds on the calibration split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--grid", default="0.5:0.95:0.05")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("ablate", help="component ablations and hyperparameter sweeps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--toggles", default=None, help="comma list from replay,l1,l2,lu")
    p.add_argument("--budgets", default=None, help="comma list of bank budgets")
    p.add_argument("--taus", default=None, help="tau grid, lo:hi:step or comma list")
    p.add_argument("--L-values", dest="L_values", default=None, help="comma list of L")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
