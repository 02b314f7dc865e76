"""Command-line surface: train, eval, run-matrix, analyze-layers, gradcheck,
params, report.

Configuration comes from one JSON file (``--config``) mirroring the
experiment-config keys, with targeted ``--set key=value`` overrides using
dotted paths (values parse as JSON, falling back to strings). Exit codes:
0 success, 2 configuration error, 3 when every attempted run diverged.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, FuseLabError
from .fusion import (FusionPlan, make_plan, layer_similarity_matrix,
                     partition_by_similarity, resolve_layer_set, count_parameters)
from .harness import (ExperimentConfig, emit_report, evaluate_checkpoint,
                      load_records, matrix_exit_code, metrics_rows, run_matrix,
                      train_two_stage)
from .model import FusedModel
from .rng import Rng
from .tasks import generate_dataset

STRATEGY_CODES = {
    "E+D": ("external", "direct"),
    "E+M": ("external", "modular"),
    "I+D": ("internal", "direct"),
    "I+M": ("internal", "modular"),
}
SET_LABELS = ("Single", "Double", "Triple", "Former", "Latter", "All")


def set_override(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override '{assignment}' is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override '{key}' descends through a non-object")
    node[parts[-1]] = value


def load_experiment_config(args) -> ExperimentConfig:
    payload = ExperimentConfig().to_dict()
    if args.config:
        try:
            payload.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
    for assignment in args.set or []:
        set_override(payload, assignment)
    cfg = ExperimentConfig.from_dict(payload)
    cfg.validate()
    return cfg


def parse_strategy(token: str) -> FusionPlan:
    """'E+D' or 'I+M:post-cross' style token into a plan template."""
    code, _, variant = token.partition(":")
    if code not in STRATEGY_CODES:
        raise ConfigError(f"unknown strategy '{code}', expected one of {list(STRATEGY_CODES)}")
    position, pattern = STRATEGY_CODES[code]
    return FusionPlan(position=position, pattern=pattern, variant=variant or None)


def parse_sets(tokens: str, depth: int, partition=None) -> list:
    labels = SET_LABELS if tokens == "all" else tuple(t.strip() for t in tokens.split(","))
    return [resolve_layer_set(label, depth, partition=partition) for label in labels]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_experiment_config(args)
    last = {"printed": 0}

    def progress(stage, step, loss):
        if step - last["printed"] >= 100 or step == 0:
            last["printed"] = step
            print(f"stage {stage} step {step} loss {loss:.4f}", flush=True)

    record = train_two_stage(cfg, progress=progress if args.verbose else None)
    print(f"run {record.fingerprint} [{record.strategy} {record.layer_set}] "
          f"status={record.status}")
    if record.status == "ok":
        for task, acc in record.eval_accuracy.items():
            print(f"  {task}: {acc:.4f}")
        print(f"  average: {record.average:.4f}")
    else:
        print(f"  {record.detail}")
    print(f"  wall clock: {record.wall_clock:.1f}s; outputs under {cfg.out_dir}")
    return 3 if record.status == "diverged" else 0


def cmd_eval(args) -> int:
    cfg = load_experiment_config(args)
    row = evaluate_checkpoint(cfg, args.checkpoint)
    print(f"{row.strategy} {row.layer_set}")
    for task, acc in sorted(row.per_task.items()):
        print(f"  {task}: {acc:.4f}")
    print(f"  average: {row.average:.4f}")
    return 0


def cmd_run_matrix(args) -> int:
    cfg = load_experiment_config(args)
    strategies = [parse_strategy(t.strip()) for t in args.strategies.split(",")]
    sets = parse_sets(args.sets, cfg.encoder.depth)
    records = run_matrix(strategies, sets, cfg,
                         include_baseline=not args.no_baseline,
                         progress=None)
    paths = emit_report(records, cfg.out_dir)
    for row in metrics_rows(records):
        print(f"{row.strategy:9s} {row.layer_set:8s} avg={row.average:.4f}")
    for rec in records:
        if rec.status != "ok":
            print(f"{rec.strategy:9s} {rec.layer_set:8s} {rec.status}: {rec.detail}")
    print(f"report: {paths['summary']}")
    return matrix_exit_code(records)


def cmd_analyze_layers(args) -> int:
    cfg = load_experiment_config(args)
    model = FusedModel(cfg.encoder, cfg.lm, FusionPlan.baseline(), seed=cfg.seed)
    if args.pretrained_encoder:
        from .tensorio import load_checkpoint

        named, _ = load_checkpoint(args.pretrained_encoder)
        model.encoder.load_weights(named)
    probes = generate_dataset(cfg.data.seed, "pretrain-captions", args.probes,
                              grid_k=cfg.data.grid_k, index_offset=2_000_000,
                              n_patches=cfg.encoder.n_patches)
    feats = [model.encoder.encode(s.image) for s in probes]
    sim = layer_similarity_matrix(feats)
    part = partition_by_similarity(sim)
    print(f"stage partition over {part.n} layers: beginning=[1..{part.b}] "
          f"middle=[{part.b + 1}..{part.m}] ending=[{part.m + 1}..{part.n}]")
    for label in ("Single", "Double", "Triple"):
        resolved = resolve_layer_set(label, cfg.encoder.depth, partition=part)
        print(f"  {label}: {list(resolved.indices)}")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        np.savetxt(out / "layer_similarity.csv", sim, delimiter=",")
        (out / "partition.json").write_text(json.dumps(
            {"b": part.b, "m": part.m, "n": part.n}, indent=2))
        print(f"wrote {out / 'layer_similarity.csv'} and {out / 'partition.json'}")
    else:
        with np.printoptions(precision=3, suppress=True, linewidth=160):
            print(sim)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradient_suite, gradient_suite_passed

    results = gradient_suite()
    for key in sorted(results):
        if key.startswith("kernel:"):
            if args.verbose:
                print(f"  {key:28s} {results[key]:.3e}")
    for key in ("kernels", "attention", "gated_block", "end_to_end"):
        print(f"{key:12s} max rel err {results[key]:.3e}")
    ok = gradient_suite_passed(results)
    print("gradient suite:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_params(args) -> int:
    cfg = load_experiment_config(args)
    strategies = [parse_strategy(t.strip()) for t in args.strategies.split(",")]
    sets = parse_sets(args.sets, cfg.encoder.depth)
    print(f"{'strategy':10s} {'layer_set':10s} {'k':>3s} {'projector':>10s} "
          f"{'modules':>10s} {'total_new':>10s}")
    for template in strategies:
        for layer_set in sets:
            plan = make_plan(template.position, template.pattern, layer_set,
                             variant=template.variant,
                             projector_kind=cfg.plan.projector_kind)
            counts = count_parameters(plan, cfg.encoder.width, cfg.lm.hidden)
            print(f"{plan.strategy_label:10s} {layer_set.label:10s} {layer_set.k:3d} "
                  f"{counts['projector_params']:10d} {counts['module_params']:10d} "
                  f"{counts['total_new']:10d}")
    return 0


def cmd_report(args) -> int:
    records = load_records(args.records_dir)
    paths = emit_report(records, args.out_dir or args.records_dir)
    print(f"metrics: {paths['metrics']}")
    print(f"summary: {paths['summary']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fuselab",
        description="Desk-scale testbed for multi-layer visual feature fusion")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (dotted path)")

    p = sub.add_parser("train", help="run the two-stage recipe for one plan")
    add_config_args(p)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("run-matrix", help="train a strategy x layer-set grid")
    add_config_args(p)
    p.add_argument("--strategies", default="E+D,E+M,I+D,I+M",
                   help="comma list, e.g. E+D,I+M:post-cross")
    p.add_argument("--sets", default="all",
                   help="comma list of layer-set labels, or 'all'")
    p.add_argument("--no-baseline", action="store_true")
    p.set_defaults(fn=cmd_run_matrix)

    p = sub.add_parser("analyze-layers",
                       help="similarity matrix, stage partition, resolved sets")
    add_config_args(p)
    p.add_argument("--probes", type=int, default=16)
    p.add_argument("--pretrained-encoder", help="encoder checkpoint to load")
    p.add_argument("--out-dir")
    p.set_defaults(fn=cmd_analyze_layers)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("params", help="new-parameter accounting per plan")
    add_config_args(p)
    p.add_argument("--strategies", default="E+D,E+M,I+D,I+M")
    p.add_argument("--sets", default="all")
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("report", help="re-emit CSV/summary from stored records")
    p.add_argument("--records-dir", required=True)
    p.add_argument("--out-dir")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FuseLabError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
