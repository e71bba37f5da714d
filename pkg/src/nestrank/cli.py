"""Command-line entry points: gen-data, train, compensate, eval, sweep, inspect."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import bench, distill, lora
from .model import ModelConfig, RerankerModel, load_checkpoint, params_checksum, save_checkpoint
from .shapes import parse_shape_file


def _load_model(path: str) -> RerankerModel:
    cfg, params, _ = load_checkpoint(path)
    return RerankerModel(cfg, params=params)


def cmd_gen_data(args) -> int:
    cfg = bench.parse_task_config(args.config) if args.config else bench.TaskConfig()
    examples = bench.generate_examples(cfg, args.split)
    bench.write_examples(args.out, examples)
    print(f"wrote {len(examples)} queries to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = distill.parse_train_config(args.config) if args.config else distill.TrainConfig()
    examples = bench.read_examples(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mcfg = ModelConfig()
    model = RerankerModel(mcfg, seed=cfg.seed)
    log_path = out / "train_log.jsonl"
    with open(log_path, "w") as log:
        distill.train(model, examples, cfg, log_file=log)
    ckpt = out / "model.ckpt"
    save_checkpoint(ckpt, mcfg, model.params, extra={"train_seed": cfg.seed,
                                                     "method": cfg.method})
    bench.write_manifest(out / "manifest.json", cfg.seed,
                         {"train": vars(cfg) | {"committee": list(cfg.committee),
                                                "factors": list(cfg.factors)}},
                         {"model": ckpt})
    print(f"trained model saved to {ckpt}")
    return 0


def cmd_compensate(args) -> int:
    model = _load_model(args.ckpt)
    raw = bench.parse_kv_file(args.config) if args.config else {}
    cfg = CompensationConfig.from_raw(raw, args.config or "<defaults>")
    examples = bench.read_examples(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bank = lora.AdapterBank(model.config, rank=cfg.rank, alpha=cfg.alpha,
                            max_factor=cfg.max_factor, targets=cfg.targets, seed=cfg.seed)
    with open(out / "compensate_log.jsonl", "w") as log:
        lora.compensation_train(model, bank, examples, cfg, log_file=log)
    bank_path = out / "bank.ckpt"
    lora.save_bank(bank_path, bank)
    print(f"adapter bank saved to {bank_path}")
    return 0


class CompensationConfig:
    rank = 4
    alpha = 8.0
    max_factor = 8
    targets = lora.DEFAULT_TARGETS
    lr = 0.05
    momentum = 0.9
    epochs = 1
    seed = 11
    batch_size = 1
    depth_min = 2
    max_events = 2
    factors = (2, 4, 8)
    tau = 0.5

    @classmethod
    def from_raw(cls, raw: dict, origin: str) -> "CompensationConfig":
        cfg = cls()
        casts = {
            "rank": int, "max_factor": int, "epochs": int, "seed": int,
            "batch_size": int, "depth_min": int, "max_events": int,
            "alpha": float, "lr": float, "momentum": float, "tau": float,
            "targets": lambda v: tuple(x.strip() for x in v.split(",")),
            "factors": lambda v: tuple(int(x) for x in v.split(",")),
        }
        for key, value in raw.items():
            if key not in casts:
                raise ValueError(f"{origin}: unknown compensation config key {key!r}")
            setattr(cfg, key, casts[key](value))
        return cfg


def cmd_eval(args) -> int:
    model = _load_model(args.ckpt)
    bank = lora.load_bank(args.bank, model.config) if args.bank else None
    examples = bench.read_examples(args.data)
    spec = parse_shape_file(args.shape)
    mrr, ndcg, savings, millis = bench.evaluate(model, examples, spec, bank)
    print(json.dumps({"mrr_at_10": round(mrr, 6), "ndcg_at_10": round(ndcg, 6),
                      "flops_savings": round(savings, 6), "wallclock_ms": round(millis, 3)}))
    return 0


def cmd_sweep(args) -> int:
    model = _load_model(args.ckpt)
    bank = lora.load_bank(args.bank, model.config) if args.bank else None
    examples = bench.read_examples(args.data)
    specs = [bench.parse_sweep_file(p) for p in args.spec]
    clock = (lambda: 0.0) if args.fixed_clock else None
    rows = bench.run_sweeps(specs, model, examples, bank, clock=clock)
    bench.write_sweep_csv(args.out, rows)
    if args.manifest:
        bench.write_manifest(args.manifest, specs[0].seed,
                             {"specs": [str(p) for p in args.spec]},
                             {"model": args.ckpt} | ({"bank": args.bank} if args.bank else {}))
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_inspect(args) -> int:
    cfg, params, extra = load_checkpoint(args.ckpt)
    print(json.dumps({
        "config": vars(cfg) if not hasattr(cfg, "__dataclass_fields__") else
        {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
        "extra": extra,
        "tensors": {name: list(t.shape) for name, t in sorted(params.items())},
        "params_checksum": params_checksum(params),
        "file_sha256": bench.file_sha256(args.ckpt),
    }, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nestrank",
                                description="configurable-depth/width re-ranker toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic retrieval split as JSONL")
    g.add_argument("--config", help="task config file (key = value)")
    g.add_argument("--split", choices=("train", "eval"), default="train")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train the re-ranker")
    t.add_argument("--config", help="training config file (key = value)")
    t.add_argument("--data", required=True, help="training JSONL")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(fn=cmd_train)

    c = sub.add_parser("compensate", help="fit the adapter bank on a frozen model")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--config", help="compensation config file (key = value)")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_compensate)

    e = sub.add_parser("eval", help="evaluate one substructure request")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--bank")
    e.add_argument("--data", required=True)
    e.add_argument("--shape", required=True, help="shape file (depth/widths or compress lines)")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="run compression sweeps and write the metrics CSV")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--bank")
    s.add_argument("--data", required=True)
    s.add_argument("--spec", required=True, nargs="+", help="one or more sweep spec files")
    s.add_argument("--out", required=True, help="output CSV path")
    s.add_argument("--manifest", help="also write a run manifest JSON")
    s.add_argument("--fixed-clock", action="store_true",
                   help="write wallclock_ms as 0 for byte-reproducible output")
    s.set_defaults(fn=cmd_sweep)

    i = sub.add_parser("inspect", help="print a checkpoint's config, shapes and hashes")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, IndexError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
