"""Command-line entry point: ``relctr <subcommand> [--config FILE] [--set key=value ...]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .debias import ConfigError as DebiasConfigError
from .encoder import PretrainConfig, TrainingDivergence as EncoderDivergence, pretrain_pipeline, save_encoder
from .metrics import UndefinedMetricError
from .model import TrainingDivergence, score_candidates
from .synth import ConfigError as WorldConfigError, generate_world, iter_sessions, load_dataset

EXIT_CONFIG, EXIT_METRIC, EXIT_DIVERGENCE = 2, 3, 4

log = logging.getLogger("relctr")


def _config(args) -> ex.TrainConfig:
    cfg = ex.load_config(args.config) if args.config else ex.TrainConfig()
    return ex.parse_overrides(args.set or [], cfg)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = args.out or cfg.data_dir
    if not out:
        raise ex.ConfigError("gen-data needs --out or data_dir")
    raw = ex.generate_data(cfg)
    ex.write_data(raw, out)
    print(json.dumps({"data_dir": str(out), "train": len(raw.train), "test": len(raw.test)}, sort_keys=True))
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = args.out or cfg.encoder_path
    if not out:
        raise ex.ConfigError("pretrain-encoder needs --out or encoder_path")
    world = generate_world(cfg.world_config(), cfg.pretrain_seed)
    res = pretrain_pipeline(world, cfg.pretrain_pairs, cfg.pretrain_seed, cfg.encoder_dim, cfg.distill,
                            PretrainConfig(epochs=cfg.pretrain_epochs))
    save_encoder(out, res.encoder, res.head)
    h = res.history
    print(json.dumps({"encoder": str(out), "heldout_accuracy": h.heldout_accuracy[-1] if h.heldout_accuracy else None,
                      "train_distill": h.train_distill, "train_sft": h.train_sft}, sort_keys=True))
    return 0


def _prepared(cfg: ex.TrainConfig) -> ex.Prepared:
    if not cfg.data_dir:
        raise ex.ConfigError("data_dir is required (run gen-data first)")
    return ex.get_prepared(cfg)


def cmd_train(args) -> int:
    cfg = _config(args)
    if not cfg.output_dir:
        raise ex.ConfigError("train needs output_dir")
    data = _prepared(cfg)
    model, hist = ex.train_model(cfg, data)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ex.save_model(out / "model.ckpt", model)
    print(json.dumps({"checkpoint": str(out / "model.ckpt"), "loss": hist.loss}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    model_path = Path(args.model or Path(cfg.output_dir) / "model.ckpt")
    model = ex.load_model(model_path)
    report = ex.evaluate(model, _prepared(cfg), cfg, args.base_auc)
    out = Path(args.out) if args.out else model_path.with_name("report.json")
    report.write(out)
    sys.stdout.write(report.to_json())
    return 0


def cmd_score(args) -> int:
    cfg = _config(args)
    model = ex.load_model(args.model)
    raw = ex.get_raw(cfg)
    samples = load_dataset(args.data)
    hist = ex.HistoryIndex(raw.train, raw.world.config.train_days, cfg.seed, cfg.pool_users, cfg.top_k,
                           cfg.max_own)
    texts = ex.TextEmbeddings(ex.get_encoder(cfg, raw.world))
    idx = ex.index_samples(samples, [s.click for s in samples], texts, hist, cfg.use_cross)
    sc = model.score_arrays(idx.all())
    start = 0
    for group in iter_sessions(samples):
        rows = slice(start, start + len(group))
        start += len(group)
        for item, p, tau, score, rank in score_candidates(idx.cols["item"][rows], sc["score"][rows],
                                                          sc["p_click"][rows], sc["tau"][rows]):
            print(f"{item}\t{p:.6f}\t{tau:.6f}\t{score:.6f}\t{rank}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    p1 = [float(v) for v in args.p1.split(",")]
    p2 = [float(v) for v in args.p2.split(",")]
    rows = ex.sweep(cfg, p1, p2, args.out)
    for r in rows:
        print(f"{r['p1']},{r['p2']},{r['auc']},{r['full_auc']}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    variants = args.variants.split(",") if args.variants else None
    unknown = [v for v in variants or [] if v not in ex.ABLATIONS]
    if unknown:
        raise ex.ConfigError(f"unknown ablation variants: {unknown}")
    table = ex.ablate(cfg, variants)
    text = json.dumps(table, sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relctr", description="Relevance-aware CTR experiments on a synthetic world.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return sp

    sp = common(sub.add_parser("gen-data", help="generate the synthetic world and logs"))
    sp.add_argument("--out", help="output directory (default: data_dir)")
    sp.set_defaults(fn=cmd_gen_data)

    sp = common(sub.add_parser("pretrain-encoder", help="pretrain the text encoder"))
    sp.add_argument("--out", help="checkpoint path (default: encoder_path)")
    sp.set_defaults(fn=cmd_pretrain)

    sp = common(sub.add_parser("train", help="train the CTR model"))
    sp.set_defaults(fn=cmd_train)

    sp = common(sub.add_parser("eval", help="evaluate a trained model and write a MetricsReport"))
    sp.add_argument("--model", help="model checkpoint (default: output_dir/model.ckpt)")
    sp.add_argument("--out", help="report path (default: next to the checkpoint)")
    sp.add_argument("--base-auc", type=float, default=None, help="AUC of the reference model for RelaImpr")
    sp.set_defaults(fn=cmd_eval)

    sp = common(sub.add_parser("score", help="score a dataset file, one line per candidate"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True, help="dataset file in the gen-data format")
    sp.set_defaults(fn=cmd_score)

    sp = common(sub.add_parser("sweep", help="AUC grid over p1 x p2, as CSV"))
    sp.add_argument("--p1", default="0.1,0.2,0.3,0.4")
    sp.add_argument("--p2", default="0.5,0.6,0.7,0.8")
    sp.add_argument("--out", help="CSV path")
    sp.set_defaults(fn=cmd_sweep)

    sp = common(sub.add_parser("ablate", help="switch each component off in turn"))
    sp.add_argument("--variants", help="comma-separated subset of " + ",".join(ex.ABLATIONS))
    sp.add_argument("--out", help="JSON path")
    sp.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ex.ConfigError, WorldConfigError, DebiasConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UndefinedMetricError as exc:
        print(f"undefined metric: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except (TrainingDivergence, EncoderDivergence) as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except BrokenPipeError:
        # downstream reader (e.g. head) closed early
        sys.stderr.close()
        return 0


if __name__ == "__main__":
    sys.exit(main())
