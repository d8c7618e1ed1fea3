"""
Command-line entry point.

Every subcommand reads the INI config given by ``--config`` (optional),
applies ``--set key=value`` overrides and then its own flags, and writes
artifacts into ``--out`` (default ``run.out``). Failures print one JSON
error record to stderr and exit with

    2  usage (unknown subcommand or flag)
    3  config or contract violation
    4  data or artifact file problem
    5  numeric failure
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import condense as C
from . import costmodel, spectral
from . import tensor as T
from .config import derive_seed, dump_config, load_config
from .data import SyntheticSpec, gen_synthetic, load_dataset, save_dataset
from .errors import ConfigError, ContractError, DimensionError, NumericError, ParseError, PromptLookupError
from .prompts import PromptSet, init_prompts, prompt_forward
from .training import MetricsLog, TrainConfig, attach_head, evaluate, train
from .vit import ViTConfig, ViTParams, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _outdir(cfg: dict) -> Path:
    out = Path(cfg["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def dataset_from_config(cfg: dict):
    """Load ``data.path`` or generate the synthetic task for ``run.seed``."""
    if cfg["data.path"]:
        try:
            return load_dataset(cfg["data.path"], cfg["data.format"], channels=cfg["model.channels"],
                                image_size=cfg["model.image_size"], num_classes=cfg["data.classes"])
        except FileNotFoundError as exc:
            raise ParseError(f"dataset file not found: {exc.filename}") from exc
    spec = SyntheticSpec(
        num_classes=cfg["data.classes"], train_per_class=cfg["data.train_per_class"],
        val_per_class=cfg["data.val_per_class"], test_per_class=cfg["data.test_per_class"],
        image_size=cfg["model.image_size"], channels=cfg["model.channels"], noise=cfg["data.noise"],
        seed=derive_seed(cfg["run.seed"], "data"), family=cfg["data.family"],
    )
    return gen_synthetic(spec)


def _vit_config(cfg: dict) -> ViTConfig:
    return ViTConfig(image_size=cfg["model.image_size"], patch_size=cfg["model.patch_size"],
                     channels=cfg["model.channels"], depth=cfg["model.depth"], dim=cfg["model.dim"],
                     heads=cfg["model.heads"], mlp_ratio=cfg["model.mlp_ratio"], dropout_rate=cfg["model.dropout"])


def _backbone(cfg: dict) -> ViTParams:
    params = bb.load_backbone(cfg["model.backbone"], _vit_config(cfg), cfg["model.backbone_seed"])
    c = params.config
    expect = {"image_size": cfg["model.image_size"], "patch_size": cfg["model.patch_size"],
              "channels": cfg["model.channels"], "depth": cfg["model.depth"], "dim": cfg["model.dim"],
              "heads": cfg["model.heads"], "mlp_ratio": cfg["model.mlp_ratio"]}
    wrong = {k: (v, getattr(c, k)) for k, v in expect.items() if getattr(c, k) != v}
    if wrong:
        raise ConfigError(f"model.* keys disagree with the backbone checkpoint (config, checkpoint): {wrong}")
    return params


def _model(cfg: dict, num_classes: int) -> ViTParams:
    params = attach_head(_backbone(cfg), num_classes)
    return ViTParams(params.config.replace(dropout_rate=cfg["model.dropout"]), params.tensors, params.frozen)


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(lr=cfg["train.lr"], momentum=cfg["train.momentum"], weight_decay=cfg["train.weight_decay"],
                       epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"],
                       seed=derive_seed(cfg["run.seed"], "train"), schedule=cfg["train.schedule"])


def _condense_config(cfg: dict, skip_training: bool = False) -> C.CondenseConfig:
    return C.CondenseConfig(train=_train_config(cfg), k_percent=cfg["condense.k"], method=cfg["condense.method"],
                            finetune_epochs=cfg["condense.finetune_epochs"], variant=cfg["condense.variant"],
                            skip_training=skip_training)


def save_model(path: Path, params: ViTParams, promptset: PromptSet, extra: dict | None = None) -> None:
    arrays, meta = promptset.to_record()
    save_checkpoint(path, params, arrays, {"prompts": meta, **(extra or {})})


def load_model(path) -> tuple[ViTParams, PromptSet]:
    try:
        params, arrays, extra = load_checkpoint(path)
    except FileNotFoundError as exc:
        raise ParseError(f"checkpoint not found: {path}") from exc
    if "prompts" not in extra:
        raise ParseError(f"{path} holds no prompt set")
    params.freeze_backbone()
    return params, PromptSet.from_record(arrays, extra["prompts"])


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ParseError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", exc.pos) from exc


def _save_metrics(out: Path, log: MetricsLog, extra_timing: dict | None = None) -> None:
    _write(out / "metrics.json", log.to_json())
    _write(out / "timing.json", _json({"stage_times": log.stage_times, **(extra_timing or {})}))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg) -> dict:
    ds = dataset_from_config({**cfg, "data.path": ""})
    out = _outdir(cfg)
    path = Path(args.output) if args.output else out / "data.bin"
    save_dataset(ds, path)
    return {"path": str(path), "digest": ds.digest(), "sizes": ds.sizes()}


def cmd_pretrain(args, cfg) -> dict:
    out = _outdir(cfg)
    params, log = bb.pretrain(_vit_config(cfg), cfg["model.pretrain_epochs"], cfg["model.pretrain_lr"],
                              cfg["run.seed"])
    path = Path(args.output) if args.output else out / "backbone.vpt"
    bb.save_backbone(params, path, {"recipe": "source-gratings"})
    _write(out / "pretrain_metrics.json", log.to_json())
    return {"path": str(path), "final_val_acc": log.epochs[-1].get("val_acc") if log.epochs else None}


def cmd_train(args, cfg) -> dict:
    out = _outdir(cfg)
    ds = dataset_from_config(cfg)
    params = _model(cfg, ds.num_classes)
    ps = init_prompts(params.config, cfg["prompts.mode"], cfg["prompts.per_layer"],
                      derive_seed(cfg["run.seed"], "prompts"))
    log = train(params, ps, ds, _train_config(cfg))
    log.layer_counts["trained"] = ps.counts()
    log.results["test_acc"] = evaluate(params, ps, *ds.subset("test"))["acc"]
    save_model(out / "checkpoint.vpt", params, ps)
    _save_metrics(out, log)
    _write(out / "config.ini", dump_config(cfg))
    return {"checkpoint": str(out / "checkpoint.vpt"), "test_acc": log.results["test_acc"]}


def _checkpoint_arg(args, out: Path) -> Path:
    return Path(args.checkpoint) if args.checkpoint else out / "checkpoint.vpt"


def cmd_score(args, cfg) -> dict:
    out = _outdir(cfg)
    params, ps = load_model(_checkpoint_arg(args, out))
    ds = dataset_from_config(cfg)
    t0 = time.perf_counter()
    table = C.score(params, ps, ds, cfg["condense.method"], cfg["condense.variant"], seed=cfg["run.seed"])
    _write(out / "scores.json", table.to_json())
    _write(out / "timing.json", _json({"stage_times": {"score": time.perf_counter() - t0}}))
    return {"scores": str(out / "scores.json"), "count": len(table)}


def cmd_select(args, cfg) -> dict:
    out = _outdir(cfg)
    table = C.ScoreTable.from_dict(_read_json(args.scores or out / "scores.json"))
    plan = C.select(table, cfg["condense.k"], cfg["condense.method"])
    _write(out / "plan.json", plan.to_json())
    return {"plan": str(out / "plan.json"), "kept": len(plan.keep), "kept_per_layer": plan.kept_per_layer()}


def cmd_condense(args, cfg) -> dict:
    out = _outdir(cfg)
    ds = dataset_from_config(cfg)
    t0 = time.perf_counter()
    if args.checkpoint:
        params, ps = load_model(args.checkpoint)
        log = MetricsLog()
        log.results["full_test_acc"] = evaluate(params, ps, *ds.subset("test"))["acc"]
        condensed, log, scores, plan = C.condense(params, ps, ds, _condense_config(cfg, True), log)
    else:
        params = _model(cfg, ds.num_classes)
        ps = init_prompts(params.config, cfg["prompts.mode"], cfg["prompts.per_layer"],
                          derive_seed(cfg["run.seed"], "prompts"))
        log = MetricsLog()
        train(params, ps, ds, _train_config(cfg), log)
        log.results["full_test_acc"] = evaluate(params, ps, *ds.subset("test"))["acc"]
        save_model(out / "checkpoint.vpt", params, ps)
        condensed, log, scores, plan = C.condense(params, ps, ds, _condense_config(cfg, True), log)
    total = time.perf_counter() - t0
    _write(out / "scores.json", scores.to_json())
    _write(out / "plan.json", plan.to_json())
    save_model(out / "condensed.vpt", params, condensed)
    _save_metrics(out, log, {"pipeline_total": total})
    _write(out / "config.ini", dump_config(cfg))
    return {"kept": len(plan.keep), "kept_per_layer": condensed.counts(),
            "full_test_acc": log.results["full_test_acc"], "condensed_test_acc": log.results["condensed_test_acc"]}


def cmd_analyze_rank(args, cfg) -> dict:
    out = _outdir(cfg)
    ds = dataset_from_config(cfg)
    backbone = _backbone(cfg)
    seeds = [derive_seed(cfg["run.seed"], f"rank/{i}") for i in range(cfg["spectral.seeds"])]
    tcfg = TrainConfig(**{**_train_config(cfg).__dict__, "epochs": cfg["spectral.epochs"]})
    report = spectral.rank_growth_experiment(backbone, ds, cfg["spectral.m_list"], cfg["spectral.eps"], seeds,
                                             tcfg, cfg["spectral.samples"])
    _write(out / "rankgrowth.csv", report.to_csv())
    if args.checkpoint:
        params, ps = load_model(args.checkpoint)
    else:
        params, ps = attach_head(backbone, ds.num_classes), None
    images, _ = ds.subset("test")
    with T.no_grad():
        _, tr = prompt_forward(images[:cfg["spectral.samples"]], params, ps, trace=True)
    _write(out / "spectrum.csv", spectral.spectrum_report(tr).to_csv())
    return {"m": report.m_values, "mean_rank": report.mean, "increments": report.increments,
            "concavity": report.concavity()}


def _cost_config(args, cfg) -> costmodel.CostConfig:
    if cfg["cost.preset"] != "custom":
        base = costmodel.preset(cfg["cost.preset"])
    else:
        base = costmodel.from_vit(_backbone(cfg).config) if not args.depth else None
    dims = {k: getattr(args, k) for k in ("depth", "dim", "tokens", "patches", "patch_size", "channels", "mlp_ratio")}
    if base is None:
        missing = [k for k in ("depth", "dim", "tokens", "patches", "patch_size") if dims[k] is None]
        if missing:
            raise ConfigError(f"custom cost preset needs --{', --'.join(m.replace('_', '-') for m in missing)}")
        return costmodel.CostConfig(**{k: v for k, v in dims.items() if v is not None})
    return costmodel.CostConfig(**{**base.__dict__, **{k: v for k, v in dims.items() if v is not None}})


def cmd_cost(args, cfg) -> dict:
    ccfg = _cost_config(args, cfg)
    text = str(cfg["cost.prompts"]).strip()
    try:
        counts = [int(v) for v in text.split(",")] if "," in text else int(text)
    except ValueError:
        raise ConfigError(f"cost.prompts must be an integer or comma-separated integers, got {text!r}") from None
    report = costmodel.cost_report(ccfg, counts, cfg["cost.threshold"])
    out = _outdir(cfg)
    _write(out / "cost.json", report.to_json())
    return report.to_dict()


def cmd_grad_check(args, cfg) -> dict:
    from .gradcheck import run_grad_checks
    results = run_grad_checks(probes=args.probes, seed=cfg["run.seed"])
    out = _outdir(cfg)
    _write(out / "gradcheck.json", _json(results))
    worst = max(r["max_rel_error"] for r in results["checks"])
    if worst >= args.tolerance:
        raise NumericError(f"gradient check failed: max relative error {worst:.3e} >= {args.tolerance:g}")
    return {"max_rel_error": worst, "checks": len(results["checks"])}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

_FLAG_KEYS = {
    "seed": "run.seed", "out": "run.out", "epochs": "train.epochs", "lr": "train.lr",
    "per_layer": "prompts.per_layer", "mode": "prompts.mode", "data": "data.path", "backbone": "model.backbone",
    "k": "condense.k", "method": "condense.method", "finetune_epochs": "condense.finetune_epochs",
    "variant": "condense.variant", "eps": "spectral.eps", "m_list": "spectral.m_list",
    "rank_seeds": "spectral.seeds", "preset": "cost.preset", "prompts": "cost.prompts", "threshold": "cost.threshold",
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--out", help="artifact directory (run.out)")
    common.add_argument("--seed", type=int, help="global seed (run.seed)")

    parser = _Parser(prog="promptcondense", description="Visual prompt condensation experiments.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "write the synthetic dataset to a file")
    p.add_argument("--output", help="file path (.bin or .csv)")

    p = add("pretrain", cmd_pretrain, "pretrain a backbone on the source task")
    p.add_argument("--output", help="checkpoint path")

    def model_flags(p):
        p.add_argument("--data", help="dataset file (data.path)")
        p.add_argument("--backbone", help="backbone checkpoint (model.backbone)")
        p.add_argument("--epochs", type=int, help="training epochs (train.epochs)")
        p.add_argument("--lr", type=float, help="base learning rate (train.lr)")
        p.add_argument("--per-layer", type=int, help="prompts per layer (prompts.per_layer)")
        p.add_argument("--mode", choices=["deep", "shallow"], help="prompt mode (prompts.mode)")

    p = add("train", cmd_train, "prompt-tune a model and save a checkpoint")
    model_flags(p)

    p = add("score", cmd_score, "score every prompt of a trained checkpoint")
    p.add_argument("--checkpoint", help="trained checkpoint (default OUT/checkpoint.vpt)")
    p.add_argument("--data", help="dataset file (data.path)")
    p.add_argument("--method", help="global | local (Taylor) or cls-sim")
    p.add_argument("--variant", help="inner | elementwise")

    p = add("select", cmd_select, "turn a score table into a condensation plan")
    p.add_argument("--scores", help="scores.json (default OUT/scores.json)")
    p.add_argument("--k", type=float, help="percentage kept (condense.k)")
    p.add_argument("--method", help="global | local | cls-sim")

    p = add("condense", cmd_condense, "train, score, select and fine-tune")
    model_flags(p)
    p.add_argument("--checkpoint", help="start from a trained checkpoint instead of training")
    p.add_argument("--k", type=float, help="percentage kept (condense.k)")
    p.add_argument("--method", help="global | local | cls-sim")
    p.add_argument("--finetune-epochs", type=int, help="fine-tuning epochs (condense.finetune_epochs)")
    p.add_argument("--variant", help="inner | elementwise")

    p = add("analyze-rank", cmd_analyze_rank, "effective attention rank against prompt count")
    model_flags(p)
    p.add_argument("--checkpoint", help="checkpoint whose attention spectrum is written to spectrum.csv")
    p.add_argument("--eps", type=float, help="relative Frobenius tolerance (spectral.eps)")
    p.add_argument("--m-list", help="comma-separated prompt counts (spectral.m_list)")
    p.add_argument("--rank-seeds", type=int, help="number of seeds (spectral.seeds)")

    p = add("cost", cmd_cost, "closed-form FLOPs and overhead")
    p.add_argument("--preset", help="vitb16 | toy | custom")
    p.add_argument("--prompts", help="prompts per layer, or comma-separated per-layer counts")
    p.add_argument("--threshold", type=float, help="overhead percentage above which condensation is advised")
    for flag in ("depth", "dim", "tokens", "patches", "patch-size", "channels", "mlp-ratio"):
        p.add_argument(f"--{flag}", type=int)

    p = add("grad-check", cmd_grad_check, "finite-difference check of every differentiable op")
    p.add_argument("--probes", type=int, default=100, help="random probes per check")
    p.add_argument("--tolerance", type=float, default=1e-4, help="maximum relative error")
    return parser


def _resolve(args) -> dict:
    # explicit flags win over --set, which wins over the file
    overrides = list(args.set)
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    cfg = load_config(args.config, overrides)
    if cfg["prompts.mode"] not in ("deep", "shallow"):
        raise ConfigError(f"prompts.mode must be deep or shallow, got {cfg['prompts.mode']!r}")
    if cfg["condense.method"] not in (C.GLOBAL, C.LOCAL, C.CLS_SIM):
        raise ConfigError(f"condense.method must be global, local or cls-sim, got {cfg['condense.method']!r}")
    if cfg["condense.variant"] not in (C.INNER, C.ELEMENTWISE):
        raise ConfigError(f"condense.variant must be inner or elementwise, got {cfg['condense.variant']!r}")
    return cfg


def _error(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _error("usage", str(exc), EXIT_USAGE)
    try:
        cfg = _resolve(args)
        result = args.func(args, cfg)
    except (ConfigError, ContractError, DimensionError, PromptLookupError) as exc:
        return _error(type(exc).__name__, str(exc), EXIT_CONFIG)
    except (ParseError, OSError) as exc:
        return _error(type(exc).__name__, str(exc), EXIT_DATA)
    except (NumericError, FloatingPointError) as exc:
        return _error(type(exc).__name__, str(exc), EXIT_NUMERIC)
    sys.stdout.write(json.dumps(result, sort_keys=True, default=_default) + "\n")
    return EXIT_OK


def _default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


if __name__ == "__main__":
    raise SystemExit(main())
