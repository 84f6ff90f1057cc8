"""Command-line interface for pcrdiff."""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Mapping
from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np

from .ablations import DESK_MODEL, AblationPlan, run_ablations
from .config import RunConfig, load_run_config, require_dataset, resolve_seed
from .datasyn import (
    REGIMES,
    DatasetSpec,
    generate_pairs,
    load_dataset,
    load_xyz,
    save_xyz,
    split_pairs,
    write_dataset,
)
from .diffusion import COSINE_OFFSET, cosine_schedule, schedule_rows
from .evalkit import (
    ICP_RESULTS_COMMENT,
    RESULTS_COMMENT,
    MetricsRecord,
    evaluate,
    evaluate_icp,
    mae_rmse,
    register_pair,
    results_csv,
)
from .exceptions import BadStepCount, ConfigError, IoFailure, PcrdError
from .geom3d import CODECS, apply, save_transforms, transform_to_vec7
from .regnet import (
    FUSION_MODES,
    CFModelConfig,
    ModelConfig,
    build_model,
    load_model,
    model_config_from_dict,
    model_config_to_dict,
)
from .trainer import TrainConfig, check_model_gradients, train_loop

logger = logging.getLogger(__name__)

DESK_MODEL_PAYLOAD = model_config_to_dict(DESK_MODEL)


def _model_config(base: Mapping[str, Any], args: argparse.Namespace) -> ModelConfig:
    payload = dict(base)
    variant = args.variant or payload.get("variant", "cf")
    payload["variant"] = variant
    if args.repr:
        payload["representation"] = args.repr
    if getattr(args, "fusion", None):
        if variant != "cf":
            raise ConfigError("model.fusion", "fusion modes apply to the cf variant only")
        payload["fusion"] = args.fusion
    if getattr(args, "no_diffusion", False):
        payload["diffusion"] = False
    return model_config_from_dict(payload)


def _parse_steps(text: str) -> list[int]:
    try:
        steps = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise BadStepCount(f"cannot parse step list {text!r}") from exc
    if not steps:
        raise BadStepCount("no step counts given")
    return steps


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    try:
        Path(out).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {out}: {exc}") from exc


def _run_generate(args: argparse.Namespace) -> int:
    spec = DatasetSpec(
        regime=args.regime,
        pairs=args.pairs,
        points=args.points,
        rot_max_deg=args.rot_max,
        trans_max=args.trans_max,
        seed=resolve_seed(args.seed),
        split=args.split,
        sigma=args.sigma,
        clip=args.clip,
        keep=args.keep,
    )
    pairs = write_dataset(args.out, spec, jobs=args.jobs)
    print(f"wrote {len(pairs)} pairs ({spec.regime}) to {args.out}")
    return 0


def _run_train(args: argparse.Namespace) -> int:
    run = load_run_config(args.config) if args.config else RunConfig()
    data = require_dataset(Path(args.data) if args.data else run.data)
    out = Path(args.out) if args.out else run.out
    if out is None:
        raise ConfigError("out", "no output directory given")
    overrides: dict[str, Any] = {"seed": resolve_seed(args.seed, run.seed)}
    for key in ("epochs", "batch_size", "lr", "T"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    train_cfg = replace(run.train, **overrides)
    model_cfg = _model_config(run.model, args)
    logger.info("training %s model: %s", model_cfg.variant, model_cfg)

    train_set, validation = split_pairs(load_dataset(data), run.validation)
    model = build_model(
        model_cfg,
        train_cfg.T,
        np.random.default_rng(train_cfg.seed),
        schedule_offset=run.schedule.offset,
    )
    result = train_loop(
        model,
        train_set,
        model.schedule(),
        train_cfg,
        out,
        validation=validation or None,
        resume=args.resume,
    )
    print(
        f"trained {result.steps} steps over {result.epochs} epochs; "
        f"best loss {result.best_metric:.6g}; checkpoint {out / 'last.pcrd'}"
    )
    return 0


def _run_register(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    source = load_xyz(args.src)
    template = load_xyz(args.tpl)
    rng = np.random.default_rng(resolve_seed(args.seed))
    estimate = register_pair(model, model.schedule(), source, template, args.steps, rng)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    save_transforms(out / "transform.txt", [estimate])
    save_xyz(apply(estimate, source), out / "aligned.xyz")
    print(" ".join(repr(float(v)) for v in transform_to_vec7(estimate)))
    return 0


def _run_eval(args: argparse.Namespace) -> int:
    pairs = load_dataset(require_dataset(Path(args.data)))
    seed = resolve_seed(args.seed)
    timing = not args.no_timing
    records: list[MetricsRecord] = []
    summaries: list[MetricsRecord] = []
    comment = RESULTS_COMMENT
    if args.method == "icp":
        comment = ICP_RESULTS_COMMENT
        records = evaluate_icp(pairs, max_iters=args.icp_iters, jobs=args.jobs, timing=timing)
        if records:
            summaries.append(mae_rmse(records))
    else:
        if not args.model:
            raise ConfigError("model", "--model is required unless --method icp")
        model = load_model(args.model)
        sched = model.schedule()
        for steps in _parse_steps(args.steps):
            batch = evaluate(model, pairs, sched, steps, seed=seed, jobs=args.jobs, timing=timing)
            records.extend(batch)
            if batch:
                summaries.append(mae_rmse(batch))
    _emit(results_csv(records, summaries, comment=comment), args.out)
    for summary in summaries:
        logger.info(
            "steps=%d MIE(R)=%.4f MIE(t)=%.4f MAE(R)=%.4f",
            summary.steps,
            summary.mie_r_deg,
            summary.mie_t,
            summary.mae_r_deg,
        )
    return 0


def _run_schedule_dump(args: argparse.Namespace) -> int:
    sched = cosine_schedule(args.T, args.offset)
    lines = ["t,beta,alpha_bar,posterior_var"]
    lines += [f"{t},{beta!r},{abar!r},{var!r}" for t, beta, abar, var in schedule_rows(sched)]
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def _run_grad_check(args: argparse.Namespace) -> int:
    seed = resolve_seed(args.seed)
    if args.model:
        model = load_model(args.model)
    else:
        run = load_run_config(args.config) if args.config else RunConfig()
        model = build_model(_model_config(run.model, args), args.T, np.random.default_rng(seed))
    pairs = generate_pairs(DatasetSpec(pairs=args.pairs, points=args.points, seed=seed))
    result = check_model_gradients(
        model,
        pairs,
        model.schedule(),
        TrainConfig(T=model.T, seed=seed),
        np.random.default_rng(seed),
        sample_size=args.samples,
    )
    status = "ok" if result.max_rel_error <= args.threshold else "FAILED"
    print(
        f"{status}: max relative error {result.max_rel_error:.3e} over {result.checked} entries "
        f"({result.skipped} skipped at kinks, worst {result.worst_parameter})"
    )
    return 0 if status == "ok" else 1


def _run_ablate(args: argparse.Namespace) -> int:
    run = load_run_config(args.config) if args.config else RunConfig()
    model_cfg = model_config_from_dict({**DESK_MODEL_PAYLOAD, **run.model})
    if not isinstance(model_cfg, CFModelConfig):
        raise ConfigError("model.variant", "ablations train the cf variant only")
    overrides: dict[str, Any] = {"seed": resolve_seed(args.seed, run.seed), "model": model_cfg}
    for key in ("train_pairs", "test_pairs", "points", "max_steps", "batch_size", "T", "lr"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    plan = replace(AblationPlan(jobs=args.jobs), **overrides)
    report = run_ablations(plan, args.out)
    for (name, steps), summary in report.summaries.items():
        print(
            f"{name:>12} steps={steps}: MIE(R) {summary.mie_r_deg:.3f} deg, "
            f"MIE(t) {summary.mie_t:.4f}, MAE(R) {summary.mae_r_deg:.3f} deg"
        )
    for check in report.checks:
        print(f"{'PASS' if check.passed else 'FAIL'} {check.name}: {check.detail}")
    return 0 if report.passed else 1


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML run configuration.")
    parser.add_argument("--variant", choices=("cf", "cb"), help="Network head.")
    parser.add_argument("--repr", choices=sorted(CODECS), help="Diffusion vector representation.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcrdiff")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="More logging.")
    subparsers = parser.add_subparsers(dest="command_name", required=True)

    gen = subparsers.add_parser("generate", help="Write a synthetic registration dataset")
    gen.add_argument("--regime", choices=REGIMES, default="clean")
    gen.add_argument("--pairs", type=int, default=100)
    gen.add_argument("--points", type=int, default=128)
    gen.add_argument("--rot-max", type=float, default=45.0, help="Max Euler angle in degrees.")
    gen.add_argument("--trans-max", type=float, default=1.0)
    gen.add_argument("--split", choices=("train", "test"), default="train")
    gen.add_argument("--sigma", type=float, default=0.01)
    gen.add_argument("--clip", type=float, default=0.05)
    gen.add_argument("--keep", type=float, default=0.7)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--jobs", type=int, default=1)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_run_generate)

    train = subparsers.add_parser("train", help="Train a denoising registration network")
    _add_model_flags(train)
    train.add_argument("--data", help="Dataset directory written by 'generate'.")
    train.add_argument("--fusion", choices=FUSION_MODES)
    train.add_argument("--no-diffusion", action="store_true", help="Feed zeros for F_t.")
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--T", type=int, help="Number of diffusion steps.")
    train.add_argument("--seed", type=int)
    train.add_argument("--resume", action="store_true")
    train.add_argument("--out")
    train.set_defaults(func=_run_train)

    reg = subparsers.add_parser("register", help="Align one source cloud to a template")
    reg.add_argument("--model", required=True)
    reg.add_argument("--src", required=True)
    reg.add_argument("--tpl", required=True)
    reg.add_argument("--steps", type=int, default=1)
    reg.add_argument("--seed", type=int)
    reg.add_argument("--out", default=".")
    reg.set_defaults(func=_run_register)

    ev = subparsers.add_parser("eval", help="Evaluate a checkpoint or ICP on a dataset")
    ev.add_argument("--model")
    ev.add_argument("--method", choices=("model", "icp"), default="model")
    ev.add_argument("--data", required=True)
    ev.add_argument("--steps", default="1", help="Comma-separated sampling step counts.")
    ev.add_argument("--icp-iters", type=int, default=10)
    ev.add_argument("--seed", type=int)
    ev.add_argument("--jobs", type=int, default=1)
    ev.add_argument("--no-timing", action="store_true", help="Write 0 for time_s.")
    ev.add_argument("--out")
    ev.set_defaults(func=_run_eval)

    dump = subparsers.add_parser("schedule-dump", help="Print the cosine noise schedule")
    dump.add_argument("--T", type=int, default=1000)
    dump.add_argument("--offset", type=float, default=COSINE_OFFSET)
    dump.add_argument("--out")
    dump.set_defaults(func=_run_schedule_dump)

    grad = subparsers.add_parser("grad-check", help="Finite-difference check of the training loss")
    _add_model_flags(grad)
    grad.add_argument("--model", help="Check a saved checkpoint instead of a fresh network.")
    grad.add_argument("--fusion", choices=FUSION_MODES)
    grad.add_argument("--no-diffusion", action="store_true")
    grad.add_argument("--T", type=int, default=1000)
    grad.add_argument("--points", type=int, default=16)
    grad.add_argument("--pairs", type=int, default=1)
    grad.add_argument("--samples", type=int, default=2000, help="Parameter entries to check.")
    grad.add_argument("--threshold", type=float, default=1e-4)
    grad.add_argument("--seed", type=int)
    grad.set_defaults(func=_run_grad_check)

    abl = subparsers.add_parser("ablate", help="Train and compare the cf ablation variants")
    abl.add_argument("--config", help="TOML run configuration; only [model] and seed are read.")
    abl.add_argument("--train-pairs", type=int)
    abl.add_argument("--test-pairs", type=int)
    abl.add_argument("--points", type=int)
    abl.add_argument("--max-steps", type=int, help="Optimizer-step budget per variant.")
    abl.add_argument("--batch-size", type=int)
    abl.add_argument("--T", type=int)
    abl.add_argument("--lr", type=float)
    abl.add_argument("--seed", type=int)
    abl.add_argument("--jobs", type=int, default=1)
    abl.add_argument("--out", required=True)
    abl.set_defaults(func=_run_ablate)
    return parser


def main(argv: list[str] | None = None) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        exit_code = args.func(args)
    except PcrdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        exit_code = exc.exit_code
    raise SystemExit(exit_code)


__all__ = ["main", "build_parser"]
