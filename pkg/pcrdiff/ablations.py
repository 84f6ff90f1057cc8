"""Desk-scale ablation study: train the correspondence-free variants on one split and compare.

Every variant is trained and evaluated from the same data and seed. The aggregate rows
feed a fixed list of acceptance checks.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .datasyn import DatasetSpec, RegPair, write_dataset
from .evalkit import MetricsRecord, evaluate, mae_rmse, write_results
from .exceptions import ConfigError, IoFailure
from .regnet import CFModelConfig, RegistrationModel, build_model
from .trainer import TrainConfig, train_loop

logger = logging.getLogger(__name__)

DESK_MODEL = CFModelConfig(
    encoder_widths=(64, 64, 128, 256),
    transform_hidden=64,
    embed_dim=64,
    decoder_widths=(256, 128),
)
ABLATIONS: dict[str, dict[str, Any]] = {
    "quat7": {},
    "euler6": {"representation": "euler6"},
    "no-diffusion": {"diffusion": False},
}
SUMMARY_HEADER = ("variant", "steps", "mie_r_deg", "mie_t", "mae_r_deg", "mae_t")
CHECKS_HEADER = ("check", "passed", "detail")


@dataclass(frozen=True)
class AblationPlan:
    train_pairs: int = 500
    test_pairs: int = 100
    points: int = 128
    max_steps: int = 3000
    batch_size: int = 32
    T: int = 1000
    lr: float = 1e-4
    seed: int = 0
    jobs: int = 1
    model: CFModelConfig = DESK_MODEL

    def __post_init__(self) -> None:
        for key in ("train_pairs", "test_pairs", "points", "max_steps", "batch_size", "T", "jobs"):
            if getattr(self, key) < 1:
                raise ConfigError(f"ablate.{key}", f"must be positive, got {getattr(self, key)}")

    @property
    def epochs(self) -> int:
        """Whole epochs that fit in the optimizer-step budget (at least one)."""
        per_epoch = math.ceil(self.train_pairs / self.batch_size)
        return max(1, self.max_steps // per_epoch)


@dataclass(frozen=True)
class AcceptanceCheck:
    name: str
    passed: bool
    detail: str


@dataclass
class AblationReport:
    summaries: dict[tuple[str, int], MetricsRecord] = field(default_factory=dict)
    checks: list[AcceptanceCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)


def acceptance_checks(summaries: Mapping[tuple[str, int], MetricsRecord]) -> list[AcceptanceCheck]:
    """Compare aggregate rows keyed by (variant, sampling steps)."""
    try:
        quat = summaries[("quat7", 1)]
        quat_many = summaries[("quat7", 8)]
        euler = summaries[("euler6", 1)]
        plain = summaries[("no-diffusion", 1)]
        untrained = summaries[("untrained", 1)]
    except KeyError as exc:
        raise ConfigError("ablate", f"no summary for {exc}") from exc
    drift = abs(quat.mae_r_deg - quat_many.mae_r_deg)
    return [
        AcceptanceCheck(
            "trained_accuracy",
            quat.mie_r_deg < 10.0 and quat.mie_t < 0.10,
            f"MIE(R) {quat.mie_r_deg:.3f} deg (< 10), MIE(t) {quat.mie_t:.4f} (< 0.10)",
        ),
        AcceptanceCheck(
            "beats_untrained",
            untrained.mie_r_deg >= 5.0 * quat.mie_r_deg,
            f"untrained MIE(R) {untrained.mie_r_deg:.3f} vs trained {quat.mie_r_deg:.3f} (>= 5x)",
        ),
        AcceptanceCheck(
            "step_stability",
            drift <= 0.2 * quat.mae_r_deg,
            f"MAE(R) 1 step {quat.mae_r_deg:.3f}, 8 steps {quat_many.mae_r_deg:.3f} (<= 20%)",
        ),
        AcceptanceCheck(
            "diffusion_helps",
            plain.mie_r_deg > quat.mie_r_deg,
            f"no-diffusion MIE(R) {plain.mie_r_deg:.3f} vs {quat.mie_r_deg:.3f}",
        ),
        AcceptanceCheck(
            "quaternion_not_worse",
            euler.mie_r_deg >= quat.mie_r_deg,
            f"euler6 MIE(R) {euler.mie_r_deg:.3f} vs quat7 {quat.mie_r_deg:.3f}",
        ),
    ]


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[object]]) -> None:
    try:
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _score(
    name: str,
    model: RegistrationModel,
    test_set: Sequence[RegPair],
    sweep: Sequence[int],
    plan: AblationPlan,
    results_dir: Path,
    report: AblationReport,
) -> None:
    records: list[MetricsRecord] = []
    summaries: list[MetricsRecord] = []
    for steps in sweep:
        batch = evaluate(
            model, test_set, model.schedule(), steps, seed=plan.seed, jobs=plan.jobs, timing=False
        )
        records.extend(batch)
        summary = mae_rmse(batch)
        summaries.append(summary)
        report.summaries[(name, steps)] = summary
        logger.info(
            "%s at %d steps: MIE(R) %.3f deg, MIE(t) %.4f",
            name,
            steps,
            summary.mie_r_deg,
            summary.mie_t,
        )
    write_results(results_dir / f"{name}.csv", records, summaries)


def run_ablations(
    plan: AblationPlan,
    out_dir: str | Path,
    *,
    variants: Mapping[str, Mapping[str, Any]] = ABLATIONS,
) -> AblationReport:
    """Generate data, train each variant, evaluate, and write the tables under ``out_dir``.

    Layout: ``data/{train,test}``, ``runs/<variant>``, ``results/<variant>.csv``,
    ``ablations.csv`` (one row per variant and step count) and ``acceptance.csv``.
    """
    out = Path(out_dir)
    results_dir = out / "results"
    try:
        results_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create output directory {out}: {exc}") from exc
    train_set = write_dataset(
        out / "data" / "train",
        DatasetSpec(pairs=plan.train_pairs, points=plan.points, seed=plan.seed),
        jobs=plan.jobs,
    )
    test_set = write_dataset(
        out / "data" / "test",
        DatasetSpec(pairs=plan.test_pairs, points=plan.points, seed=plan.seed + 1, split="test"),
        jobs=plan.jobs,
    )
    train_cfg = TrainConfig(
        epochs=plan.epochs, batch_size=plan.batch_size, lr=plan.lr, T=plan.T, seed=plan.seed
    )
    report = AblationReport()

    untrained = build_model(plan.model, plan.T, np.random.default_rng(plan.seed))
    _score("untrained", untrained, test_set, (1,), plan, results_dir, report)
    for name, overrides in variants.items():
        config = replace(plan.model, **overrides)
        model = build_model(config, plan.T, np.random.default_rng(plan.seed))
        logger.info("training %s for %d epochs", name, plan.epochs)
        result = train_loop(model, train_set, model.schedule(), train_cfg, out / "runs" / name)
        logger.info("%s: %d steps, best epoch loss %.6g", name, result.steps, result.best_metric)
        sweep = (1, 8) if name == "quat7" else (1,)
        _score(name, model, test_set, sweep, plan, results_dir, report)

    report.checks = acceptance_checks(report.summaries)
    _write_csv(
        out / "ablations.csv",
        SUMMARY_HEADER,
        [
            (name, steps, s.mie_r_deg, s.mie_t, s.mae_r_deg, s.mae_t)
            for (name, steps), s in report.summaries.items()
        ],
    )
    _write_csv(
        out / "acceptance.csv",
        CHECKS_HEADER,
        [(check.name, check.passed, check.detail) for check in report.checks],
    )
    for check in report.checks:
        log = logger.info if check.passed else logger.warning
        log("%s %s: %s", "PASS" if check.passed else "FAIL", check.name, check.detail)
    return report


__all__ = [
    "DESK_MODEL",
    "ABLATIONS",
    "AblationPlan",
    "AcceptanceCheck",
    "AblationReport",
    "acceptance_checks",
    "run_ablations",
]
