"""Training loop, run logging and the loss-ablation runner."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .autodiff import backward
from .data import Batch, Dataset, collate, make_batches
from .evaluation import MetricsBundle, compute_metrics, evaluate, fusion_vectors, geometry_score, predictions
from .exceptions import ConfigError, EmptyPositiveError, NonFiniteLossError
from .losses import LossConfig, mae_loss, pair_label, suparc_loss, total_loss, triplet_modalities_loss
from .model import EncoderConfig, FusionModel, init_params, save_checkpoint
from .optim import AdamW, clip_grad_norm, global_grad_norm

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 12
    batch_size: int = 32
    seed: int = 42
    loss: LossConfig = field(default_factory=LossConfig)
    weight_decay: float = 0.01
    grad_clip_norm: float = 5.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(
                f"batch_size must be >= 2 (contrastive losses need pairs), got {self.batch_size}"
            )
        if self.weight_decay < 0 or self.grad_clip_norm < 0:
            raise ConfigError("weight_decay and grad_clip_norm must be >= 0")

    def to_flat_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "loss"}
        out.update(asdict(self.loss))
        return out

    @classmethod
    def from_flat_dict(cls, raw: dict) -> "TrainConfig":
        """Build from a flat mapping of TrainConfig and LossConfig field names."""
        train_keys = {f.name for f in fields(cls)} - {"loss"}
        loss_keys = {f.name for f in fields(LossConfig)}
        unknown = set(raw) - train_keys - loss_keys
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            loss = LossConfig(**{k: float(v) for k, v in raw.items() if k in loss_keys})
            kwargs = {}
            for k, v in raw.items():
                if k in ("epochs", "batch_size", "seed"):
                    if isinstance(v, float) and not v.is_integer():
                        raise ConfigError(f"{k} must be an integer, got {v}")
                    kwargs[k] = int(v)
                elif k in train_keys:
                    kwargs[k] = float(v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(loss=loss, **kwargs)

    def with_weights(self, alpha: float | None = None, beta: float | None = None) -> "TrainConfig":
        loss = self.loss
        if alpha is not None:
            loss = replace(loss, alpha=alpha)
        if beta is not None:
            loss = replace(loss, beta=beta)
        return replace(self, loss=loss)


def load_config_file(path) -> dict:
    """Read a flat JSON object of config keys."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc.msg})") from None
    if not isinstance(raw, dict) or any(isinstance(v, (dict, list)) for v in raw.values()):
        raise ConfigError(f"{path}: expected a flat key-value object")
    return raw


@dataclass
class StepResult:
    main: float
    suparc: float
    tri: float
    total: float
    grad_norm: float
    clipped_norm: float
    suparc_skipped: bool = False


@dataclass
class EpochReport:
    epoch: int
    main: float
    suparc: float
    tri: float
    total: float
    valid: MetricsBundle | None
    steps: int
    skipped_suparc: int = 0
    seconds: float = field(default=0.0, compare=False)

    def to_log_dict(self) -> dict:
        """Deterministic fields only; wall-clock time is logged separately."""
        out = asdict(self)
        out.pop("seconds")
        return out


def _finite(component: str, value) -> float:
    v = float(value.item() if hasattr(value, "item") else value)
    if not math.isfinite(v):
        raise NonFiniteLossError(component, v)
    return v


def compute_losses(model: FusionModel, batch: Batch, loss_cfg: LossConfig):
    """Forward pass and all objective terms for one collated batch.

    Returns ``(total, parts)`` where ``parts`` holds float values and a
    ``suparc_skipped`` flag. Masked fusions are only built when beta > 0 and
    pair labels only when alpha > 0.
    """
    out = model.forward(batch, with_masks=loss_cfg.beta > 0)
    main = mae_loss(out["y_hat"], batch.y)
    suparc, tri, skipped = 0.0, 0.0, False
    if loss_cfg.alpha > 0:
        pairs = pair_label(batch.y, loss_cfg.threshold_TH)
        try:
            suparc = suparc_loss(out["h"], batch.y, pairs, loss_cfg.tau, loss_cfg.margin_m)
        except EmptyPositiveError:
            skipped = True
            logger.info("no positive pair in batch; contrastive term skipped")
    if loss_cfg.beta > 0:
        tri = triplet_modalities_loss(out["h"], out["singles"], out["doubles"], loss_cfg.m_tri)
    parts = {
        "main": _finite("main", main),
        "suparc": _finite("suparc", suparc),
        "tri": _finite("tri", tri),
        "suparc_skipped": skipped,
    }
    total = total_loss(main, suparc, tri, loss_cfg.alpha, loss_cfg.beta)
    parts["total"] = _finite("total", total)
    return total, parts


def train_step(model: FusionModel, batch, config: TrainConfig, optimizer: AdamW) -> StepResult:
    """One AdamW update on one batch (a list of utterances or a collated Batch)."""
    if not isinstance(batch, Batch):
        if len(batch) < 2:
            raise ConfigError("a training batch needs at least 2 utterances")
        batch = collate(batch, model.config.text_mode)
    if len(batch) < 2:
        raise ConfigError("a training batch needs at least 2 utterances")
    optimizer.zero_grad()
    total, parts = compute_losses(model, batch, config.loss)
    backward(total)
    params = model.parameters()
    norm = clip_grad_norm(params, config.grad_clip_norm)
    clipped = global_grad_norm(params)
    if not math.isfinite(norm):
        raise NonFiniteLossError("gradient", norm)
    optimizer.step()
    return StepResult(
        main=parts["main"],
        suparc=parts["suparc"],
        tri=parts["tri"],
        total=parts["total"],
        grad_norm=norm,
        clipped_norm=clipped,
        suparc_skipped=parts["suparc_skipped"],
    )


def make_optimizer(model: FusionModel, config: TrainConfig) -> AdamW:
    return AdamW(model.named_parameters(), lr=config.lr, weight_decay=config.weight_decay)


@dataclass
class FitResult:
    model: FusionModel
    reports: list[EpochReport]
    best_epoch: int
    best_valid_mae: float


def fit(model: FusionModel, datasets: dict[str, Dataset], config: TrainConfig,
        run_dir=None, save_best: bool = True) -> FitResult:
    """Train for ``config.epochs``; keep the parameters with the best validation MAE.

    ``model`` is updated in place; the returned model is a separate copy
    holding the best-validation parameters. With ``run_dir`` set, epoch
    reports are appended to ``run.jsonl`` and the best model is written to
    ``checkpoint.json``.
    """
    train = datasets["train"]
    valid = datasets.get("valid")
    optimizer = make_optimizer(model, config)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "run.jsonl").write_text("")
        (run_dir / "timings.jsonl").write_text("")

    reports = []
    best_state, best_epoch, best_mae = model.state_dict(), 0, math.inf
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        sums = {"main": 0.0, "suparc": 0.0, "tri": 0.0, "total": 0.0}
        skipped = 0
        batches = make_batches(train, config.batch_size, config.seed, epoch)
        for utterances in batches:
            result = train_step(model, utterances, config, optimizer)
            for key in sums:
                sums[key] += getattr(result, key)
            skipped += int(result.suparc_skipped)
        steps = max(len(batches), 1)
        metrics = evaluate(model, valid) if valid is not None and len(valid) else None
        report = EpochReport(
            epoch=epoch,
            main=sums["main"] / steps,
            suparc=sums["suparc"] / steps,
            tri=sums["tri"] / steps,
            total=sums["total"] / steps,
            valid=metrics,
            steps=len(batches),
            skipped_suparc=skipped,
            seconds=time.perf_counter() - started,
        )
        reports.append(report)
        logger.info("epoch %d: total=%.4f main=%.4f valid_mae=%s", epoch, report.total, report.main,
                    None if metrics is None else f"{metrics.mae:.4f}")
        score = metrics.mae if metrics is not None else report.main
        if score < best_mae:
            best_state, best_epoch, best_mae = model.state_dict(), epoch, score
        if run_dir is not None:
            with (run_dir / "run.jsonl").open("a") as fh:
                fh.write(json.dumps(report.to_log_dict()) + "\n")
            with (run_dir / "timings.jsonl").open("a") as fh:
                fh.write(json.dumps({"epoch": epoch, "seconds": report.seconds}) + "\n")

    best = model.copy()
    best.load_state_dict(best_state)
    if run_dir is not None and save_best:
        save_checkpoint(run_dir / "checkpoint.json", best,
                        metadata={"best_epoch": best_epoch, "config": config.to_flat_dict()})
    return FitResult(best, reports, best_epoch, best_mae)


# ----------------------------------------------------------------- ablation

ABLATION_ROWS = {
    "full": (None, None),
    "no-suparc": (0.0, None),
    "no-tri": (None, 0.0),
    "neither": (0.0, 0.0),
}


@dataclass
class AblationRow:
    name: str
    alpha: float
    beta: float
    metrics: MetricsBundle
    geometry: float
    best_epoch: int
    result: FitResult | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "alpha": self.alpha,
            "beta": self.beta,
            "best_epoch": self.best_epoch,
            "geometry_score": self.geometry,
            **self.metrics.to_dict(),
        }


def ablate(base_config: TrainConfig, datasets: dict[str, Dataset], encoder_config: EncoderConfig | None = None,
           out_dir=None, eval_split: str = "test") -> list[AblationRow]:
    """Train the full model and the three reduced objectives from the same seed."""
    if encoder_config is None:
        encoder_config = EncoderConfig.from_header(datasets["train"].header)
    evaluation_set = datasets[eval_split]
    out_dir = Path(out_dir) if out_dir is not None else None
    rows = []
    for name, (alpha, beta) in ABLATION_ROWS.items():
        config = base_config.with_weights(alpha, beta)
        model = init_params(encoder_config, config.seed)
        run_dir = out_dir / name if out_dir is not None else None
        result = fit(model, datasets, config, run_dir=run_dir)
        metrics = compute_metrics(predictions(result.model, evaluation_set), evaluation_set.labels)
        geometry = geometry_score(fusion_vectors(result.model, evaluation_set), evaluation_set.labels).score
        rows.append(AblationRow(name, config.loss.alpha, config.loss.beta, metrics, geometry,
                                result.best_epoch, result))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.json").write_text(json.dumps([r.to_dict() for r in rows], indent=2) + "\n")
        (out_dir / "ablation.txt").write_text(format_ablation_table(rows))
    return rows


def format_ablation_table(rows: list[AblationRow]) -> str:
    header = ["Model", "MAE", "F1", "Corr", "Acc-7", "Acc-2", "Geom"]
    body = []
    for r in rows:
        m = r.metrics
        body.append([
            r.name,
            f"{m.mae:.3f}",
            f"{100 * m.f1_nonneg:.2f}/{100 * m.f1_pos:.2f}",
            f"{m.corr:.3f}",
            f"{100 * m.acc7:.2f}",
            f"{100 * m.acc2_nonneg:.2f}/{100 * m.acc2_pos:.2f}",
            f"{r.geometry:.4f}",
        ])
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in [header] + body]
    return "\n".join(lines) + "\n"


def untrained_metrics(encoder_config: EncoderConfig, seed: int, dataset: Dataset) -> MetricsBundle:
    return evaluate(init_params(encoder_config, seed), dataset)


__all__ = [
    "TrainConfig",
    "StepResult",
    "EpochReport",
    "FitResult",
    "AblationRow",
    "ABLATION_ROWS",
    "load_config_file",
    "compute_losses",
    "train_step",
    "make_optimizer",
    "fit",
    "ablate",
    "format_ablation_table",
    "untrained_metrics",
]
