"""Joint supervised + consistency training.

Each optimiser step draws one labeled SIM batch and, outside the supervised
baseline, one unlabeled REAL batch:

* SIM images get a geometric augmentation followed by a perturbation of the
  configured scheme, and contribute the supervised loss.
* REAL images get a geometric augmentation to form ``x``; an independent
  perturbation of ``x`` forms ``x_t``. The consistency loss compares the
  model's predictions on the two.

The objective is ``L_sl + alpha(step) * L_cl + (weight_decay / 2) * ||theta||^2``.
Every random choice is drawn from a stream derived from the run seed and the
step index, so a run is reproducible bit for bit.
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import perturb
from .errors import DataError, NumericError, ParameterError
from .evaluation import batch_dice, mean_std, predict_masks
from .losses import (
    AlphaKind,
    AlphaSchedule,
    ConsistencyKind,
    LossConfig,
    alpha,
    ce_jaccard_loss,
    consistency_loss,
)
from .perturb import Scheme
from .segmodel import ModelConfig, build_model, images_to_tensor, probs_from_logits, save_checkpoint
from .synthdata import REAL_L, REAL_UL, SIM, DatasetReader

log = logging.getLogger(__name__)

# stream tags for SeedSequence-derived randomness
_SIM_ORDER, _SIM_AUG, _REAL_ORDER, _REAL_AUG = 1, 2, 3, 4


class Mode(str, enum.Enum):
    SUPERVISED_BASELINE = "SUPERVISED_BASELINE"
    PI_MODEL = "PI_MODEL"
    SCL = "SCL"


@dataclass(frozen=True)
class AlphaConfig:
    """Schedule shape; the step count is fixed by the trainer."""

    kind: AlphaKind = AlphaKind.TEMPORAL_LINEAR
    value: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", AlphaKind(self.kind))


@dataclass(frozen=True)
class TrainConfig:
    mode: Mode = Mode.SCL
    batch_size: int = 8
    real_batch_size: int | None = None  # None: same as batch_size
    epochs: int = 50
    lr: float = 1e-3
    optimizer: str = "adam"
    weight_decay: float = 1e-6
    scheme: Scheme = Scheme.STRONG
    geom_aug: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    alpha: AlphaConfig = field(default_factory=AlphaConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_every: int = 1  # epochs between REAL_L evaluations; 0 = final epoch only

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("mode", Mode(self.mode))
        set_("scheme", Scheme(self.scheme))
        for name, cls in (("loss", LossConfig), ("alpha", AlphaConfig), ("model", ModelConfig)):
            v = getattr(self, name)
            if isinstance(v, dict):
                set_(name, cls(**v))
        set_("seeds", tuple(int(s) for s in self.seeds))
        # the mode picks the consistency distance
        if self.mode is Mode.PI_MODEL and self.loss.kind is not ConsistencyKind.MSE:
            set_("loss", replace(self.loss, kind=ConsistencyKind.MSE))
        if self.mode is Mode.SCL and self.loss.kind is not ConsistencyKind.SCL:
            set_("loss", replace(self.loss, kind=ConsistencyKind.SCL))
        if self.batch_size < 1 or (self.real_batch_size is not None and self.real_batch_size < 1):
            raise ParameterError("batch sizes must be >= 1")
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.weight_decay < 0 or self.lr <= 0:
            raise ParameterError("need weight_decay >= 0 and lr > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")
        if not self.seeds:
            raise ParameterError("at least one seed is required")

    @property
    def uses_real(self) -> bool:
        return self.mode is not Mode.SUPERVISED_BASELINE

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=_enum_value))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def run_key(self) -> str:
        """Hash of everything that affects a single run except the seed list."""
        d = self.to_dict()
        d.pop("seeds")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _enum_value(o):
    if isinstance(o, enum.Enum):
        return o.value
    raise TypeError(type(o))


@dataclass
class RunMetrics:
    seed: int
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    final_test_dice: float | None = None
    checkpoint: str | None = None
    checkpoint_sha256: str | None = None


@dataclass
class TrainResult:
    model: torch.nn.Module
    metrics: RunMetrics


def _seeds(*key: int, n: int = 2) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(list(key)).generate_state(n, np.uint64)]


def _augment(img, mask, cfg: TrainConfig, key: tuple[int, ...]):
    """Geometric aug (optional), then a perturbation draw.

    Returns ``(x, x_t, mask)`` where ``x`` is the geometrically augmented image
    and ``x_t`` its perturbed copy.
    """
    g_seed, p_seed = _seeds(*key)
    if cfg.geom_aug:
        img, mask = perturb.apply_geom(perturb.draw_geom(g_seed), img, mask)
    pspec = perturb.draw_perturbation(cfg.scheme, p_seed)
    return img, perturb.apply(pspec, img), mask


class _RealStream:
    """Endless REAL_UL index stream; a fresh seeded permutation per pass."""

    def __init__(self, n: int, seed: int):
        self.n, self.seed, self.cycle, self.buf = n, seed, 0, []

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if not self.buf:
                rng = np.random.default_rng(np.random.SeedSequence([self.seed, _REAL_ORDER, self.cycle]))
                self.buf = list(rng.permutation(self.n))
                self.cycle += 1
            out.append(int(self.buf.pop(0)))
        return out


def weight_decay_term(model: torch.nn.Module, weight_decay: float) -> torch.Tensor:
    """``(weight_decay / 2) * ||theta||^2``; its gradient is ``weight_decay * theta``."""
    return 0.5 * weight_decay * sum((p * p).sum() for p in model.parameters())


def _make_optimizer(cfg: TrainConfig, model):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.lr)
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=0.9)


def schedule_for(cfg: TrainConfig, n_sim: int) -> AlphaSchedule:
    """Alpha schedule spanning all optimiser steps of a run: 0 at the first, 1 at the last."""
    n_steps = cfg.epochs * math.ceil(n_sim / cfg.batch_size)
    return AlphaSchedule(cfg.alpha.kind, cfg.alpha.value, total_steps=max(n_steps - 1, 1))


def _dump(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True)


def train(
    cfg: TrainConfig,
    reader: DatasetReader,
    seed: int,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Train one model; optionally write ``model.ckpt`` and ``metrics.jsonl`` to ``out_dir``."""
    torch.use_deterministic_algorithms(True)
    sim_items = reader.items(SIM)
    if not sim_items:
        raise DataError("SIM split is empty")
    sim_x = reader.load_images(sim_items)
    sim_y = reader.load_masks(sim_items)
    real_x = None
    if cfg.uses_real:
        real_items = reader.items(REAL_UL)
        if not real_items:
            raise DataError("REAL_UL split is empty")
        real_x = reader.load_images(real_items)  # images only; masks stay unread
    test_items = reader.items(REAL_L)
    test_x = reader.load_images(test_items) if test_items else None
    test_y = reader.load_masks(test_items) if test_items else None

    model = build_model(replace(cfg.model, init_seed=seed))
    opt = _make_optimizer(cfg, model)
    n_sim = len(sim_items)
    steps_per_epoch = math.ceil(n_sim / cfg.batch_size)
    sched = schedule_for(cfg, n_sim)
    real_bs = cfg.real_batch_size or cfg.batch_size
    real_stream = _RealStream(len(real_x), seed) if real_x is not None else None
    metrics = RunMetrics(seed=seed)

    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "metrics.jsonl", "w")

    def emit(rec):
        if log_fh is not None:
            log_fh.write(_dump(rec) + "\n")

    step = 0
    try:
        for epoch in range(cfg.epochs):
            model.train()
            order = np.random.default_rng(np.random.SeedSequence([seed, _SIM_ORDER, epoch])).permutation(n_sim)
            ep_sl, ep_cl, ep_dice = [], [], []
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                xs, ms = [], []
                for j, i in enumerate(idx):
                    _, xt, m = _augment(sim_x[i], sim_y[i], cfg, (seed, _SIM_AUG, step, j))
                    xs.append(xt)
                    ms.append(m)
                masks = torch.from_numpy(np.stack(ms).astype(np.int64))
                logits = model(images_to_tensor(np.stack(xs)))
                p_sim, logp_sim = probs_from_logits(logits)
                l_sl = ce_jaccard_loss(p_sim, masks, cfg.loss.eps, log_y_p=logp_sim)

                a = alpha(sched, step) if cfg.uses_real else 0.0
                total = l_sl
                l_cl = None
                if cfg.uses_real:
                    clean, pert = [], []
                    for j, i in enumerate(real_stream.take(real_bs)):
                        x, xt, _ = _augment(real_x[i], None, cfg, (seed, _REAL_AUG, step, j))
                        clean.append(x)
                        pert.append(xt)
                    out = model(images_to_tensor(np.stack(clean + pert)))
                    probs, logp = probs_from_logits(out)
                    n = len(clean)
                    l_cl = consistency_loss(cfg.loss, probs[:n], probs[n:], log_perturbed=logp[n:])
                    total = total + a * l_cl
                reg = weight_decay_term(model, cfg.weight_decay)
                total = total + reg

                if not torch.isfinite(total):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} step {step}: L_sl={l_sl.item()!r} "
                        f"L_cl={None if l_cl is None else l_cl.item()!r} alpha={a!r} reg={reg.item()!r}"
                    )
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()

                with torch.no_grad():
                    pred = logits.argmax(1).numpy()
                ep_dice.extend(batch_dice(pred, masks.numpy()))
                rec = {
                    "event": "step",
                    "step": step,
                    "epoch": epoch,
                    "l_sl": l_sl.item(),
                    "l_cl": None if l_cl is None else l_cl.item(),
                    "alpha": a,
                    "reg": reg.item(),
                    "loss": total.item(),
                }
                metrics.steps.append(rec)
                emit(rec)
                ep_sl.append(rec["l_sl"])
                if l_cl is not None:
                    ep_cl.append(rec["l_cl"])
                step += 1

            last = epoch == cfg.epochs - 1
            test_dice = None
            if test_x is not None and (last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)):
                model.eval()
                test_dice = mean_std(batch_dice(predict_masks(model, test_x), test_y))[0]
            erec = {
                "event": "epoch",
                "epoch": epoch,
                "l_sl": float(np.mean(ep_sl)),
                "l_cl": float(np.mean(ep_cl)) if ep_cl else None,
                "alpha": metrics.steps[-1]["alpha"],
                "train_dice": float(np.mean(ep_dice)),
                "test_dice": test_dice,
            }
            metrics.epochs.append(erec)
            emit(erec)
            log.info("seed %d epoch %d: %s", seed, epoch, erec)
        metrics.final_test_dice = metrics.epochs[-1]["test_dice"]
        if out_dir is not None:
            meta = {"mode": cfg.mode.value, "seed": seed, "run_key": cfg.run_key()}
            ckpt = out_dir / "model.ckpt"
            metrics.checkpoint_sha256 = save_checkpoint(ckpt, model, step, meta)
            metrics.checkpoint = str(ckpt)
            summary = {
                "event": "final",
                "seed": seed,
                "steps": step,
                "final_test_dice": metrics.final_test_dice,
                "checkpoint_sha256": metrics.checkpoint_sha256,
            }
            emit(summary)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(model, metrics)


# --------------------------------------------------------------------------
# multi-seed orchestration

@dataclass
class AggregateReport:
    config: dict
    runs: list[dict]
    mean: float
    std: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    def per_seed(self) -> list[float]:
        return [r["final_test_dice"] for r in self.runs]


def _load_cached(run_dir: Path) -> dict | None:
    path = run_dir / "metrics.jsonl"
    if not (path.is_file() and (run_dir / "model.ckpt").is_file()):
        return None
    lines = path.read_text().splitlines()
    if not lines:
        return None
    last = json.loads(lines[-1])
    return last if last.get("event") == "final" else None


def run_experiment(cfg: TrainConfig, reader: DatasetReader, out_dir: str | Path, reuse: bool = True) -> AggregateReport:
    """Train once per seed and aggregate the final REAL_L Dice.

    Runs live in ``out_dir/runs/<run_key>/seed<k>/``; a finished run with the
    same key is reused instead of retrained when ``reuse`` is set.
    """
    out_dir = Path(out_dir)
    runs = []
    for seed in sorted(set(cfg.seeds)):
        run_dir = out_dir / "runs" / cfg.run_key() / f"seed{seed}"
        cached = _load_cached(run_dir) if reuse else None
        if cached is None:
            log.info("training %s seed %d -> %s", cfg.mode.value, seed, run_dir)
            res = train(cfg, reader, seed, run_dir)
            final = {
                "final_test_dice": res.metrics.final_test_dice,
                "checkpoint_sha256": res.metrics.checkpoint_sha256,
            }
        else:
            final = cached
        if final["final_test_dice"] is None:
            raise DataError("no REAL_L split to score against")
        runs.append(
            {
                "seed": seed,
                "final_test_dice": final["final_test_dice"],
                "checkpoint": str(run_dir.relative_to(out_dir) / "model.ckpt"),
                "checkpoint_sha256": final["checkpoint_sha256"],
                "metrics": str(run_dir.relative_to(out_dir) / "metrics.jsonl"),
            }
        )
    m, s = mean_std([r["final_test_dice"] for r in runs])
    report = AggregateReport(cfg.to_dict() | {"seeds": sorted(set(cfg.seeds))}, runs, m, s)
    (out_dir / "runs" / cfg.run_key()).mkdir(parents=True, exist_ok=True)
    (out_dir / "runs" / cfg.run_key() / "aggregate.json").write_text(report.to_json())
    return report


def read_metrics(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def warmup_property_probe(cfg: TrainConfig, reader: DatasetReader | None = None, metrics: RunMetrics | None = None) -> dict[str, Any]:
    """Per-step (step, alpha, consistency share of the loss) series for a run.

    Trains with the first seed unless ``metrics`` from a finished run are
    given. The share is ``|alpha*L_cl| / (|L_sl| + |alpha*L_cl|)``; magnitudes
    because the log-Jaccard term makes both losses negative late in training.
    """
    if cfg.alpha.kind is not AlphaKind.TEMPORAL_LINEAR:
        raise ParameterError("the warm-up probe needs a TEMPORAL_LINEAR schedule")
    if metrics is None:
        if reader is None:
            raise ParameterError("need a reader or finished metrics")
        metrics = train(cfg, reader, cfg.seeds[0]).metrics
    steps = [r["step"] for r in metrics.steps]
    alphas = [r["alpha"] for r in metrics.steps]
    share = []
    for r in metrics.steps:
        w = abs(r["alpha"] * (r["l_cl"] or 0.0))
        denom = abs(r["l_sl"]) + w
        share.append(w / denom if denom else 0.0)
    n = len(steps)
    return {
        "steps": steps,
        "alpha": alphas,
        "cl_share": share,
        "monotone": all(b >= a for a, b in zip(alphas, alphas[1:])),
        "first_alpha": alphas[0],
        "mid_alpha": alphas[(n - 1) // 2] if n else None,
        "n_steps": n,
    }
