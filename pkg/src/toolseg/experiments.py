"""Ablation presets, comparison tables and run reports."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import plotting
from .errors import DataError, ParameterError
from .losses import AlphaKind
from .perturb import Scheme
from .synthdata import DatasetReader
from .trainer import AggregateReport, AlphaConfig, Mode, TrainConfig, read_metrics, run_experiment

log = logging.getLogger(__name__)

PRESETS = ("loss-ablation", "perturbation-ablation", "alpha-ablation", "baseline-vs-joint")

# (better, worse, margin) pairs checked for each preset
_ORDERINGS = {
    "loss-ablation": [("SCL", "Baseline", 0.03)],
    "perturbation-ablation": [("Strong SCL", "Weak SCL", 0.01), ("Strong MSE", "Weak MSE", 0.01)],
    "alpha-ablation": [("TEMPORAL_LINEAR", "CONSTANT", 0.01)],
    "baseline-vs-joint": [("SCL", "Baseline", 0.03)],
}


def preset_rows(name: str, base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """Labelled configs for a preset, derived from ``base`` (epochs, model, seeds, ...)."""
    baseline = replace(base, mode=Mode.SUPERVISED_BASELINE)
    scl = replace(base, mode=Mode.SCL, scheme=Scheme.STRONG,
                  alpha=AlphaConfig(AlphaKind.TEMPORAL_LINEAR))
    if name == "loss-ablation":
        return [("Baseline", baseline), ("Pi-Model", replace(scl, mode=Mode.PI_MODEL)), ("SCL", scl)]
    if name == "perturbation-ablation":
        rows = [("Baseline", baseline)]
        for scheme in (Scheme.WEAK, Scheme.STRONG):
            for label, mode in (("MSE", Mode.PI_MODEL), ("SCL", Mode.SCL)):
                rows.append((f"{scheme.value.title()} {label}", replace(scl, mode=mode, scheme=scheme)))
        return rows
    if name == "alpha-ablation":
        const = replace(scl, alpha=AlphaConfig(AlphaKind.CONSTANT, base.alpha.value if
                                               base.alpha.kind is AlphaKind.CONSTANT else 1.0))
        return [("CONSTANT", const), ("TEMPORAL_LINEAR", scl)]
    if name == "baseline-vs-joint":
        return [("Baseline", baseline), ("SCL", scl)]
    raise ParameterError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


@dataclass
class TableRow:
    label: str
    mode: str
    scheme: str
    loss: str
    alpha: str
    mean: float
    std: float
    per_seed: list[float]
    seeds: list[int]
    run_key: str


@dataclass
class OrderingCheck:
    better: str
    worse: str
    margin: float
    delta: float
    passed: bool
    better_per_seed: list[float]
    worse_per_seed: list[float]

    def describe(self) -> str:
        state = "ok" if self.passed else "FLAGGED"
        return (f"{state}: {self.better} - {self.worse} = {self.delta:+.4f} (need >= {self.margin:+.2f}); "
                f"{self.better} seeds {_fmt_seeds(self.better_per_seed)}, "
                f"{self.worse} seeds {_fmt_seeds(self.worse_per_seed)}")


def _fmt_seeds(vals) -> str:
    return "[" + ", ".join(f"{v:.4f}" for v in vals) + "]"


@dataclass
class ComparisonTable:
    preset: str
    rows: list[TableRow]
    orderings: list[OrderingCheck] = field(default_factory=list)

    def row(self, label: str) -> TableRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = max(len(r.per_seed) for r in self.rows)
        w.writerow(["label", "mode", "scheme", "loss", "alpha", "mean", "std"] + [f"seed_{i}" for i in range(n)])
        for r in self.rows:
            w.writerow([r.label, r.mode, r.scheme, r.loss, r.alpha, f"{r.mean:.6f}", f"{r.std:.6f}"]
                       + [f"{v:.6f}" for v in r.per_seed])
        return buf.getvalue()

    def to_text(self) -> str:
        head = ("row", "mode", "scheme", "loss", "alpha", "Dice mean(std)")
        body = [(r.label, r.mode, r.scheme, r.loss, r.alpha, f"{r.mean:.3f} ({r.std:.3f})") for r in self.rows]
        widths = [max(len(x[i]) for x in [head, *body]) for i in range(len(head))]
        lines = ["  ".join(c.ljust(wd) for c, wd in zip(line, widths)).rstrip() for line in [head, *body]]
        lines.insert(1, "  ".join("-" * wd for wd in widths))
        lines.append("")
        lines += [c.describe() for c in self.orderings]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "csv": out_dir / f"{self.preset}.csv",
            "txt": out_dir / f"{self.preset}.txt",
            "json": out_dir / f"{self.preset}.json",
            "png": out_dir / f"{self.preset}.png",
        }
        paths["csv"].write_text(self.to_csv())
        paths["txt"].write_text(self.to_text())
        paths["json"].write_text(self.to_json())
        plotting.comparison_bars([r.label for r in self.rows], [r.per_seed for r in self.rows],
                                 paths["png"], title=self.preset)
        return paths


def _row(label: str, cfg: TrainConfig, rep: AggregateReport) -> TableRow:
    return TableRow(
        label=label,
        mode=cfg.mode.value,
        scheme=cfg.scheme.value,
        loss="-" if cfg.mode is Mode.SUPERVISED_BASELINE else cfg.loss.kind.value,
        alpha="-" if cfg.mode is Mode.SUPERVISED_BASELINE else cfg.alpha.kind.value,
        mean=rep.mean,
        std=rep.std,
        per_seed=rep.per_seed(),
        seeds=[r["seed"] for r in rep.runs],
        run_key=cfg.run_key(),
    )


def check_ordering(table: ComparisonTable, better: str, worse: str, margin: float) -> OrderingCheck:
    b, w = table.row(better), table.row(worse)
    delta = b.mean - w.mean
    return OrderingCheck(better, worse, margin, delta, bool(delta >= margin - 1e-12), b.per_seed, w.per_seed)


def run_ablation_preset(name: str, base: TrainConfig, reader: DatasetReader, out_dir: str | Path,
                        reuse: bool = True) -> ComparisonTable:
    """Train every row of ``name`` (one run per seed) and write the comparison table files.

    Runs are cached under ``out_dir/runs`` so presets sharing a row train it once.
    """
    rows = preset_rows(name, base)
    out_dir = Path(out_dir)
    table_rows = []
    for label, cfg in rows:
        log.info("preset %s: row %s", name, label)
        table_rows.append(_row(label, cfg, run_experiment(cfg, reader, out_dir, reuse=reuse)))
    table = ComparisonTable(name, table_rows)
    table.orderings = [check_ordering(table, *o) for o in _ORDERINGS[name]]
    table.write(out_dir / "tables")
    return table


def write_report(out_dir: str | Path) -> dict[str, Path]:
    """Summarise every finished experiment under ``out_dir/runs``.

    Means and stds are recomputed from the per-run final records, not copied
    from the aggregate files.
    """
    out_dir = Path(out_dir)
    aggs = sorted((out_dir / "runs").glob("*/aggregate.json"))
    if not aggs:
        raise DataError(f"no finished experiments under {out_dir / 'runs'}")
    rows, curves = [], {}
    for agg_path in aggs:
        agg = json.loads(agg_path.read_text())
        cfg = TrainConfig.from_dict(agg["config"])
        name = _short(cfg)
        if any(r.label == name for r in rows):
            name = f"{name} [{agg_path.parent.name[:6]}]"
        vals = []
        for run in agg["runs"]:
            recs = read_metrics(out_dir / run["metrics"])
            final = recs[-1]
            if final.get("event") != "final":
                raise DataError(f"{run['metrics']} has no final record")
            vals.append(final["final_test_dice"])
            curves[f"{name} s{run['seed']}"] = [r for r in recs if r["event"] == "epoch"]
        rows.append(TableRow(name, cfg.mode.value, cfg.scheme.value,
                             cfg.loss.kind.value, cfg.alpha.kind.value,
                             float(np.mean(vals)), float(np.std(vals)), vals,
                             [r["seed"] for r in agg["runs"]], agg_path.parent.name))
    table = ComparisonTable("report", rows)
    rdir = out_dir / "report"
    paths = table.write(rdir)
    paths["curves"] = plotting.training_curves(curves, rdir / "training_curves.png")
    return paths


def _short(cfg: TrainConfig) -> str:
    if cfg.mode is Mode.SUPERVISED_BASELINE:
        return "Baseline"
    kind = "SCL" if cfg.mode is Mode.SCL else "MSE"
    a = "temporal" if cfg.alpha.kind is AlphaKind.TEMPORAL_LINEAR else f"const {cfg.alpha.value:g}"
    return f"{cfg.scheme.value.title()} {kind} {a}"
