"""Train-and-evaluate grids over model variants and seeds."""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import FeatureDataset, SyntheticConfig, generate_synthetic
from .metrics import MetricReport
from .model import ModelConfig, configure_variant
from .training import TrainConfig, evaluate, train


@dataclass(frozen=True)
class GridRow:
    group: str
    label: str
    spec: str


TABLE1 = (
    GridRow("", "GRU-based encoder", "g-only:T+A+V"),
    GridRow("", "Sequential Context Encoder (GRU+Transformer)", "T+A+V"),
    GridRow("", "ConAttSD (GRU+Transformer+Contrastive Attention)", "T→A + T→V"),
)
TABLE2 = (
    GridRow("Uni-modal", "T", "T"),
    GridRow("", "A", "A"),
    GridRow("", "V", "V"),
    GridRow("Multi-modal", "T+A", "T+A"),
    GridRow("", "T+V", "T+V"),
    GridRow("", "A+V", "A+V"),
    GridRow("", "T+A+V", "T+A+V"),
)
TABLE3 = (
    GridRow("", "T→A", "T→A"),
    GridRow("", "A→T", "A→T"),
    GridRow("", "T→V", "T→V"),
    GridRow("", "V→T", "V→T"),
    GridRow("", "A→V", "A→V"),
    GridRow("", "V→A", "V→A"),
    GridRow("", "Optimal: T→A + T→V", "T→A + T→V"),
)
INCONGRUITY = (
    GridRow("", "ConAttSD", "T→A + T→V"),
    GridRow("", "Sequential context only", "T+A+V"),
    GridRow("Uni-modal", "T", "T"),
    GridRow("", "A", "A"),
    GridRow("", "V", "V"),
)
GRIDS = {"table1": TABLE1, "table2": TABLE2, "table3": TABLE3, "incongruity": INCONGRUITY}


def resolve_grid(grid: str | Sequence[str | GridRow]) -> tuple[GridRow, ...]:
    """A named grid (``table1``/``table2``/``table3``) or a list of ablation specs."""
    if isinstance(grid, str):
        if grid in GRIDS:
            return GRIDS[grid]
        return tuple(GridRow("", s.strip(), s.strip()) for s in grid.split(",") if s.strip())
    return tuple(r if isinstance(r, GridRow) else GridRow("", r, r) for r in grid)


@dataclass
class Cell:
    row: GridRow
    seed: int
    report: MetricReport | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.report is not None

    def to_dict(self) -> dict:
        d = {"variant": self.row.label, "spec": self.row.spec, "seed": self.seed,
             "status": "ok" if self.ok else "failed"}
        if self.ok:
            d.update(precision=self.report.precision, recall=self.report.recall, f1=self.report.f1)
        else:
            d["error"] = self.error
        return d


@dataclass
class AblationResult:
    rows: tuple[GridRow, ...]
    seeds: tuple[int, ...]
    cells: list[Cell]

    def cells_for(self, row: GridRow) -> list[Cell]:
        return [c for c in self.cells if c.row == row]

    def mean(self, row: GridRow) -> dict[str, float] | None:
        done = [c.report for c in self.cells_for(row) if c.ok]
        if not done:
            return None
        return {k: round(float(np.mean([getattr(r, k) for r in done])), 2) for k in ("precision", "recall", "f1")}

    def mean_f1(self, spec_or_label: str) -> float | None:
        for row in self.rows:
            if spec_or_label in (row.spec, row.label):
                m = self.mean(row)
                return None if m is None else m["f1"]
        raise KeyError(spec_or_label)

    def to_jsonl(self) -> str:
        lines = [json.dumps(c.to_dict(), ensure_ascii=False, sort_keys=True) for c in self.cells]
        for row in self.rows:
            m = self.mean(row)
            record = {"variant": row.label, "spec": row.spec, "seed": "mean",
                      "n_ok": sum(c.ok for c in self.cells_for(row))}
            if m:
                record.update(m)
            lines.append(json.dumps(record, ensure_ascii=False, sort_keys=True))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        group_w = max([len(r.group) for r in self.rows] + [0])
        label_w = max(len(r.label) for r in self.rows)
        prefix_w = (group_w + 2 if group_w else 0) + label_w
        lines = [" " * prefix_w + f"  {'P':>7} {'R':>7} {'F1':>7}"]
        for row in self.rows:
            prefix = (f"{row.group:<{group_w}}  " if group_w else "") + f"{row.label:<{label_w}}"
            m = self.mean(row)
            if m is None:
                lines.append(f"{prefix}  {'failed':>7}")
            else:
                lines.append(f"{prefix}  {m['precision']:7.2f} {m['recall']:7.2f} {m['f1']:7.2f}")
        return "\n".join(lines) + "\n"


def run_cell(train_set: FeatureDataset, test_set: FeatureDataset, row: GridRow, base: ModelConfig,
             train_cfg: TrainConfig, seed: int) -> Cell:
    try:
        cfg = configure_variant(dataclasses.replace(base, seed=seed), row.spec)
        result = train(cfg, train_set, None, dataclasses.replace(train_cfg, seed=seed))
        return Cell(row, seed, evaluate(result.params, cfg, test_set.conversations))
    except Exception as exc:  # a failed cell must not abort the grid
        return Cell(row, seed, error=f"{type(exc).__name__}: {exc}")


def _run_cell_args(args):
    return run_cell(*args)


def run_ablation_grid(train_set: FeatureDataset, test_set: FeatureDataset, grid, base: ModelConfig,
                      train_cfg: TrainConfig, seeds: Sequence[int] = (0,), jobs: int = 1) -> AblationResult:
    """Train and evaluate every (row, seed) cell; cells may run in worker processes."""
    rows = resolve_grid(grid)
    tasks = [(train_set, test_set, row, base, train_cfg, int(seed)) for row in rows for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell_args, tasks))
    else:
        cells = [run_cell(*t) for t in tasks]
    return AblationResult(rows, tuple(int(s) for s in seeds), cells)


# ------------------------------------------------------- synthetic preset
@dataclass(frozen=True)
class IncongruitySetup:
    """Desk-scale experiment where only cross-modal comparison beats chance.

    Polarity lives in coordinate 0 of two-dimensional features, so a single
    modality (or any sum of per-modality scores) carries no label
    information.  Model size and optimizer settings are tuned for this
    problem, not taken from the full-size configuration.
    """

    n_train: int = 400
    n_test: int = 100
    noise: float = 0.5
    strength: float = 1.0
    dims: tuple[int, int, int] = (2, 2, 2)
    min_length: int = 2
    max_length: int = 2
    train_seed: int = 1000
    test_seed: int = 2000
    model: ModelConfig = ModelConfig(input_dims={"T": 2, "A": 2, "V": 2}, hidden=16, blocks=1, heads=2, dropout=0.2,
                                     positional_encoding=False)
    training: TrainConfig = TrainConfig(learning_rate=3e-3, batch_conversations=64, epochs=400,
                                        track_train_metrics=False)

    def datasets(self) -> tuple[FeatureDataset, FeatureDataset]:
        def make(n, seed):
            return generate_synthetic(SyntheticConfig(
                n_conversations=n, min_length=self.min_length, max_length=self.max_length, dims=self.dims,
                noise=self.noise, strength=self.strength, seed=seed))
        return make(self.n_train, self.train_seed), make(self.n_test, self.test_seed)

    def run(self, seeds: Sequence[int] = (0, 1, 2, 3, 4), grid=INCONGRUITY, jobs: int = 1) -> AblationResult:
        train_set, test_set = self.datasets()
        return run_ablation_grid(train_set, test_set, grid, self.model, self.training, seeds, jobs)
