import json

import pytest

from conattsd.ablation import (
    INCONGRUITY,
    TABLE2,
    TABLE3,
    GridRow,
    IncongruitySetup,
    resolve_grid,
    run_ablation_grid,
)
from conattsd.data import SyntheticConfig, generate_synthetic
from conattsd.model import ModelConfig, configure_variant
from conattsd.training import TrainConfig, evaluate, train

DIMS = {"T": 3, "A": 3, "V": 3}
BASE = ModelConfig(input_dims=DIMS, hidden=4, blocks=1, heads=2, dropout=0.1)
FAST = TrainConfig(epochs=1, track_train_metrics=False)


def _sets():
    make = lambda n, s: generate_synthetic(SyntheticConfig(n_conversations=n, dims=(3, 3, 3), max_length=3, seed=s))
    return make(6, 0), make(4, 1)


def test_table2_rows():
    assert [r.label for r in TABLE2] == ["T", "A", "V", "T+A", "T+V", "A+V", "T+A+V"]
    assert [r.group for r in TABLE2 if r.group] == ["Uni-modal", "Multi-modal"]
    for row in TABLE2:
        cfg = configure_variant(ModelConfig(), row.spec)
        assert cfg.variants == () and "+".join(cfg.modalities) == row.label


def test_table3_rows():
    labels = [r.label for r in TABLE3]
    assert labels == ["T→A", "A→T", "T→V", "V→T", "A→V", "V→A", "Optimal: T→A + T→V"]
    assert configure_variant(ModelConfig(), TABLE3[-1].spec) == ModelConfig()
    for row in TABLE3[:-1]:
        assert [str(v) for v in configure_variant(ModelConfig(), row.spec).variants] == [row.label]


def test_resolve_grid_forms():
    assert resolve_grid("table2") == TABLE2
    assert resolve_grid("T, A+V") == (GridRow("", "T", "T"), GridRow("", "A+V", "A+V"))
    assert resolve_grid(["V", GridRow("g", "x", "T")]) == (GridRow("", "V", "V"), GridRow("g", "x", "T"))


def test_single_cell_grid_equals_plain_run():
    train_set, test_set = _sets()
    result = run_ablation_grid(train_set, test_set, ["T+A"], BASE, FAST, seeds=(3,))
    cfg = configure_variant(ModelConfig(input_dims=DIMS, hidden=4, blocks=1, heads=2, dropout=0.1, seed=3), "T+A")
    plain = train(cfg, train_set, cfg=TrainConfig(epochs=1, track_train_metrics=False, seed=3))
    assert result.cells[0].report == evaluate(plain.params, cfg, test_set.conversations)


def test_failed_cells_are_recorded_without_aborting():
    train_set, test_set = _sets()
    result = run_ablation_grid(train_set, test_set, ["T", "T+Q", "A→A"], BASE, FAST, seeds=(0, 1))
    status = [(c.row.spec, c.seed, c.ok) for c in result.cells]
    assert status == [("T", 0, True), ("T", 1, True), ("T+Q", 0, False), ("T+Q", 1, False),
                      ("A→A", 0, False), ("A→A", 1, False)]
    assert "ConfigError" in result.cells[2].error
    assert result.mean_f1("T+Q") is None
    text = result.to_text()
    assert text.splitlines()[2].rstrip().endswith("failed")
    records = [json.loads(line) for line in result.to_jsonl().splitlines()]
    assert records[2]["status"] == "failed" and "error" in records[2]
    assert records[-1] == {"variant": "A→A", "spec": "A→A", "seed": "mean", "n_ok": 0}


def test_grid_is_reproducible_and_jobs_do_not_change_results():
    train_set, test_set = _sets()
    grid = ["T", "T→A"]
    a = run_ablation_grid(train_set, test_set, grid, BASE, FAST, seeds=(0, 1))
    b = run_ablation_grid(train_set, test_set, grid, BASE, FAST, seeds=(0, 1))
    c = run_ablation_grid(train_set, test_set, grid, BASE, FAST, seeds=(0, 1), jobs=2)
    assert a.to_jsonl() == b.to_jsonl() == c.to_jsonl()
    assert a.to_text() == b.to_text()


def test_text_table_layout():
    train_set, test_set = _sets()
    result = run_ablation_grid(train_set, test_set, TABLE2[:4], BASE, FAST, seeds=(0,))
    lines = result.to_text().splitlines()
    assert lines[0].split() == ["P", "R", "F1"]
    assert lines[1].split()[:2] == ["Uni-modal", "T"]
    assert lines[2].split()[0] == "A" and lines[2].startswith(" " * 11)
    assert lines[4].startswith("Multi-modal  T+A ")
    assert len({len(line) for line in lines[1:]}) == 1
    mean = result.mean(TABLE2[0])
    assert lines[1].split()[-1] == f"{mean['f1']:.2f}"


def test_means_average_ok_cells():
    train_set, test_set = _sets()
    result = run_ablation_grid(train_set, test_set, ["V"], BASE, FAST, seeds=(0, 1, 2))
    f1s = [c.report.f1 for c in result.cells]
    assert result.mean_f1("V") == round(sum(f1s) / 3, 2)
    with pytest.raises(KeyError):
        result.mean_f1("nope")


def test_incongruity_setup_datasets():
    setup = IncongruitySetup()
    train_set, test_set = setup.datasets()
    assert (len(train_set), len(test_set)) == (400, 100)
    assert train_set.class_counts == {0: 200, 1: 200}
    assert [r.spec for r in INCONGRUITY] == ["T→A + T→V", "T+A+V", "T", "A", "V"]
    assert train_set.dims == {"T": 2, "A": 2, "V": 2}
    assert train_set.conversations[:100] != test_set.conversations
