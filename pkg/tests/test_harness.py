import json
from pathlib import Path

import numpy as np
import pytest

from src.common.errors import ContractError, InitError
from src.config import load_config, with_overrides
from src.data.loader import load_dataset
from src.harness.metrics import EvalReport, RunResult, relative_gain, topk_accuracy
from src.harness.train import (
    InitMode,
    build_compact_network,
    label_fraction_sweep,
    linear_probe,
    train_supervised,
    two_stage_pretrain,
)
from src.nas.genotype import CellGenotype, Genotype, random_genotype
from src.search.orchestrator import run_search


@pytest.fixture
def genotype() -> Genotype:
    return random_genotype([True, True], seed=0)


@pytest.fixture
def compact_weights(tiny_config, tiny_data, genotype) -> dict[str, np.ndarray]:
    train, _ = tiny_data
    rng = np.random.default_rng(42)
    return build_compact_network(tiny_config, genotype, train.image_shape, train.classes, rng).state_dict()


def _run(seed=0, init="random", fraction=1.0, top1=0.5, lr=0.025) -> RunResult:
    return RunResult(seed, init, fraction, top1, min(1.0, top1 + 0.2), 1.0, lr, 1, "abc")


class TestRelativeGain:
    def test_no_difference(self):
        assert relative_gain(0.7, 0.7, 0.7, 0.7) == 0.0

    def test_gain_from_the_ablated_component(self):
        assert relative_gain(0.77, 0.70, 0.75, 0.70) == pytest.approx(0.02)

    def test_swapping_conditions_flips_the_sign(self):
        a = (0.9, 0.6, 0.8, 0.75)
        assert relative_gain(*a) == -relative_gain(a[2], a[3], a[0], a[1])

    def test_rejects_accuracies_outside_unit_interval(self):
        with pytest.raises(ContractError):
            relative_gain(1.2, 0.5, 0.5, 0.5)


def test_topk_accuracy():
    logits = np.array([[0.1, 0.5, 0.4], [0.9, 0.05, 0.05]])
    labels = np.array([2, 0])
    assert topk_accuracy(logits, labels, 1) == 0.5
    assert topk_accuracy(logits, labels, 2) == 1.0
    assert topk_accuracy(logits, labels, 5) == 1.0
    assert topk_accuracy(np.zeros((0, 3)), np.zeros(0, dtype=np.int64)) == 0.0


def test_run_result_validates_accuracy():
    with pytest.raises(ContractError):
        _run(top1=1.5)


def test_report_aggregate_groups_runs():
    report = EvalReport([_run(0, top1=0.5), _run(1, top1=0.7), _run(0, init="concomitant", top1=0.6)])
    table = report.aggregate().set_index("init")
    assert table.loc["random", "n"] == 2
    assert table.loc["random", "top1_mean"] == pytest.approx(0.6)
    assert table.loc["random", "top1_std"] == pytest.approx(np.sqrt(0.02))
    assert table.loc["concomitant", "top1_std"] == 0.0
    assert report.top1 == pytest.approx(0.6)

    payload = json.loads(report.to_text())
    assert len(payload["runs"]) == 3
    assert len(payload["aggregate"]) == 2


def test_empty_report():
    report = EvalReport()
    assert report.aggregate().empty
    assert np.isnan(report.top1)


def test_zero_epochs_is_pure_evaluation(tiny_config, tiny_data, genotype, compact_weights):
    train, test = tiny_data
    before = {k: v.copy() for k, v in compact_weights.items()}
    a = train_supervised(genotype, "concomitant", 1.0, 0, tiny_config, train, test, compact_weights)
    b = train_supervised(genotype, "concomitant", 1.0, 0, tiny_config, train, test, compact_weights)
    assert a.runs[0].top1 == b.runs[0].top1
    assert a.runs[0].test_loss == b.runs[0].test_loss
    assert a.runs[0].loss_curve == []
    for name, value in before.items():
        np.testing.assert_array_equal(compact_weights[name], value)


def test_fine_tuning_records_a_finite_loss_curve(tiny_config, tiny_data, genotype):
    train, test = tiny_data
    report = train_supervised(genotype, InitMode.RANDOM, 0.5, 2, tiny_config, train, test)
    run = report.runs[0]
    assert run.init == "random"
    assert run.fraction == 0.5
    assert len(run.loss_curve) == 2
    assert np.isfinite(run.loss_curve).all()
    assert 0.0 <= run.top1 <= run.top5 <= 1.0


def test_fine_tuning_is_seeded(tiny_config, tiny_data, genotype):
    train, test = tiny_data
    a = train_supervised(genotype, "random", 1.0, 1, tiny_config, train, test, seed=3)
    b = train_supervised(genotype, "random", 1.0, 1, tiny_config, train, test, seed=3)
    assert a.runs[0].loss_curve == b.runs[0].loss_curve
    assert a.runs[0].top1 == b.runs[0].top1


def test_concomitant_init_needs_weights(tiny_config, tiny_data, genotype):
    train, test = tiny_data
    with pytest.raises(InitError):
        train_supervised(genotype, "concomitant", 1.0, 0, tiny_config, train, test)


def test_incomplete_genotype_is_rejected(tiny_config, tiny_data, genotype):
    train, test = tiny_data
    partial = Genotype((genotype.cells[0], None))
    with pytest.raises(InitError):
        train_supervised(partial, "random", 1.0, 0, tiny_config, train, test)


def _uniform_genotype(op: str) -> Genotype:
    nodes = tuple(((0, op), (1, op)) for _ in range(4))
    return Genotype((CellGenotype(True, nodes), CellGenotype(True, nodes)))


def test_weights_of_another_genotype_are_rejected(tiny_config, tiny_data):
    train, test = tiny_data
    conv, pool = _uniform_genotype("sep_conv_3x3"), _uniform_genotype("max_pool_3x3")
    rng = np.random.default_rng(0)
    weights = build_compact_network(tiny_config, conv, train.image_shape, train.classes, rng).state_dict()
    with pytest.raises(InitError):
        train_supervised(pool, "concomitant", 1.0, 0, tiny_config, train, test, weights)


def test_linear_probe_leaves_weights_untouched(tiny_config, tiny_data, genotype, compact_weights):
    train, test = tiny_data
    before = {k: v.copy() for k, v in compact_weights.items()}
    accuracy = linear_probe(compact_weights, genotype, train, test, tiny_config)
    assert 0.0 <= accuracy <= 1.0
    assert accuracy == linear_probe(compact_weights, genotype, train, test, tiny_config)
    for name, value in before.items():
        np.testing.assert_array_equal(compact_weights[name], value)


def test_linear_probe_of_random_init(tiny_config, tiny_data, genotype):
    train, test = tiny_data
    assert 0.0 <= linear_probe(None, genotype, train, test, tiny_config) <= 1.0


def test_two_stage_pretrain_returns_compact_weights(tiny_config, tiny_data, genotype, compact_weights):
    train, _ = tiny_data
    result = two_stage_pretrain(genotype, 1, tiny_config, train)
    assert len(result.losses) == 1
    assert np.isfinite(result.losses[0])
    assert set(result.weights) == set(compact_weights)
    for name, value in result.weights.items():
        assert value.shape == compact_weights[name].shape


def test_label_fraction_sweep(tiny_config, tiny_data, genotype):
    train, test = tiny_data
    table, report = label_fraction_sweep(
        tiny_config,
        genotype,
        train,
        test,
        fractions=(1.0, 0.5),
        inits=("random", "two_stage"),
        seeds=(0,),
        epochs=0,
    )
    assert len(report.runs) == 4
    assert len(table) == 4
    assert set(table["init"]) == {"random", "two_stage"}
    assert (table["n"] == 1).all()


@pytest.fixture(scope="module")
def desk_search():
    desk = load_config(Path(__file__).resolve().parent.parent / "configs" / "desk.json")
    config = with_overrides(
        desk,
        search={"max_epochs": 5},
        dataset={"train_samples": 256, "test_samples": 128},
        train={"epochs": 2, "pretrain_epochs": 1},
        probe={"epochs": 5},
    )
    train, test = load_dataset(config.dataset)
    return config, train, test, run_search(config, train)


@pytest.mark.slow
def test_searched_and_random_genotypes_fine_tune_side_by_side(desk_search):
    config, train, test, checkpoint = desk_search
    searched = checkpoint.genotype
    baseline = random_genotype([cell.reduction for cell in searched.cells], seed=config.seed)
    accuracies = {}
    for name, genotype in (("searched", searched), ("random", baseline)):
        table, report = label_fraction_sweep(
            config, genotype, train, test, fractions=(0.5,), inits=("random",), seeds=(0, 1)
        )
        assert len(report.runs) == 2
        assert all(np.isfinite(run.loss_curve).all() for run in report.runs)
        accuracies[name] = float(table["top1_mean"].iloc[0])
    assert all(0.0 <= acc <= 1.0 for acc in accuracies.values())


@pytest.mark.slow
def test_concomitant_and_random_init_at_a_tenth_of_the_labels(desk_search):
    config, train, test, checkpoint = desk_search
    table, report = label_fraction_sweep(
        config,
        checkpoint.genotype,
        train,
        test,
        fractions=(0.1,),
        inits=("random", "concomitant"),
        seeds=(0, 1),
        weights=checkpoint.section("net"),
    )
    assert len(report.runs) == 4
    assert set(table["init"]) == {"random", "concomitant"}
    assert (table["n"] == 2).all()
    by_init = table.set_index("init")["top1_mean"]
    probe_concomitant = linear_probe(checkpoint.section("net"), checkpoint.genotype, train, test, config)
    probe_random = linear_probe(None, checkpoint.genotype, train, test, config)
    assert -1.0 <= by_init["concomitant"] - by_init["random"] <= 1.0
    assert 0.0 <= probe_concomitant <= 1.0 and 0.0 <= probe_random <= 1.0
