import numpy as np
import pytest
from dataclasses import replace

from pown import graphdata as gd
from pown import trainer as tr
from pown.errors import ContractViolation, NumericError


@pytest.fixture(scope="module")
def sbm_setup():
    graph, masks = gd.generate_sbm(600, 6, 0.08, 0.004, 16, 0.4, seed=0)
    plan = gd.make_class_folds(6, 1 / 3, seed=0, num_folds=3)
    split = gd.open_world_split(graph, masks, plan, 0, 1)
    return graph, masks, split


def fast_config(**overrides):
    base = dict(hidden_dim=24, max_epochs=25, patience=8, dropout=0.2,
                gamma_quantile=0.5, seed=1)
    base.update(overrides)
    return tr.TrainConfig(**base)


class TestTotalLoss:
    def test_all_zero_weights(self):
        config = tr.TrainConfig(supervised_weight=0, infomax_weight=0,
                                pseudo_weight=0, reg_weight=0)
        components = dict(supervised=1.0, infomax=2.0, pseudo=3.0,
                          regularizer=4.0)
        assert tr.total_loss(components, config) == 0.0

    def test_single_component(self):
        config = tr.TrainConfig(supervised_weight=1.0, infomax_weight=0,
                                pseudo_weight=0, reg_weight=0)
        components = dict(supervised=0.7, infomax=9.0, pseudo=9.0,
                          regularizer=9.0)
        assert tr.total_loss(components, config) == pytest.approx(0.7)

    def test_default_weights_sum(self):
        components = dict(supervised=1.0, infomax=1.0, pseudo=1.0,
                          regularizer=1.0)
        assert tr.total_loss(components, tr.TrainConfig()) == pytest.approx(
            2.220482, abs=1e-6)

    def test_non_finite_component_named(self):
        components = dict(supervised=1.0, infomax=float("nan"), pseudo=1.0,
                          regularizer=1.0)
        with pytest.raises(NumericError, match="infomax"):
            tr.total_loss(components, tr.TrainConfig())


class TestConfigValidation:
    @pytest.mark.parametrize("kwargs", [
        dict(supervised_weight=-0.1),
        dict(gamma_quantile=0.0),
        dict(gamma_quantile=1.0),
        dict(patience=0),
        dict(max_epochs=0),
        dict(lp_hops=0),
        dict(tau_s=0.0),
        dict(dropout=1.0),
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ContractViolation):
            tr.TrainConfig(**kwargs).validate()

    def test_defaults_valid(self):
        tr.TrainConfig().validate()


class TestEarlyStopping:
    def test_strictly_worsening_stops_after_two_epochs(self):
        scores = iter([0.9, 0.8, 0.7, 0.6])
        best_epoch, seen = tr.run_early_stopped(
            lambda epoch: next(scores), max_epochs=10, patience=1)
        assert best_epoch == 1
        assert len(seen) == 2

    def test_max_epochs_one(self):
        best_epoch, seen = tr.run_early_stopped(lambda e: 0.5, 1, patience=3)
        assert best_epoch == 1 and len(seen) == 1

    def test_patience_counts_non_strict_improvements(self):
        scores = iter([0.5, 0.5, 0.5, 0.5, 0.5])
        _, seen = tr.run_early_stopped(lambda e: next(scores), 5, patience=2)
        assert len(seen) == 3

    def test_recovery_resets_patience(self):
        scores = iter([0.5, 0.4, 0.6, 0.3, 0.2, 0.1])
        best_epoch, seen = tr.run_early_stopped(lambda e: next(scores), 10,
                                                patience=2)
        assert best_epoch == 3
        assert len(seen) == 5


class TestTrainEpoch:
    def test_identical_seeds_identical_traces(self, sbm_setup):
        graph, masks, split = sbm_setup
        config = fast_config(max_epochs=5, seed=7)
        results = [tr.fit(graph, masks, split, config) for _ in range(2)]
        a, b = (r.trace.records for r in results)
        assert len(a) == len(b)
        for ra, rb in zip(a, b):
            assert ra == rb

    def test_no_survivors_matches_pipeline_free_update(self):
        # All nodes share one feature vector: every unlabeled node is exactly
        # as similar to the known prototypes as the labeled ones, so no
        # candidate clears the strict threshold and the pseudo loss is zero.
        n = 40
        features = np.tile([[1.0, 0.0, 0.0, 0.0]], (n, 1))
        edges = [(i, (i + 1) % n) for i in range(n)]
        labels = np.array([0, 1] * (n // 2))
        graph = gd.make_graph(features, edges, labels, 4)
        masks = gd.SplitMasks(
            train=np.arange(n) < 10,
            validation=(np.arange(n) >= 10) & (np.arange(n) < 25),
            test=np.arange(n) >= 25,
        )
        split = gd.OpenWorldSplit(
            known_classes=(0, 1), validation_new_classes=(2,),
            test_new_classes=(3,), labeled_nodes=np.arange(10),
            unlabeled_nodes=np.arange(10, n))

        with_pseudo = fast_config(max_epochs=3, dropout=0.0, seed=5)
        without_pseudo = replace(with_pseudo, pseudo_weight=0.0)

        state_a = tr.init_model(graph, split, with_pseudo)
        state_b = tr.init_model(graph, split, without_pseudo)
        for epoch in (1, 2, 3):
            record_a, pipeline = tr.train_epoch(state_a, graph, split,
                                                with_pseudo, epoch)
            record_b, _ = tr.train_epoch(state_b, graph, split,
                                         without_pseudo, epoch)
            assert pipeline.survivors.size == 0
            assert record_a.loss_p == 0.0
        for pa, pb in zip(state_a.parameters(), state_b.parameters()):
            np.testing.assert_allclose(pa.value, pb.value, atol=1e-12)

    def test_loss_decreases_on_separable_toy(self, sbm_setup):
        graph, masks, split = sbm_setup
        config = fast_config(max_epochs=20, patience=20, seed=3)
        result = tr.fit(graph, masks, split, config)
        totals = [r.total for r in result.trace.records]
        assert len(totals) == 20
        increases = sum(1 for a, b in zip(totals, totals[1:]) if b > a)
        assert increases <= 3
        assert totals[-1] < totals[0]


class TestFit:
    def test_best_snapshot_at_least_final(self, sbm_setup):
        graph, masks, split = sbm_setup
        config = fast_config(max_epochs=15, patience=15, seed=11)
        result = tr.fit(graph, masks, split, config)
        final_val = result.trace.records[-1].val_acc
        assert result.best_val_acc >= final_val
        # The restored state reproduces the best validation accuracy.
        assert tr.validation_accuracy(result.state, graph, masks,
                                      split) == pytest.approx(
            result.best_val_acc)

    def test_max_epochs_one(self, sbm_setup):
        graph, masks, split = sbm_setup
        result = tr.fit(graph, masks, split, fast_config(max_epochs=1))
        assert len(result.trace.records) == 1

    def test_trace_csv_shape(self, sbm_setup):
        graph, masks, split = sbm_setup
        result = tr.fit(graph, masks, split, fast_config(max_epochs=3,
                                                         patience=3))
        lines = result.trace.to_csv().strip().splitlines()
        assert lines[0] == tr.TrainTrace.CSV_HEADER
        assert len(lines) == 1 + len(result.trace.records)

    def test_needs_labeled_nodes(self, sbm_setup):
        graph, masks, split = sbm_setup
        empty_split = gd.OpenWorldSplit(
            split.known_classes, split.validation_new_classes,
            split.test_new_classes, np.array([], dtype=np.intp),
            np.arange(graph.n))
        with pytest.raises(ContractViolation):
            tr.fit(graph, masks, empty_split, fast_config())


class TestAblations:
    @pytest.mark.parametrize("zeroed", [
        "supervised_weight", "infomax_weight", "pseudo_weight", "reg_weight"])
    def test_single_loss_removed_still_trains(self, sbm_setup, zeroed):
        graph, masks, split = sbm_setup
        config = replace(fast_config(max_epochs=4, patience=4), **{zeroed: 0.0})
        result = tr.fit(graph, masks, split, config)
        assert len(result.trace.records) == 4
        assert all(np.isfinite(r.total) for r in result.trace.records)

    def test_without_supervision_known_accuracy_collapses(self, sbm_setup):
        graph, masks, split = sbm_setup
        config = replace(fast_config(max_epochs=30, patience=30, seed=13),
                         supervised_weight=0.0)
        result = tr.fit(graph, masks, split, config)
        preds, _ = tr.predict(result.state)
        known_preds = tr.predicted_known_classes(preds, result.state.protos)
        _, acc_known, _ = tr.open_world_scores(preds, known_preds, graph,
                                               masks, split)
        assert acc_known <= 1.5 / len(split.known_classes)


def test_predicted_known_classes_mapping():
    from pown import ndtensor as nd
    from pown.prototypes import PrototypeSet

    protos = PrototypeSet(
        vectors=nd.parameter(np.eye(4)), known_ids=np.arange(2),
        new_ids=np.arange(2, 4), known_classes=(2, 5), tau_s=0.1, tau_p=0.7)
    preds = np.array([0, 1, 2, 3])
    out = tr.predicted_known_classes(preds, protos)
    np.testing.assert_array_equal(out, [2, 5, -1, -1])


def test_validation_subset_excludes_test_new_classes(sbm_setup):
    graph, masks, split = sbm_setup
    subset = tr.validation_subset(graph, masks, split)
    visible = set(split.known_classes) | set(split.validation_new_classes)
    assert set(graph.labels[subset]) <= visible
    assert masks.validation[subset].all()
