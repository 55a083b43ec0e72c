import numpy as np
import pytest

from ctxner.corpus import Corpus, DialogueTurn, LabelSet, generate_context_corpus, generate_pattern_corpus
from ctxner.embeddings import build_vocab
from ctxner.tagger import TaggerModel, VariantConfig
from ctxner.training import (
    EarlyStopping,
    LabelSetMismatch,
    TrainConfig,
    carve_dev,
    evaluate,
    grid_to_tsv,
    run_grid,
    train,
)

TINY = dict(hidden_dim=4, layers=1, word_dim=6, char_dim=3, char_filters=4)


def small_model(corpus, name="BI-LSTM-CRF", seed=0, **overrides):
    vocab = build_vocab(t for s in corpus.all_sentences() for t in s)
    cfg = VariantConfig.from_name(name, **{**TINY, **overrides})
    return TaggerModel.build(cfg, corpus.label_set, vocab, seed=seed)


class TestEarlyStopping:
    def test_patience_one(self):
        es = EarlyStopping(1)
        assert es.update(1, 0.5) == (True, False)
        assert es.update(2, 0.7) == (True, False)
        assert es.update(3, 0.6) == (False, True)
        assert es.best_epoch == 2

    def test_ties_do_not_improve(self):
        es = EarlyStopping(2)
        es.update(1, 0.5)
        assert es.update(2, 0.5) == (False, False)


class TestTrain:
    def test_stops_and_restores_best(self, monkeypatch):
        corpus = generate_pattern_corpus(12, seed=0)
        model = small_model(corpus)
        scores = iter([0.5, 0.7, 0.6, 0.9])
        snapshots = {}

        def dev_score(m, c):
            epoch = len(snapshots) + 1
            snapshots[epoch] = m.state_arrays()
            return next(scores)

        model, hist = train(model, corpus, TrainConfig(max_epochs=10, patience=1), dev_score=dev_score)
        assert len(hist.epochs) == 3
        assert hist.best_epoch == 2 and hist.stopped_early
        for k, arr in model.state_arrays().items():
            assert arr.tobytes() == snapshots[2][k].tobytes()

    def test_deterministic(self):
        corpus = generate_pattern_corpus(16, seed=1)
        runs = []
        for _ in range(2):
            m, h = train(small_model(corpus, "BI-LSTM-CHAR-CRF-CE"), corpus, TrainConfig(max_epochs=2, seed=5))
            runs.append((m.state_arrays(), h.to_dict()))
        assert runs[0][1] == runs[1][1]
        for k in runs[0][0]:
            assert runs[0][0][k].tobytes() == runs[1][0][k].tobytes()

    def test_zero_learning_rate_changes_nothing(self):
        corpus = generate_pattern_corpus(10, seed=2)
        model = small_model(corpus, "BI-LSTM-CHAR-CRF-CE")
        before = model.state_arrays()
        train(model, corpus, TrainConfig(max_epochs=2, learning_rate=0.0))
        for k, arr in model.state_arrays().items():
            assert arr.tobytes() == before[k].tobytes()

    def test_frozen_table_untouched(self):
        corpus = generate_pattern_corpus(10, seed=3)
        model = small_model(corpus, "BI-LSTM-CE")
        table = model.word_table.vectors.data.copy()
        proj = model.proj_weight.data.copy()
        train(model, corpus, TrainConfig(max_epochs=2, learning_rate=0.05))
        assert model.word_table.vectors.data.tobytes() == table.tobytes()
        assert not np.array_equal(model.proj_weight.data, proj)

    def test_loss_decreases(self):
        corpus = generate_pattern_corpus(20, seed=4)
        _, hist = train(small_model(corpus), corpus, TrainConfig(max_epochs=4, learning_rate=0.02, patience=4),
                        dev_corpus=corpus)
        assert hist.epochs[-1].train_loss < hist.epochs[0].train_loss

    def test_empty_corpus(self):
        corpus = generate_pattern_corpus(4, seed=0)
        with pytest.raises(ValueError):
            train(small_model(corpus), Corpus([], corpus.label_set), TrainConfig())


class TestEvaluate:
    def test_label_mismatch(self):
        corpus = generate_pattern_corpus(6, seed=0)
        model = small_model(corpus)
        other = Corpus([DialogueTurn("x", 0, (), ("north",), ("B-area",))])
        with pytest.raises(LabelSetMismatch, match="area"):
            evaluate(model, other)

    def test_subset_labels_allowed(self):
        corpus = generate_context_corpus(32, seed=0)
        model = small_model(corpus)
        only_dst = corpus.subset([t for t in corpus.turns if t.tags[0] == "B-dst_city"])
        report = evaluate(model, only_dst)
        assert set(report.per_type) == {"dst_city", "or_city"}


def test_carve_dev_partition():
    corpus = generate_pattern_corpus(20, seed=0)
    tr, dev = carve_dev(corpus, 0.1, seed=0)
    assert (len(tr), len(dev)) == (18, 2)
    assert set(tr.turns) | set(dev.turns) == set(corpus.turns)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(dev_fraction=1.0)


class TestGrid:
    def test_one_cell(self):
        corpus = generate_pattern_corpus(12, seed=0)
        cells = run_grid(corpus, corpus, {"custom": None}, ["BI-LSTM"], TrainConfig(max_epochs=1),
                         variant_overrides=TINY)
        assert len(cells) == 1 and 0.0 <= cells[0].macro_f1 <= 1.0
        tsv = grid_to_tsv(cells)
        assert tsv.splitlines()[0].split("\t")[:2] == ["Model", "custom"]

    def test_missing_vectors_recorded(self, tmp_path):
        corpus = generate_pattern_corpus(12, seed=0)
        cells = run_grid(corpus, corpus, {"G50W": str(tmp_path / "nope.txt"), "custom": None}, ["BI-LSTM"],
                         TrainConfig(max_epochs=1), variant_overrides=TINY)
        by_regime = {c.regime: c for c in cells}
        assert by_regime["G50W"].error and by_regime["G50W"].macro_f1 is None
        assert by_regime["custom"].error is None
        assert "ERROR" in grid_to_tsv(cells)

    def test_reference_values_attached(self):
        corpus = generate_pattern_corpus(12, seed=0)
        cells = run_grid(corpus, corpus, {"SG300": None}, ["BI-LSTM-CRF-CE"], TrainConfig(max_epochs=1),
                         variant_overrides=TINY, sgns_options={"d": 5, "epochs": 1})
        assert cells[0].reference == pytest.approx(89.696)
