import numpy as np
import pytest

from hierbert.exceptions import InputError
from hierbert.layers import zero_init
from hierbert.probe import (
    ProbeConfig, ProbeDataset, compare_bigram_probe, encoder_checksum, probe_datasets_for, probe_run,
    sentence_features, swap_once,
)
from hierbert.streams import make_stream
from hierbert.train import TrainConfig


@pytest.fixture
def probe_config():
    return ProbeConfig(hidden_sizes=(16,), epochs=5, max_len=32, lr=1e-2)


@pytest.fixture
def datasets(corpus, probe_config):
    return probe_datasets_for(corpus, 0, probe_config)


class TestDatasets:
    def test_bigram_shift_is_balanced(self, datasets):
        dataset = datasets["bigram_shift_detection"]
        counts = dataset.class_counts()
        assert counts[0] == counts[1]
        assert len(dataset.sentences) == len(dataset.labels)

    def test_sentence_length_buckets(self, datasets):
        dataset = datasets["sentence_length"]
        counts = list(dataset.class_counts().values())
        assert max(counts) - min(counts) <= 1
        lengths = np.array([len(s) for s in dataset.sentences])
        for k in range(dataset.num_classes - 1):
            assert lengths[dataset.labels == k].max() <= lengths[dataset.labels == k + 1].min()

    def test_word_content_classes(self, datasets):
        dataset = datasets["word_content"]
        counts = dataset.class_counts()
        assert len(counts) == 3 and len(set(counts.values())) == 1

    def test_swap_once(self):
        tokens = ["a", "b", "c", "d"]
        swapped = swap_once(tokens, make_stream(0, "swap"))
        diffs = [i for i, (x, y) in enumerate(zip(tokens, swapped)) if x != y]
        assert len(diffs) == 2 and diffs[1] == diffs[0] + 1
        assert sorted(swapped) == tokens

    def test_deterministic(self, corpus, probe_config):
        a = probe_datasets_for(corpus, 5, probe_config)["bigram_shift_detection"]
        b = probe_datasets_for(corpus, 5, probe_config)["bigram_shift_detection"]
        assert a.sentences == b.sentences
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_corpus_too_small(self, probe_config):
        with pytest.raises(InputError):
            probe_datasets_for([["Cats see the ball ."]], 0, probe_config)


class TestProbeRun:
    def test_encoder_unchanged(self, make_model, vocab, datasets, probe_config):
        model = make_model(mlm_layer=2, nsp_layer=1)
        before = encoder_checksum(model.encoder)
        result = probe_run(model, vocab, datasets["bigram_shift_detection"], probe_config)
        assert result.encoder_checksum == before == encoder_checksum(model.encoder)
        assert len(result.epoch_accuracies) == probe_config.epochs
        assert result.accuracy == max(result.epoch_accuracies)
        assert 0.0 <= result.accuracy <= 1.0

    def test_features_read_the_nsp_layer(self, make_model, vocab, datasets):
        model = make_model(mlm_layer=2, nsp_layer=1)
        sentences = datasets["sentence_length"].sentences[:5]
        features = sentence_features(model.encoder, vocab, sentences, layer=1, max_len=32)
        assert features.shape == (5, 8)
        top = sentence_features(model.encoder, vocab, sentences, layer=2, max_len=32)
        assert not np.allclose(features, top)

    def test_constant_features_cannot_beat_majority(self, make_model, vocab, datasets, probe_config):
        model = make_model()
        zero_init(model.encoder)
        for name in ("sentence_length", "bigram_shift_detection"):
            result = probe_run(model, vocab, datasets[name], probe_config)
            assert result.accuracy <= result.majority_rate + 1e-12

    def test_split_too_small_is_an_input_error(self, make_model, vocab, probe_config):
        words = ["cats", "see", "the", "ball"]
        dataset = ProbeDataset("sentence_length", [words[:k] for k in (2, 2, 3, 3, 4, 4)],
                               np.array([0, 0, 1, 1, 2, 2]), 3)
        with pytest.raises(InputError) as excinfo:
            probe_run(make_model(), vocab, dataset, probe_config)
        assert excinfo.value.exit_code == 3
        counts = excinfo.value.details["counts"]
        assert (counts["validation"], counts["train"], counts["classes"]) == (2, 4, 3)

    def test_single_member_class_is_an_input_error(self):
        dataset = ProbeDataset("bigram_shift_detection", [["a", "b"]] * 20, np.array([0] * 19 + [1]), 2)
        with pytest.raises(InputError) as excinfo:
            dataset.check_split(0.2)
        assert excinfo.value.details["counts"]["class_1"] == 1

    def test_six_sentence_corpus_is_rejected_before_training(self, probe_config):
        corpus = [["Cats see the ball today .", "Dogs like trees .", "Birds follow the long river ."],
                  ["Friends find houses .", "Teachers see the red apple again .", "Cats like the tree ."]]
        with pytest.raises(InputError) as excinfo:
            probe_datasets_for(corpus, 0, probe_config)
        assert excinfo.value.exit_code == 3


@pytest.mark.slow
def test_bigram_objective_helps_bigram_probe(corpus, vocab, encoder_config, data_config, probe_config):
    train_config = TrainConfig(phase="pretrain", total_steps=120, lr=5e-3, batch_size_short=8,
                               batch_size_long=4, dropout_p=0.0)
    data = data_config.model_copy(update={"bigram_prob": 0.3})
    results = compare_bigram_probe(corpus, vocab, encoder_config, train_config, data, [0, 1, 2], probe_config)
    assert len(results) == 3
    with_bigram = np.mean([r.with_bigram for r in results])
    without_bigram = np.mean([r.without_bigram for r in results])
    assert with_bigram >= without_bigram - 0.05
