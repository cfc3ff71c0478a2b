import numpy as np
import pytest
from pydantic import ValidationError

from hierbert.checkpoint import load_checkpoint, save_checkpoint
from hierbert.datapipe import build_finetune_examples, build_pretrain_examples, build_vocab
from hierbert.exceptions import ConcatModeError, ConfigurationError, NumericError
from hierbert.heads import ConcatMode, HeadPlacement
from hierbert.metrics import evaluate_qa
from hierbert.train import (
    FreezePolicy, PoolCursor, TrainConfig, apply_freeze, finetune, model_metadata, nsp_gradient_support,
    parameter_checksum, pretrain, resume_from_checkpoint,
)
from tests.conftest import OBJECTS, SUBJECTS, VERBS


def _config(total_steps=6, **overrides):
    values = dict(phase="pretrain", lr=5e-3, weight_decay=0.0, batch_size_short=4, batch_size_long=2,
                  dropout_p=0.0, total_steps=total_steps, log_every=100)
    values.update(overrides)
    return TrainConfig(**values)


def _run(model, pools, config, **kwargs):
    return pretrain(model, pools, config, short_len=16, long_len=24, short_fraction=0.5, **kwargs)


def _qa_records(count):
    records = []
    for i in range(count):
        subject, verb, obj = SUBJECTS[i % 5], VERBS[i % 4], OBJECTS[(i + i // 5) % 5]
        context = f"{subject.capitalize()} {verb} the {obj} today."
        if i % 2:
            question, answer = f"What do {subject} {verb}?", f"the {obj}"
        else:
            question, answer = f"Who can {verb} the {obj}?", subject.capitalize()
        records.append({"id": f"q{i}", "question": question, "context": context,
                        "answers": [{"text": answer, "answer_start": context.index(answer)}]})
    return records


class TestConfig:
    def test_phase_defaults(self):
        pre = TrainConfig(phase="pretrain")
        fine = TrainConfig(phase="finetune")
        assert (pre.lr, pre.weight_decay, pre.batch_size_short, pre.batch_size_long) == (1e-4, 1e-4, 32, 1)
        assert (fine.lr, fine.batch_size_short) == (1e-5, 1)
        assert TrainConfig(phase="finetune", lr=3e-5).lr == 3e-5

    def test_freeze_triggers(self):
        policy = FreezePolicy(enabled=True, fraction=0.5)
        assert not policy.triggered(4, 9, None)
        assert policy.triggered(5, 9, None)
        assert FreezePolicy(enabled=True, trigger="fixed_step", step=3).triggered(3, 10, None)
        threshold = FreezePolicy(enabled=True, trigger="nsp_loss_threshold", threshold=0.3)
        assert threshold.triggered(1, 10, 0.2) and not threshold.triggered(1, 10, 0.4)
        assert not FreezePolicy(enabled=False).triggered(10, 10, 0.0)

    def test_freeze_trigger_needs_value(self):
        with pytest.raises(ValidationError):
            FreezePolicy(enabled=True, trigger="fixed_step")


class TestCursor:
    def test_epoch_zero_in_order_then_permuted(self, pools):
        pool = pools[16][:5]
        cursor = PoolCursor(pool, 16, seed=0)
        first = cursor.batch(0, 5)
        assert first == pool
        second = cursor.batch(1, 5)
        assert sorted(id(e) for e in second) == sorted(id(e) for e in pool)
        assert cursor.wrapped

    def test_pure_function_of_step(self, pools):
        a = PoolCursor(pools[16], 16, seed=1).batch(30, 4)
        b = PoolCursor(pools[16], 16, seed=1).batch(30, 4)
        assert a == b


class TestPretrain:
    def test_loss_decreases_on_a_small_pool(self, make_model, pools):
        small = {16: pools[16][:4], 24: pools[24][:4]}
        result = _run(make_model(), small, _config(total_steps=80))
        losses = result.report.losses("total")
        assert len(losses) == 80
        assert np.mean(losses[-5:]) < 0.7 * losses[0]

    def test_length_schedule_in_report(self, make_model, pools):
        result = _run(make_model(), pools, _config(total_steps=5))
        assert [r.max_len for r in result.report.steps] == [16, 16, 16, 24, 24]

    def test_deterministic_with_dropout(self, make_model, pools):
        config = _config(dropout_p=0.1)
        a = _run(make_model(), pools, config).model.state_dict()
        b = _run(make_model(), pools, config).model.state_dict()
        assert parameter_checksum(a) == parameter_checksum(b)
        c = _run(make_model(seed=1), pools, config.model_copy(update={"seed": 1})).model.state_dict()
        assert parameter_checksum(c) != parameter_checksum(a)

    def test_non_finite_loss(self, make_model, pools):
        model = make_model()
        model.mlm_head.transform.weight.data[:] = np.nan
        with pytest.raises(NumericError):
            _run(model, pools, _config())

    def test_needs_total_steps(self, make_model, pools):
        with pytest.raises(ConfigurationError):
            _run(make_model(), pools, TrainConfig(phase="pretrain"))


class TestFreeze:
    def test_frozen_set(self, make_model):
        names = apply_freeze(make_model(mlm_layer=2, nsp_layer=1))
        assert "encoder.embeddings.token" in names
        assert "encoder.layers.0.query.weight" in names
        assert "nsp_head.classifier.bias" in names
        assert not any(n.startswith(("encoder.layers.1.", "mlm_head.")) for n in names)

    @pytest.mark.parametrize("concat", [ConcatMode.NONE, ConcatMode.NSP_OUTPUT])
    def test_frozen_set_is_nsp_gradient_support(self, make_model, batch, concat):
        model = make_model(mlm_layer=2, nsp_layer=1, concat=concat)
        assert apply_freeze(model) == nsp_gradient_support(model, batch)

    def test_frozen_parameters_stop_changing(self, make_model, pools):
        model = make_model(mlm_layer=2, nsp_layer=1)
        policy = FreezePolicy(enabled=True, fraction=0.5)
        snapshots = {}
        result = _run(model, pools, _config(total_steps=6), freeze=policy,
                      on_step=lambda step, m: snapshots.setdefault(step, m.state_dict()))
        assert result.report.freeze_step == 3
        frozen = result.frozen
        final = result.model.state_dict()
        at_freeze = snapshots[2]
        for name in frozen:
            np.testing.assert_array_equal(final[name], at_freeze[name])
        assert not np.array_equal(final["encoder.layers.1.query.weight"], at_freeze["encoder.layers.1.query.weight"])
        assert not np.array_equal(final["mlm_head.decoder.weight"], at_freeze["mlm_head.decoder.weight"])
        assert [r.frozen for r in result.report.steps] == [False, False, False, True, True, True]

    def test_freeze_needs_nsp_head(self, make_model, pools):
        with pytest.raises(ConfigurationError):
            _run(make_model(nsp_enabled=False), pools, _config(), freeze=FreezePolicy(enabled=True))


class TestResume:
    def test_resumed_run_matches_uninterrupted(self, make_model, pools, tmp_path):
        config = _config(total_steps=6, dropout_p=0.1, checkpoint_every=3)
        policy = FreezePolicy(enabled=True, trigger="fixed_step", step=2)
        full = _run(make_model(mlm_layer=2, nsp_layer=1), pools, config, freeze=policy,
                    checkpoint_dir=tmp_path / "steps")
        assert [p.name for p in full.checkpoints] == ["step_000003", "step_000006"]

        checkpoint = load_checkpoint(tmp_path / "steps" / "step_000003")
        assert checkpoint.step == 3
        assert checkpoint.frozen
        model, optimizer = resume_from_checkpoint(checkpoint, config)
        resumed = _run(model, pools, config, freeze=policy, start_step=3, optimizer=optimizer)
        assert parameter_checksum(resumed.model.state_dict()) == parameter_checksum(full.model.state_dict())


class TestFinetune:
    @pytest.fixture
    def qa_examples(self, qa_records, vocab):
        return build_finetune_examples("qa", qa_records, vocab, max_len=32).examples

    @pytest.fixture
    def pretrained(self, make_model, tmp_path):
        model = make_model(mlm_layer=2, nsp_layer=1)
        return load_checkpoint(save_checkpoint(tmp_path / "ckpt", model, None, {}, 0, model_metadata(model)))

    def test_zero_learning_rate_keeps_pretrained_encoder(self, pretrained, qa_examples):
        config = TrainConfig(phase="finetune", lr=0.0, epochs=1, batch_size_short=2, dropout_p=0.0)
        result = finetune(pretrained, "qa", qa_examples, config, ConcatMode.CLS_EMBEDDING)
        for name, value in result.model.encoder.state_dict().items():
            np.testing.assert_array_equal(value, pretrained.parameters[f"encoder.{name}"])
        assert len(result.report.steps) == 2

    def test_training_changes_encoder(self, pretrained, qa_examples):
        config = TrainConfig(phase="finetune", lr=1e-2, epochs=2, batch_size_short=2)
        result = finetune(pretrained, "qa", qa_examples, config)
        changed = result.model.encoder.state_dict()["layers.0.query.weight"]
        assert not np.array_equal(changed, pretrained.parameters["encoder.layers.0.query.weight"])

    def test_from_scratch(self, encoder_config, qa_examples):
        config = TrainConfig(phase="finetune", epochs=1, batch_size_short=4)
        result = finetune(None, "qa", qa_examples, config, from_scratch=True, encoder_config=encoder_config,
                          placement=HeadPlacement(mlm_layer=2, nsp_layer=2))
        assert len(result.report.steps) == 1

    def test_requests_rejected_before_training(self, make_model, pretrained, qa_examples, tmp_path):
        config = TrainConfig(phase="finetune")
        with pytest.raises(ConcatModeError):
            finetune(pretrained, "nli", qa_examples, config, ConcatMode.CLS_EMBEDDING)
        with pytest.raises(ConfigurationError):
            finetune(None, "qa", qa_examples, config)
        no_nsp = make_model(nsp_enabled=False)
        checkpoint = load_checkpoint(save_checkpoint(tmp_path / "no_nsp", no_nsp, None, {}, 0,
                                                     model_metadata(no_nsp)))
        with pytest.raises(ConcatModeError):
            finetune(checkpoint, "qa", qa_examples, config, ConcatMode.NSP_OUTPUT)


VARIANT_MODELS = {
    "bert_baseline": dict(mlm_layer=2, nsp_layer=2),
    "lower_nsp": dict(mlm_layer=2, nsp_layer=1),
    "lower_mask": dict(mlm_layer=1, nsp_layer=2),
    "bigram_shift": dict(mlm_layer=2, nsp_layer=2, bigram=True),
    "without_nsp": dict(mlm_layer=2, nsp_layer=2, nsp_enabled=False),
}


@pytest.mark.slow
class TestOverfit:
    @pytest.mark.parametrize("variant", sorted(VARIANT_MODELS))
    def test_every_variant_memorises_a_small_corpus(self, variant, make_model, corpus, vocab, data_config):
        kwargs = VARIANT_MODELS[variant]
        built = build_pretrain_examples(corpus, vocab, data_config, seed=0, bigram_shift=kwargs.get("bigram", False))
        small = {length: pool[:32] for length, pool in built.items()}
        result = _run(make_model(**kwargs), small, _config(total_steps=500, batch_size_short=8, batch_size_long=8))
        losses = result.report.losses("total")
        assert len(losses) == 500
        assert min(losses) < 0.1 * losses[0]

    def test_qa_reaches_full_exact_match_on_its_training_set(self, encoder_config):
        records = _qa_records(16)
        vocab = build_vocab([[r["question"], r["context"]] for r in records])
        built = build_finetune_examples("qa", records, vocab, max_len=32)
        assert built.skipped == 0 and len(built.examples) == 16
        config = TrainConfig(phase="finetune", lr=5e-3, epochs=150, batch_size_short=4, dropout_p=0.0,
                             log_every=1000)
        result = finetune(None, "qa", built.examples, config, from_scratch=True, encoder_config=encoder_config,
                          placement=HeadPlacement(mlm_layer=2, nsp_layer=2))
        scores = evaluate_qa(result.model, built.examples)
        assert scores.exact_match == 100.0
        assert scores.f1 == 100.0
