import numpy as np
import pytest
from pydantic import ValidationError

from hierbert.datapipe import build_finetune_examples
from hierbert.metrics import (
    SpanPrediction, decode_span, evaluate_qa, exact_match, exact_match_text, f1_overlap, f1_text,
    normalize_answer, span_f1,
)
from hierbert.tensor import Tensor


def _brute_force(start, end, lo, hi, max_len):
    best, best_score = None, -np.inf
    for i in range(lo, hi + 1):
        for j in range(i, min(hi, i + max_len - 1) + 1):
            if start[i] + end[j] > best_score:
                best, best_score = (i, j), start[i] + end[j]
    return best, best_score


class TestNormalisation:
    def test_rules(self):
        assert normalize_answer("The  Cat, sat!") == "cat sat"
        assert normalize_answer("An apple a day") == "apple day"

    def test_exact_match(self):
        assert exact_match_text("the Ball.", ["ball", "a tree"]) == 1
        assert exact_match_text("tree house", ["ball"]) == 0
        assert exact_match_text(None, []) == 1
        assert exact_match_text(None, ["ball"]) == 0
        assert exact_match_text("ball", []) == 0

    def test_f1(self):
        assert f1_text("the cat sat", ["cat sat down"]) == pytest.approx(0.8)
        assert f1_text("dog", ["cat"]) == 0.0
        assert f1_text("cat", ["dog", "the cat"]) == 1.0
        assert f1_text(None, []) == 1.0
        assert f1_overlap(None, ["cat"]) == 0.0
        assert f1_overlap(["cat", "cat"], ["cat"]) == pytest.approx(2 / 3)


class TestDecodeSpan:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            start, end = rng.normal(size=20), rng.normal(size=20)
            lo, hi = 4, 18
            pred = decode_span(start, end, lo, hi, max_answer_len=5, null_threshold=np.inf)
            (i, j), score = _brute_force(start, end, lo, hi, 5)
            assert (pred.start, pred.end) == (i, j)
            assert pred.score == pytest.approx(score)
            assert not pred.impossible

    def test_null_prediction(self):
        start = np.array([5.0, 0.1, 0.2, 0.3])
        end = np.array([5.0, 0.1, 0.2, 0.3])
        pred = decode_span(start, end, 1, 3)
        assert pred.impossible
        assert not decode_span(start, end, 1, 3, null_threshold=20.0).impossible

    def test_start_not_after_end(self):
        with pytest.raises(ValidationError):
            SpanPrediction(start=4, end=3)


class _OracleModel:
    """Logits that peak at each example's gold span"""

    def __init__(self, examples):
        self.examples = {tuple(e.token_ids): e for e in examples}

    def qa_logits(self, batch):
        start = np.full(batch.token_ids.shape, -5.0)
        end = np.full(batch.token_ids.shape, -5.0)
        for row, ids in enumerate(batch.token_ids):
            example = self.examples[tuple(ids)]
            start[row, example.start] = 5.0
            end[row, example.end] = 5.0
        return Tensor(start), Tensor(end)


def test_evaluate_qa_with_gold_spans(qa_records, vocab):
    examples = build_finetune_examples("qa", qa_records, vocab, max_len=32).examples
    result = evaluate_qa(_OracleModel(examples), examples, batch_size=3)
    assert result.exact_match == 100.0
    assert result.f1 == 100.0
    assert [p.impossible for p in result.predictions] == [False, False, False, True]


def test_span_level_metrics(qa_records, vocab):
    example = build_finetune_examples("qa", qa_records, vocab, max_len=32).examples[0]
    whole = SpanPrediction(start=example.context_start, end=example.context_end)
    assert exact_match(whole, example.gold_answers, example) == 0
    assert span_f1(whole, example.gold_answers, example) == pytest.approx(0.4)


WORDS = ["cat", "Cat", "dog", "DOG", "ball", "tree", "red", "the", "The", "a", "an", "ball,", "tree.", "!"]


def _phrase(rng):
    return " ".join(rng.choice(WORDS, size=int(rng.integers(0, 6))))


def _bag(text):
    tokens = []
    for word in text.split():
        word = "".join(ch for ch in word.lower() if ch.isalnum())
        if word and word not in ("a", "an", "the"):
            tokens.append(word)
    return tokens


def _bag_f1(pred, gold):
    if not pred or not gold:
        return float(pred == gold)
    common = sum(min(pred.count(token), gold.count(token)) for token in set(pred))
    if common == 0:
        return 0.0
    precision, recall = common / len(pred), common / len(gold)
    return 2 * precision * recall / (precision + recall)


def _bag_scores(pred_text, golds):
    if pred_text is None or not golds:
        both = float(pred_text is None and not golds)
        return both, both
    pred = _bag(pred_text)
    return (max(float(pred == _bag(g)) for g in golds),
            max(_bag_f1(pred, _bag(g)) for g in golds))


def _random_case(rng):
    golds = [] if rng.random() < 0.2 else [_phrase(rng) for _ in range(int(rng.integers(1, 4)))]
    r = rng.random()
    if r < 0.2:
        pred = None
    elif r < 0.45 and golds:
        pred = golds[int(rng.integers(len(golds)))].upper() + " ."
    else:
        pred = _phrase(rng)
    return pred, golds


class TestAgainstBagOverlap:
    def test_random_pairs_match_token_counting(self):
        rng = np.random.default_rng(5)
        impossible = matched = 0
        for _ in range(1000):
            pred, golds = _random_case(rng)
            em, f1 = _bag_scores(pred, golds)
            assert exact_match_text(pred, golds) == em, (pred, golds)
            assert f1_text(pred, golds) == pytest.approx(f1, abs=1e-12), (pred, golds)
            impossible += not golds
            matched += em == 1.0
        assert impossible > 100
        assert matched > 100

    def test_f1_is_symmetric(self):
        rng = np.random.default_rng(6)
        for _ in range(500):
            a = None if rng.random() < 0.1 else _bag(_phrase(rng))
            b = None if rng.random() < 0.1 else _bag(_phrase(rng))
            assert f1_overlap(a, b) == pytest.approx(f1_overlap(b, a), abs=1e-15)

    def test_f1_never_below_exact_match(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            pred, golds = _random_case(rng)
            assert f1_text(pred, golds) >= exact_match_text(pred, golds)
