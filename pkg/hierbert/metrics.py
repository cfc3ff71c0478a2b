"""
Span decoding and QA / NLI metrics.

Answer normalisation follows the usual SQuAD rules: lowercase, drop
punctuation, drop articles, collapse whitespace. An empty gold list marks an
impossible question.
"""

import logging
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, model_validator

from hierbert.datapipe import FinetuneBatch, FinetuneExample

logger = logging.getLogger(__name__)

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(s: str) -> str:
    s = "".join(ch for ch in s.lower() if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def answer_tokens(text: Optional[str]) -> Optional[List[str]]:
    return None if text is None else normalize_answer(text).split()


class SpanPrediction(BaseModel):
    start: int = 0
    end: int = 0
    impossible: bool = False
    score: float = 0.0

    @model_validator(mode="after")
    def ordered(self):
        if self.start > self.end:
            raise ValueError(f"span start {self.start} after end {self.end}")
        return self


def decode_span(start_logits: np.ndarray, end_logits: np.ndarray, context_start: int, context_end: int,
                max_answer_len: Optional[int] = 30, null_threshold: float = 0.0) -> SpanPrediction:
    """
    Best (start, end) with start <= end inside [context_start, context_end],
    scored start_logit + end_logit. The [CLS] pair (0, 0) wins, making the
    prediction impossible, when its score beats the best span by more than
    `null_threshold`.
    """
    start_logits = np.asarray(start_logits, dtype=np.float64)
    end_logits = np.asarray(end_logits, dtype=np.float64)
    null_score = float(start_logits[0] + end_logits[0])
    if context_end < context_start:
        return SpanPrediction(impossible=True, score=null_score)

    s = start_logits[context_start:context_end + 1]
    e = end_logits[context_start:context_end + 1]
    scores = s[:, None] + e[None, :]
    n = len(s)
    valid = np.triu(np.ones((n, n), dtype=bool))
    if max_answer_len is not None:
        valid &= ~np.triu(np.ones((n, n), dtype=bool), k=max_answer_len)
    scores = np.where(valid, scores, -np.inf)
    i, j = np.unravel_index(int(np.argmax(scores)), scores.shape)
    best = float(scores[i, j])

    if null_score > best + null_threshold:
        return SpanPrediction(impossible=True, score=null_score)
    return SpanPrediction(start=context_start + int(i), end=context_start + int(j), score=best)


def prediction_text(pred: SpanPrediction, example: FinetuneExample) -> Optional[str]:
    return None if pred.impossible else example.span_text(pred.start, pred.end)


# ============ Text-level metrics ============

def exact_match_text(pred_text: Optional[str], gold_answers: Sequence[str]) -> int:
    if pred_text is None or not gold_answers:
        return int(pred_text is None and not gold_answers)
    pred = normalize_answer(pred_text)
    return int(any(pred == normalize_answer(g) for g in gold_answers))


def f1_overlap(pred_tokens: Optional[List[str]], gold_tokens: Optional[List[str]]) -> float:
    """Bag-of-tokens F1; None stands for an impossible answer"""
    if pred_tokens is None or gold_tokens is None:
        return float(pred_tokens is None and gold_tokens is None)
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    same = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if same == 0:
        return 0.0
    precision = same / len(pred_tokens)
    recall = same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1_text(pred_text: Optional[str], gold_answers: Sequence[str]) -> float:
    if not gold_answers:
        return f1_overlap(answer_tokens(pred_text), None)
    return max(f1_overlap(answer_tokens(pred_text), answer_tokens(g)) for g in gold_answers)


# ============ Span-level metrics ============

def exact_match(pred: SpanPrediction, gold_answers: Sequence[str], example: FinetuneExample) -> int:
    return exact_match_text(prediction_text(pred, example), gold_answers)


def span_f1(pred: SpanPrediction, gold_answers: Sequence[str], example: FinetuneExample) -> float:
    return f1_text(prediction_text(pred, example), gold_answers)


# ============ Model evaluation ============

@dataclass
class QaEvaluation:
    exact_match: float
    f1: float
    predictions: List[SpanPrediction] = field(default_factory=list)


def evaluate_qa(model, examples: Sequence[FinetuneExample], batch_size: int = 16,
                max_answer_len: Optional[int] = 30, null_threshold: float = 0.0) -> QaEvaluation:
    """Mean EM and F1 (x100) of a QA fine-tuned model"""
    ems, f1s, predictions = [], [], []
    for i in range(0, len(examples), batch_size):
        chunk = list(examples[i:i + batch_size])
        start, end = model.qa_logits(FinetuneBatch.from_examples(chunk))
        for row, example in enumerate(chunk):
            pred = decode_span(start.data[row], end.data[row], example.context_start, example.context_end,
                               max_answer_len, null_threshold)
            predictions.append(pred)
            ems.append(exact_match(pred, example.gold_answers, example))
            f1s.append(span_f1(pred, example.gold_answers, example))
    if not predictions:
        return QaEvaluation(exact_match=0.0, f1=0.0)
    return QaEvaluation(exact_match=100.0 * float(np.mean(ems)), f1=100.0 * float(np.mean(f1s)),
                        predictions=predictions)


def evaluate_nli(model, examples: Sequence[FinetuneExample], batch_size: int = 16) -> float:
    """Accuracy (x100) of an NLI fine-tuned model"""
    correct = 0
    for i in range(0, len(examples), batch_size):
        batch = FinetuneBatch.from_examples(list(examples[i:i + batch_size]))
        logits = model.nli_logits(batch)
        correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
    return 100.0 * correct / max(len(examples), 1)
