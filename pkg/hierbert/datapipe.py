"""
Pre-training and fine-tuning example construction.

Everything here is a pure function of (input, seed): each pair index owns its
own named random streams, so the short and long versions of a pair receive the
same corruption and example files are byte-identical across runs.
"""

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from hierbert.exceptions import InputError, ParameterError, SpanNotFoundError
from hierbert.streams import make_stream

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
NUM_SPECIAL = len(SPECIAL_TOKENS)
IGNORE_INDEX = -100

IS_NEXT, NOT_NEXT = 0, 1
IN_PLACE, DISPLACED = 0, 1
NLI_LABELS = ["entailment", "contradiction", "neutral"]

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

Document = List[str]


# ============ Tokenisation and vocabulary ============

def tokenize(text: str) -> List[str]:
    """Lowercased words and single punctuation marks"""
    return [m.group(0).lower() for m in _TOKEN_RE.finditer(text)]


def tokenize_with_offsets(text: str) -> List[Tuple[str, int, int]]:
    return [(m.group(0).lower(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


class Vocab:
    """Token/id map with the special tokens pinned to ids 0..4"""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str):
        return token in self.index

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    @property
    def checksum(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path: Path):
        Path(path).write_text(json.dumps({"tokens": self.tokens}, ensure_ascii=False, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "Vocab":
        tokens = json.loads(Path(path).read_text(encoding="utf-8"))["tokens"]
        return cls(tokens[NUM_SPECIAL:])


def build_vocab(corpus: Sequence[Document], min_freq: int = 1, max_size: Optional[int] = None) -> Vocab:
    """
    Frequency-ordered vocabulary (count desc, then lexicographic).

    Tokens seen fewer than `min_freq` times are left out and encode as [UNK].
    """
    counts: Dict[str, int] = {}
    for document in corpus:
        for sentence in document:
            for token in tokenize(sentence):
                counts[token] = counts.get(token, 0) + 1
    if not counts:
        raise InputError("Cannot build a vocabulary from an empty corpus", {"tokens": 0})
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    if max_size is not None:
        kept = kept[:max(0, max_size - NUM_SPECIAL)]
    vocab = Vocab(kept)
    logger.info(f"Vocabulary built: {len(vocab)} entries from {len(counts)} distinct tokens (min_freq={min_freq})")
    return vocab


def read_corpus(path: Path) -> List[Document]:
    """Blank-line-separated paragraphs, one sentence per line"""
    documents: List[Document] = []
    current: Document = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line:
            current.append(line)
        elif current:
            documents.append(current)
            current = []
    if current:
        documents.append(current)
    return documents


# ============ Pre-training examples ============

class DataConfig(BaseModel):
    min_freq: int = Field(1, ge=1)
    max_vocab: int = Field(2048, ge=NUM_SPECIAL + 1)
    short_len: int = Field(128, ge=8)
    long_len: int = Field(384, ge=8)
    short_fraction: float = Field(0.9, gt=0.0, le=1.0)
    mask_prob: float = Field(0.15, gt=0.0, lt=1.0)
    bigram_prob: float = Field(0.15, ge=0.0, le=1.0)
    bigram_mode: Literal["per_bigram", "per_input"] = "per_bigram"
    qa_max_len: int = Field(384, ge=8)
    nli_max_len: int = Field(128, ge=8)


class PretrainExample(BaseModel):
    token_ids: List[int]
    segment_ids: List[int]
    attention_mask: List[int]
    mlm_labels: List[int]
    nsp_label: int
    bigram_labels: List[int]
    max_len: int
    bigram_swaps: List[int] = []

    def content_positions(self) -> List[int]:
        """Positions holding sentence tokens (not [CLS], [SEP] or padding)"""
        return [
            i for i, (tok, keep) in enumerate(zip(self.token_ids, self.attention_mask))
            if keep and tok not in (CLS, SEP, PAD)
        ]

    def segment_runs(self) -> List[Tuple[int, int]]:
        """Half-open [start, end) ranges of sentence A and sentence B"""
        seps = [i for i, tok in enumerate(self.token_ids) if tok == SEP]
        if len(seps) < 2:
            return [(1, seps[0])] if seps else []
        return [(1, seps[0]), (seps[0] + 1, seps[1])]


@dataclass
class NspPair:
    sentence_a: List[int]
    sentence_b: List[int]
    label: int
    document: int
    position: int


class NspPairStream:
    """
    Consecutive sentence pairs, half of them with sentence B swapped for a
    sentence of another document.

    Documents with fewer than two sentences only serve as random-B sources.
    With a single source document no negative can be drawn: every pair is
    is_next and `imbalanced` is set.
    """

    def __init__(self, documents: Sequence[Sequence], rng: np.random.Generator):
        self.documents = documents
        self.rng = rng
        self.sources = [d for d, doc in enumerate(documents) if len(doc) > 0]
        self.imbalanced = len(self.sources) < 2
        self.counts = {"is_next": 0, "not_next": 0}
        if self.imbalanced:
            logger.warning("Single-document corpus: NSP pairs will all be is_next")

    def _other_document(self, d: int) -> int:
        if d in self.sources:
            pos = self.sources.index(d)
            j = int(self.rng.integers(len(self.sources) - 1))
            return self.sources[j + 1 if j >= pos else j]
        return self.sources[int(self.rng.integers(len(self.sources)))]

    def __iter__(self) -> Iterator[NspPair]:
        docs, rng = self.documents, self.rng
        for d, doc in enumerate(docs):
            for i in range(len(doc) - 1):
                if not self.imbalanced and rng.random() < 0.5:
                    other = docs[self._other_document(d)]
                    sentence_b, label = other[int(rng.integers(len(other)))], NOT_NEXT
                    self.counts["not_next"] += 1
                else:
                    sentence_b, label = doc[i + 1], IS_NEXT
                    self.counts["is_next"] += 1
                yield NspPair(list(doc[i]), list(sentence_b), label, d, i)


def make_nsp_pairs(documents: Sequence[Sequence], rng: np.random.Generator) -> NspPairStream:
    return NspPairStream(documents, rng)


def truncate_pair(a: List[int], b: List[int], budget: int) -> Tuple[List[int], List[int]]:
    """Drop trailing tokens from the longer sentence until both fit in `budget`"""
    a, b = list(a), list(b)
    while len(a) + len(b) > budget:
        if len(a) > len(b):
            a.pop()
        else:
            b.pop()
    return a, b


def build_pretrain_example(sentence_a: List[int], sentence_b: List[int], nsp_label: int,
                           max_len: int) -> PretrainExample:
    """[CLS] A [SEP] B [SEP] padded to max_len; no corruption applied yet"""
    a, b = truncate_pair(sentence_a, sentence_b, max_len - 3)
    tokens = [CLS] + a + [SEP] + b + [SEP]
    segments = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    n_pad = max_len - len(tokens)
    content = [0] + [1] * len(a) + [0] + [1] * len(b) + [0] + [0] * n_pad
    return PretrainExample(
        token_ids=tokens + [PAD] * n_pad,
        segment_ids=segments + [0] * n_pad,
        attention_mask=[1] * len(tokens) + [0] * n_pad,
        mlm_labels=[IGNORE_INDEX] * max_len,
        nsp_label=nsp_label,
        bigram_labels=[IN_PLACE if c else IGNORE_INDEX for c in content],
        max_len=max_len,
    )


def masked_count(num_eligible: int, rng: np.random.Generator, mask_prob: float = 0.15) -> int:
    """
    floor(p·n) positions plus one more with probability frac(p·n), at least one.

    The expectation is exactly p·n whenever p·n >= 1 (n >= 7 at p = 0.15);
    below that the minimum of one lifts the rate to 1/n.
    """
    if num_eligible <= 0:
        return 0
    expected = mask_prob * num_eligible
    count = int(math.floor(expected))
    if rng.random() < expected - count:
        count += 1
    return min(num_eligible, max(1, count))


def apply_masking(example: PretrainExample, rng: np.random.Generator, vocab_size: int,
                  mask_prob: float = 0.15) -> PretrainExample:
    """
    Select `masked_count` eligible positions uniformly without replacement;
    selected tokens become [MASK] 80%, a random token 10%, unchanged 10%.
    Labels keep the original id at selected positions.
    """
    eligible = example.content_positions()
    tokens = list(example.token_ids)
    labels = [IGNORE_INDEX] * len(tokens)
    if not eligible:
        return example.model_copy(update={"mlm_labels": labels})

    count = masked_count(len(eligible), rng, mask_prob)
    picks = np.sort(rng.choice(len(eligible), size=count, replace=False))
    for pos in (eligible[int(i)] for i in picks):
        labels[pos] = tokens[pos]
        r = rng.random()
        if r < 0.8:
            tokens[pos] = MASK
        elif r < 0.9:
            tokens[pos] = int(rng.integers(NUM_SPECIAL, vocab_size))
    return example.model_copy(update={"token_ids": tokens, "mlm_labels": labels})


def bigram_candidates(example: PretrainExample) -> List[int]:
    """Left indices of non-overlapping adjacent pairs inside each sentence"""
    starts = []
    for begin, end in example.segment_runs():
        starts.extend(range(begin, end - 1, 2))
    return starts


def _swap(values: List[int], i: int):
    values[i], values[i + 1] = values[i + 1], values[i]


def apply_bigram_shift(example: PretrainExample, rng: np.random.Generator, swap_prob: float = 0.15,
                       mode: str = "per_bigram", forced: Optional[Sequence[int]] = None) -> PretrainExample:
    """
    Swap adjacent token pairs and label both members displaced.

    `per_bigram` swaps every candidate pair independently with `swap_prob`;
    `per_input` swaps one random candidate with probability `swap_prob`.
    `forced` bypasses sampling with explicit left indices. A swapped token
    carries its masked-LM label along.
    """
    if not 0.0 <= swap_prob <= 1.0:
        raise ParameterError("bigram_prob", swap_prob, "[0, 1]")
    candidates = bigram_candidates(example)
    if forced is not None:
        swaps = list(forced)
    elif mode == "per_bigram":
        swaps = [c for c, u in zip(candidates, rng.random(len(candidates))) if u < swap_prob]
    elif mode == "per_input":
        swaps = [candidates[int(rng.integers(len(candidates)))]] if candidates and rng.random() < swap_prob else []
    else:
        raise ParameterError("bigram_mode", mode, "{per_bigram, per_input}")

    tokens, mlm = list(example.token_ids), list(example.mlm_labels)
    labels = list(example.bigram_labels)
    for i in swaps:
        _swap(tokens, i)
        _swap(mlm, i)
        labels[i] = labels[i + 1] = DISPLACED
    return example.model_copy(update={
        "token_ids": tokens, "mlm_labels": mlm, "bigram_labels": labels, "bigram_swaps": swaps,
    })


def restore_bigram_order(example: PretrainExample) -> PretrainExample:
    """Re-apply the recorded swaps, which undoes them"""
    tokens, mlm = list(example.token_ids), list(example.mlm_labels)
    for i in example.bigram_swaps:
        _swap(tokens, i)
        _swap(mlm, i)
    return example.model_copy(update={"token_ids": tokens, "mlm_labels": mlm})


def length_schedule(step: int, total_steps: int, short_len: int = 128, long_len: int = 384,
                    short_fraction: float = 0.9) -> int:
    """The first ceil(short_fraction * total) steps use short_len, the rest long_len"""
    if not 0 <= step < total_steps:
        raise ParameterError("step", step, f"[0, {total_steps})")
    return short_len if step < short_step_count(total_steps, short_fraction) else long_len


def short_step_count(total_steps: int, short_fraction: float = 0.9) -> int:
    frac = Fraction(short_fraction).limit_denominator(10_000)
    return -(-total_steps * frac.numerator // frac.denominator)


def build_pretrain_examples(documents: Sequence[Document], vocab: Vocab, config: DataConfig, seed: int,
                            bigram_shift: bool = False) -> Dict[int, List[PretrainExample]]:
    """
    Example pools keyed by max_len (short and long).

    Pair j draws its masking and bigram corruption from streams named after j,
    so both pools carry identical corruption wherever truncation allows.
    """
    encoded = [[vocab.encode(tokenize(s)) for s in doc] for doc in documents]
    encoded = [[s for s in doc if s] for doc in encoded]
    pairs = list(make_nsp_pairs(encoded, make_stream(seed, "nsp_pairs")))
    if not pairs:
        raise InputError("Corpus yields no sentence pairs", {"documents": len(documents)})

    pools: Dict[int, List[PretrainExample]] = {}
    for max_len in sorted({config.short_len, config.long_len}):
        pool = []
        for j, pair in enumerate(pairs):
            example = build_pretrain_example(pair.sentence_a, pair.sentence_b, pair.label, max_len)
            example = apply_masking(example, make_stream(seed, "mask", j), len(vocab), config.mask_prob)
            if bigram_shift:
                example = apply_bigram_shift(example, make_stream(seed, "bigram", j),
                                             config.bigram_prob, config.bigram_mode)
            pool.append(example)
        pools[max_len] = pool
    logger.info(f"Built {len(pairs)} sentence pairs per pool for lengths {sorted(pools)}")
    return pools


@dataclass
class PretrainBatch:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    mlm_labels: np.ndarray
    nsp_labels: np.ndarray
    bigram_labels: np.ndarray

    @classmethod
    def from_examples(cls, examples: Sequence[PretrainExample]) -> "PretrainBatch":
        lengths = {e.max_len for e in examples}
        if len(lengths) != 1:
            raise InputError("Batch mixes sequence lengths", {str(n): 1 for n in sorted(lengths)})
        return cls(
            token_ids=np.array([e.token_ids for e in examples], dtype=np.int64),
            segment_ids=np.array([e.segment_ids for e in examples], dtype=np.int64),
            attention_mask=np.array([e.attention_mask for e in examples], dtype=bool),
            mlm_labels=np.array([e.mlm_labels for e in examples], dtype=np.int64),
            nsp_labels=np.array([e.nsp_label for e in examples], dtype=np.int64),
            bigram_labels=np.array([e.bigram_labels for e in examples], dtype=np.int64),
        )

    def __len__(self):
        return self.token_ids.shape[0]


# ============ Fine-tuning examples ============

class QaAnswer(BaseModel):
    text: str
    answer_start: int


class QaRecord(BaseModel):
    id: str
    question: str
    context: str
    answers: List[QaAnswer] = []
    is_impossible: bool = False


class NliRecord(BaseModel):
    id: str
    premise: str
    hypothesis: str
    label: Literal["entailment", "contradiction", "neutral"]


class FinetuneExample(BaseModel):
    id: str
    task: Literal["qa", "nli"]
    token_ids: List[int]
    segment_ids: List[int]
    attention_mask: List[int]
    start: int = 0
    end: int = 0
    impossible: bool = False
    label: Optional[int] = None
    context: str = ""
    context_start: int = 0
    context_end: int = 0
    context_offsets: List[Tuple[int, int]] = []
    gold_answers: List[str] = []

    def span_text(self, start: int, end: int) -> str:
        """Original context text covered by sequence positions start..end"""
        first = self.context_offsets[start - self.context_start]
        last = self.context_offsets[end - self.context_start]
        return self.context[first[0]:last[1]]


@dataclass
class FinetuneExampleSet:
    examples: List[FinetuneExample]
    skipped: int = 0


def _pad(ids: List[int], segments: List[int], max_len: int) -> Tuple[List[int], List[int], List[int]]:
    n_pad = max_len - len(ids)
    return ids + [PAD] * n_pad, segments + [0] * n_pad, [1] * len(ids) + [0] * n_pad


def _qa_example(record: QaRecord, vocab: Vocab, max_len: int) -> FinetuneExample:
    question = vocab.encode(tokenize(record.question))[: max_len // 2]
    pieces = tokenize_with_offsets(record.context)
    room = max_len - 3 - len(question)
    pieces = pieces[:room]
    offset = len(question) + 2
    ids = [CLS] + question + [SEP] + vocab.encode(p[0] for p in pieces) + [SEP]
    segments = [0] * offset + [1] * (len(pieces) + 1)
    token_ids, segment_ids, mask = _pad(ids, segments, max_len)

    start = end = 0
    gold = [a.text for a in record.answers]
    if not record.is_impossible:
        if not record.answers:
            raise SpanNotFoundError("")
        answer = record.answers[0]
        a_start, a_end = answer.answer_start, answer.answer_start + len(answer.text)
        covering = [i for i, (_, s, e) in enumerate(pieces) if e > a_start and s < a_end]
        if not covering or tokenize(answer.text) != [pieces[i][0] for i in covering]:
            raise SpanNotFoundError(answer.text)
        start, end = covering[0] + offset, covering[-1] + offset

    return FinetuneExample(
        id=record.id, task="qa", token_ids=token_ids, segment_ids=segment_ids, attention_mask=mask,
        start=start, end=end, impossible=record.is_impossible, context=record.context,
        context_start=offset, context_end=offset + len(pieces) - 1,
        context_offsets=[(s, e) for _, s, e in pieces], gold_answers=[] if record.is_impossible else gold,
    )


def _nli_example(record: NliRecord, vocab: Vocab, max_len: int) -> FinetuneExample:
    premise, hypothesis = truncate_pair(vocab.encode(tokenize(record.premise)),
                                        vocab.encode(tokenize(record.hypothesis)), max_len - 3)
    ids = [CLS] + premise + [SEP] + hypothesis + [SEP]
    segments = [0] * (len(premise) + 2) + [1] * (len(hypothesis) + 1)
    token_ids, segment_ids, mask = _pad(ids, segments, max_len)
    return FinetuneExample(
        id=record.id, task="nli", token_ids=token_ids, segment_ids=segment_ids, attention_mask=mask,
        label=NLI_LABELS.index(record.label),
    )


def build_finetune_examples(task: str, records: Iterable, vocab: Vocab, max_len: int = 384) -> FinetuneExampleSet:
    """
    QA: [CLS] question [SEP] context [SEP] with the answer's character span
    mapped to token positions; impossible questions point at [CLS] (0, 0).
    NLI: [CLS] premise [SEP] hypothesis [SEP].
    Records whose answer does not survive tokenisation are skipped and counted.
    """
    result = FinetuneExampleSet(examples=[])
    for raw in records:
        if task == "qa":
            record = raw if isinstance(raw, QaRecord) else QaRecord.model_validate(raw)
            try:
                result.examples.append(_qa_example(record, vocab, max_len))
            except SpanNotFoundError as e:
                result.skipped += 1
                logger.debug(f"Skipping {record.id}: {e.message}")
        elif task == "nli":
            record = raw if isinstance(raw, NliRecord) else NliRecord.model_validate(raw)
            result.examples.append(_nli_example(record, vocab, max_len))
        else:
            raise ParameterError("task", task, "{qa, nli}")
    if result.skipped:
        logger.warning(f"{result.skipped} {task} records skipped: answer span lost in tokenisation")
    return result


@dataclass
class FinetuneBatch:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    starts: np.ndarray
    ends: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_examples(cls, examples: Sequence[FinetuneExample]) -> "FinetuneBatch":
        return cls(
            token_ids=np.array([e.token_ids for e in examples], dtype=np.int64),
            segment_ids=np.array([e.segment_ids for e in examples], dtype=np.int64),
            attention_mask=np.array([e.attention_mask for e in examples], dtype=bool),
            starts=np.array([e.start for e in examples], dtype=np.int64),
            ends=np.array([e.end for e in examples], dtype=np.int64),
            labels=np.array([-100 if e.label is None else e.label for e in examples], dtype=np.int64),
        )

    def __len__(self):
        return self.token_ids.shape[0]


# ============ Example files ============

def canonical_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_examples(path: Path, examples: Sequence[BaseModel]) -> str:
    """One JSON record per line; returns the file's SHA-256"""
    text = "".join(canonical_json(e.model_dump(mode="json")) + "\n" for e in examples)
    Path(path).write_text(text, encoding="utf-8")
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def read_examples(path: Path, model=PretrainExample) -> List:
    with open(path, encoding="utf-8") as f:
        return [model.model_validate_json(line) for line in f if line.strip()]


def write_manifest(path: Path, manifest: Dict):
    Path(path).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def coverage(vocab: Vocab, documents: Sequence[Document]) -> float:
    """Fraction of tokens in `documents` that are in the vocabulary"""
    tokens = [t for doc in documents for s in doc for t in tokenize(s)]
    if not tokens:
        return math.nan
    return sum(t in vocab for t in tokens) / len(tokens)
