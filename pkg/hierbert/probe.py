"""
Frozen-encoder probing.

Sentences are encoded once as `[CLS] sentence [SEP]`; the [CLS] state at the
NSP tap layer becomes a fixed feature vector and only an MLP classifier is
trained on top. The encoder is checksummed before and after.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from sklearn.model_selection import train_test_split
from sklearn.neural_network import MLPClassifier

from hierbert.datapipe import CLS, PAD, SEP, Document, Vocab, build_pretrain_examples, tokenize
from hierbert.encoder import Encoder
from hierbert.exceptions import EncoderChecksumError, InputError
from hierbert.heads import ConcatMode, HeadPlacement, HierarchicalBert
from hierbert.streams import derive_seed, make_stream
from hierbert.train import build_model, parameter_checksum, pretrain

logger = logging.getLogger(__name__)

PROBE_TASKS = ("sentence_length", "word_content", "bigram_shift_detection")


class ProbeConfig(BaseModel):
    hidden_sizes: Tuple[int, ...] = (128, 128)
    lr: float = Field(1e-3, gt=0.0)
    weight_decay: float = Field(0.0, ge=0.0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(10, ge=1)
    val_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    layer: Optional[int] = Field(None, ge=1)
    max_len: int = Field(64, ge=4)
    length_buckets: int = Field(3, ge=2)
    content_words: int = Field(3, ge=2)
    seed: int = 0


@dataclass
class ProbeDataset:
    name: str
    sentences: List[List[str]]
    labels: np.ndarray
    num_classes: int

    def class_counts(self) -> Dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    def check_split(self, val_fraction: float):
        """
        Raise InputError unless a stratified split can put every class in
        both halves: at least num_classes rows on each side and two per class.
        """
        n = len(self.labels)
        n_val = math.ceil(val_fraction * n)
        counts = self.class_counts()
        per_class = [counts.get(c, 0) for c in range(self.num_classes)]
        if min(n_val, n - n_val) < self.num_classes or min(per_class) < 2:
            raise InputError(
                f"Probing set {self.name} is too small for a stratified {val_fraction:g} validation split",
                {"sentences": n, "validation": n_val, "train": n - n_val, "classes": self.num_classes,
                 **{f"class_{c}": k for c, k in enumerate(per_class)}},
            )


@dataclass
class ProbeResult:
    task: str
    accuracy: float
    majority_rate: float
    epoch_accuracies: List[float] = field(default_factory=list)
    encoder_checksum: str = ""


def encoder_checksum(encoder: Encoder) -> str:
    return parameter_checksum(encoder.state_dict())


# ============ Synthetic datasets ============

def _sentence_length(sentences: List[List[str]], rng: np.random.Generator, buckets: int) -> ProbeDataset:
    """Rank-based quantile buckets; ties broken at random, so class sizes differ by at most one"""
    lengths = np.array([len(s) for s in sentences])
    order = np.lexsort((rng.random(len(sentences)), lengths))
    labels = np.empty(len(sentences), dtype=np.int64)
    labels[order] = np.arange(len(sentences)) * buckets // len(sentences)
    return ProbeDataset("sentence_length", sentences, labels, buckets)


def _word_content(sentences: List[List[str]], rng: np.random.Generator, k: int) -> ProbeDataset:
    """Which of k mid-frequency words the sentence contains (exactly one of them); classes balanced"""
    frequency: Dict[str, int] = {}
    for s in sentences:
        for w in set(s):
            if w.isalnum():
                frequency[w] = frequency.get(w, 0) + 1
    ranked = sorted((w for w, c in frequency.items() if c >= 2), key=lambda w: (-frequency[w], w))
    if len(ranked) < k:
        raise InputError(f"word_content needs {k} words seen in at least 2 sentences",
                         {"eligible_words": len(ranked)})
    start = (len(ranked) - k) // 2
    words = ranked[start:start + k]

    by_class: Dict[int, List[int]] = {c: [] for c in range(k)}
    for i, s in enumerate(sentences):
        present = [c for c, w in enumerate(words) if w in s]
        if len(present) == 1:
            by_class[present[0]].append(i)
    per_class = min(len(v) for v in by_class.values())
    if per_class < 2:
        raise InputError("Corpus too small for balanced word_content classes",
                         {words[c]: len(v) for c, v in by_class.items()})
    picked, labels = [], []
    for c in range(k):
        chosen = rng.permutation(by_class[c])[:per_class]
        picked.extend(int(i) for i in chosen)
        labels.extend([c] * per_class)
    logger.info(f"word_content probe words: {words} ({per_class} sentences each)")
    return ProbeDataset("word_content", [sentences[i] for i in picked], np.array(labels), k)


def swap_once(tokens: List[str], rng: np.random.Generator) -> List[str]:
    """Swap one random adjacent pair, preferring pairs of distinct tokens"""
    pairs = [i for i in range(len(tokens) - 1) if tokens[i] != tokens[i + 1]] or list(range(len(tokens) - 1))
    i = pairs[int(rng.integers(len(pairs)))]
    swapped = list(tokens)
    swapped[i], swapped[i + 1] = swapped[i + 1], swapped[i]
    return swapped


def _bigram_shift(sentences: List[List[str]], rng: np.random.Generator) -> ProbeDataset:
    n = len(sentences) - len(sentences) % 2
    order = rng.permutation(len(sentences))[:n]
    shifted = set(int(i) for i in order[: n // 2])
    out, labels = [], []
    for i in sorted(int(j) for j in order):
        if i in shifted:
            out.append(swap_once(sentences[i], rng))
            labels.append(1)
        else:
            out.append(sentences[i])
            labels.append(0)
    return ProbeDataset("bigram_shift_detection", out, np.array(labels), 2)


def synthetic_probe_datasets(corpus: Sequence[Document], rng: np.random.Generator,
                             config: Optional[ProbeConfig] = None) -> Dict[str, ProbeDataset]:
    """sentence_length, word_content and bigram_shift_detection sets built from corpus sentences"""
    config = config or ProbeConfig()
    sentences = [tokenize(s) for doc in corpus for s in doc]
    sentences = [s[: config.max_len - 2] for s in sentences if len(s) >= 2]
    minimum = 2 * max(config.length_buckets, 2)
    if len(sentences) < minimum:
        raise InputError("Corpus too small for the probing datasets",
                         {"sentences": len(sentences), "required": minimum})
    datasets = {
        "sentence_length": _sentence_length(sentences, rng, config.length_buckets),
        "word_content": _word_content(sentences, rng, config.content_words),
        "bigram_shift_detection": _bigram_shift(sentences, rng),
    }
    for dataset in datasets.values():
        dataset.check_split(config.val_fraction)
    return datasets


# ============ Probe training ============

def sentence_features(encoder: Encoder, vocab: Vocab, sentences: Sequence[List[str]], layer: int,
                      max_len: int = 64, batch_size: int = 64) -> np.ndarray:
    """[CLS] states at `layer` for single-sentence inputs; inference only"""
    rows = []
    for i in range(0, len(sentences), batch_size):
        chunk = sentences[i:i + batch_size]
        width = min(max_len, max(len(s) for s in chunk) + 2)
        ids = np.full((len(chunk), width), PAD, dtype=np.int64)
        for r, tokens in enumerate(chunk):
            seq = [CLS] + vocab.encode(tokens[: width - 2]) + [SEP]
            ids[r, :len(seq)] = seq
        embedded = encoder.embed(ids, np.zeros_like(ids))
        output = encoder.encode(embedded, ids != PAD, num_layers=layer)
        rows.append(output.layer(layer).data[:, 0, :])
    return np.concatenate(rows, axis=0)


def probe_run(model: HierarchicalBert, vocab: Vocab, dataset: ProbeDataset,
              config: Optional[ProbeConfig] = None) -> ProbeResult:
    """
    Train an MLP on frozen [CLS] features; return the best validation
    accuracy over `epochs` passes.
    """
    config = config or ProbeConfig()
    dataset.check_split(config.val_fraction)
    layer = config.layer or model.placement.nsp_layer
    before = encoder_checksum(model.encoder)

    features = sentence_features(model.encoder, vocab, dataset.sentences, layer, config.max_len)
    labels = dataset.labels
    split_seed = derive_seed(config.seed, "probe_split", dataset.name)
    x_train, x_val, y_train, y_val = train_test_split(
        features, labels, test_size=config.val_fraction, stratify=labels, random_state=split_seed,
    )
    classifier = MLPClassifier(
        hidden_layer_sizes=tuple(config.hidden_sizes), solver="adam", learning_rate_init=config.lr,
        alpha=config.weight_decay, batch_size=config.batch_size,
        random_state=derive_seed(config.seed, "probe_mlp", dataset.name),
    )
    classes = np.arange(dataset.num_classes)
    accuracies = []
    for _ in range(config.epochs):
        classifier.partial_fit(x_train, y_train, classes=classes)
        accuracies.append(float(classifier.score(x_val, y_val)))

    after = encoder_checksum(model.encoder)
    if after != before:
        raise EncoderChecksumError(before, after)

    majority = float(np.bincount(y_val, minlength=dataset.num_classes).max() / len(y_val))
    result = ProbeResult(task=dataset.name, accuracy=max(accuracies), majority_rate=majority,
                         epoch_accuracies=accuracies, encoder_checksum=after)
    logger.info(f"🔎 Probe {dataset.name}: best val accuracy {result.accuracy:.3f} (majority {majority:.3f})")
    return result


def probe_datasets_for(corpus: Sequence[Document], seed: int, config: Optional[ProbeConfig] = None):
    return synthetic_probe_datasets(corpus, make_stream(seed, "probe_data"), config)


# ============ Bigram-objective comparison ============

class BigramComparison(BaseModel):
    seed: int
    with_bigram: float
    without_bigram: float


def compare_bigram_probe(corpus: Sequence[Document], vocab: Vocab, encoder_config, train_config,
                         data_config, seeds: Sequence[int], probe_config: Optional[ProbeConfig] = None
                         ) -> List[BigramComparison]:
    """
    Pre-train the same architecture with and without the bigram-shift
    objective for each seed and probe both on bigram_shift_detection.
    """
    probe_config = probe_config or ProbeConfig()
    top = encoder_config.num_layers
    results = []
    for seed in seeds:
        datasets = synthetic_probe_datasets(corpus, make_stream(seed, "probe_data"), probe_config)
        dataset = datasets["bigram_shift_detection"]
        scores = {}
        for with_bigram in (True, False):
            placement = HeadPlacement(mlm_layer=top, nsp_layer=top, bigram_shift_enabled=with_bigram)
            pools = build_pretrain_examples(corpus, vocab, data_config, seed, bigram_shift=with_bigram)
            model = build_model(encoder_config, placement, ConcatMode.NONE, seed)
            run_config = train_config.model_copy(update={"seed": seed})
            pretrain(model, pools, run_config, short_len=data_config.short_len, long_len=data_config.long_len,
                     short_fraction=data_config.short_fraction)
            scores[with_bigram] = probe_run(model, vocab, dataset,
                                            probe_config.model_copy(update={"seed": seed})).accuracy
        results.append(BigramComparison(seed=seed, with_bigram=scores[True], without_bigram=scores[False]))
        logger.info(f"Seed {seed}: bigram probe with objective {scores[True]:.3f}, without {scores[False]:.3f}")
    return results
