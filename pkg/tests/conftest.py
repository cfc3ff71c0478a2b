"""
Shared fixtures: a small generated corpus, its vocabulary and a tiny encoder
"""

import json

import pytest

from hierbert.datapipe import DataConfig, PretrainBatch, build_pretrain_examples, build_vocab
from hierbert.encoder import EncoderConfig
from hierbert.heads import ConcatMode, HeadPlacement
from hierbert.train import build_model

SUBJECTS = ["cats", "dogs", "birds", "friends", "teachers"]
VERBS = ["see", "like", "find", "follow"]
OBJECTS = ["ball", "tree", "river", "apple", "house"]
ADJUNCTS = ["", "today", "again", "slowly"]


def make_corpus(num_docs: int = 12, sentences_per_doc: int = 8):
    documents = []
    for d in range(num_docs):
        doc = []
        for i in range(sentences_per_doc):
            words = [SUBJECTS[(d + i) % 5], VERBS[(3 * d + i) % 4], "the", OBJECTS[(d + 2 * i) % 5]]
            adjunct = ADJUNCTS[(d + 3 * i) % 4]
            if adjunct:
                words.append(adjunct)
            doc.append(" ".join(words).capitalize() + " .")
        documents.append(doc)
    return documents


@pytest.fixture
def corpus():
    return make_corpus()


@pytest.fixture
def vocab(corpus):
    return build_vocab(corpus)


@pytest.fixture
def data_config():
    return DataConfig(max_vocab=64, short_len=16, long_len=24, short_fraction=0.5, qa_max_len=32, nli_max_len=32)


@pytest.fixture
def encoder_config():
    return EncoderConfig(num_layers=2, num_heads=2, hidden_size=8, ff_size=16, max_position=32,
                         vocab_size=64, dropout_p=0.0)


@pytest.fixture
def pools(corpus, vocab, data_config):
    return build_pretrain_examples(corpus, vocab, data_config, seed=0)


@pytest.fixture
def batch(pools):
    return PretrainBatch.from_examples(pools[16][:4])


@pytest.fixture
def make_model(encoder_config):
    def factory(mlm_layer=2, nsp_layer=2, concat=ConcatMode.NONE, nsp_enabled=True, bigram=False, seed=0,
                **kwargs):
        placement = HeadPlacement(mlm_layer=mlm_layer, nsp_layer=nsp_layer, nsp_enabled=nsp_enabled,
                                  bigram_shift_enabled=bigram)
        return build_model(encoder_config, placement, concat, seed, **kwargs)
    return factory


QA_RECORDS = [
    {"id": "q1", "question": "What do cats see?", "context": "Cats see the ball today.",
     "answers": [{"text": "the ball", "answer_start": 9}]},
    {"id": "q2", "question": "What do dogs like?", "context": "Dogs like the tree again.",
     "answers": [{"text": "tree", "answer_start": 14}]},
    {"id": "q3", "question": "Who follows the river?", "context": "Birds follow the river slowly.",
     "answers": [{"text": "Birds", "answer_start": 0}]},
    {"id": "q4", "question": "What do teachers eat?", "context": "Teachers find the house.",
     "answers": [], "is_impossible": True},
]

NLI_RECORDS = [
    {"id": "n1", "premise": "Cats see the ball today.", "hypothesis": "Cats see the ball.", "label": "entailment"},
    {"id": "n2", "premise": "Dogs like the tree.", "hypothesis": "Dogs like the river.", "label": "contradiction"},
    {"id": "n3", "premise": "Birds follow the river.", "hypothesis": "Birds see the apple.", "label": "neutral"},
    {"id": "n4", "premise": "Friends find the house.", "hypothesis": "Friends find the house again.",
     "label": "neutral"},
]


@pytest.fixture
def qa_records():
    return [dict(r) for r in QA_RECORDS]


@pytest.fixture
def nli_records():
    return [dict(r) for r in NLI_RECORDS]


@pytest.fixture
def experiment_files(tmp_path, corpus):
    """Corpus and fine-tuning files on disk plus a tiny TOML config pointing at them"""
    corpus_path = tmp_path / "corpus.txt"
    corpus_path.write_text("\n\n".join("\n".join(doc) for doc in corpus) + "\n", encoding="utf-8")
    paths = {}
    for name, records in (("qa", QA_RECORDS), ("nli", NLI_RECORDS)):
        path = tmp_path / f"{name}.jsonl"
        path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
        paths[name] = path
    config_path = tmp_path / "experiment.toml"
    config_path.write_text(f"""
variant = "lower_nsp"
seeds = [0]

[placement]
nsp_layer = 1

[encoder]
num_layers = 2
num_heads = 2
hidden_size = 8
ff_size = 16
max_position = 32
vocab_size = 64

[data]
max_vocab = 64
short_len = 16
long_len = 24
short_fraction = 0.5
qa_max_len = 32
nli_max_len = 32

[pretrain]
total_steps = 4
batch_size_short = 4
batch_size_long = 2
lr = 1e-3

[finetune]
epochs = 1
batch_size_short = 2
lr = 1e-3

[probe]
hidden_sizes = [16]
epochs = 3
max_len = 32

[paths]
corpus = "{corpus_path.as_posix()}"
qa_train = "{paths['qa'].as_posix()}"
qa_eval = "{paths['qa'].as_posix()}"
nli_train = "{paths['nli'].as_posix()}"
nli_eval = "{paths['nli'].as_posix()}"
output_dir = "{(tmp_path / 'runs').as_posix()}"
""", encoding="utf-8")
    return config_path
