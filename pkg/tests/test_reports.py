import csv
import json

import numpy as np

from hierbert.reports import RESULT_FIELDS, MetricsReport, ReportWriter, ResultRow, StepRecord
from hierbert.streams import derive_seed, make_stream


def _row(seed):
    return ResultRow(variant="lower_nsp", placement="mlm4_nsp2", pt_concat="none", ft_concat="cls_embedding",
                     task="qa", metric="f1", value=42.5, seed=seed, config_hash="abc")


def test_rows_append_to_csv_and_jsonl(tmp_path):
    writer = ReportWriter(tmp_path)
    writer.extend([_row(0), _row(1)])
    ReportWriter(tmp_path).append(_row(2))
    with open(writer.csv_path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == RESULT_FIELDS
    assert [r["seed"] for r in rows] == ["0", "1", "2"]
    assert [r["seed"] for r in writer.read()] == [0, 1, 2]


def test_metrics_jsonl_omits_absent_losses(tmp_path):
    report = MetricsReport(config_hash="abc", seed=3)
    report.log_step(StepRecord(step=0, phase="pretrain", max_len=16, total=1.5, mlm_loss=1.0, nsp_loss=0.5))
    report.log_eval("qa", "f1", 12.0)
    report.write_jsonl(tmp_path / "metrics.jsonl")
    lines = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert "bigram_loss" not in lines[0]
    assert lines[0]["seed"] == 3 and lines[1]["metric"] == "f1"
    assert report.losses("nsp_loss") == [0.5]


def test_scores_are_appended_after_training_steps(tmp_path):
    path = tmp_path / "metrics.jsonl"
    report = MetricsReport(config_hash="abc", seed=0)
    report.log_step(StepRecord(step=0, phase="finetune", total=2.0, task_loss=2.0))
    report.log_scores("qa", {"exact_match": 50.0, "f1": 75.0}, split="eval")
    report.write_jsonl(path)
    later = MetricsReport(config_hash="abc", seed=0)
    later.log_scores("qa", {"exact_match": 50.0, "f1": 75.0}, split="train", step=1)
    later.write_jsonl(path, append=True)

    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert [line.get("metric") for line in lines] == [None, "exact_match", "f1", "exact_match", "f1"]
    assert [line.get("split") for line in lines[1:]] == ["eval", "eval", "train", "train"]
    assert all(line["step"] == 1 for line in lines[1:])


def test_named_streams_are_independent_of_draw_order():
    a = make_stream(0, "mask", 7).random(5)
    make_stream(0, "dropout", 1).random(100)
    b = make_stream(0, "mask", 7).random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, make_stream(0, "mask", 8).random(5))
    assert not np.array_equal(a, make_stream(1, "mask", 7).random(5))
    assert 0 <= derive_seed(0, "probe_split") < 2**31 - 1
