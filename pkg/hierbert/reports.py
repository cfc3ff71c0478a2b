"""
Метрики обучения и отчёты с результатами
CSV + JSON lines, только дозапись
"""

import csv
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import BaseModel

logger = logging.getLogger(__name__)


# ============ Training metrics ============

class StepRecord(BaseModel):
    step: int
    phase: str
    max_len: Optional[int] = None
    total: float
    mlm_loss: Optional[float] = None
    nsp_loss: Optional[float] = None
    bigram_loss: Optional[float] = None
    task_loss: Optional[float] = None
    frozen: bool = False


class EvalRecord(BaseModel):
    task: str
    metric: str
    value: float
    step: Optional[int] = None
    split: Optional[str] = None


class MetricsReport(BaseModel):
    config_hash: str = ""
    seed: int = 0
    steps: List[StepRecord] = []
    evaluations: List[EvalRecord] = []
    freeze_step: Optional[int] = None

    def log_step(self, record: StepRecord):
        self.steps.append(record)

    def log_eval(self, task: str, metric: str, value: float, step: Optional[int] = None,
                 split: Optional[str] = None):
        self.evaluations.append(EvalRecord(task=task, metric=metric, value=value, step=step, split=split))

    def log_scores(self, task: str, scores: Dict[str, float], split: str, step: Optional[int] = None):
        """Все метрики одной оценки; `step` по умолчанию равен числу записанных шагов"""
        step = len(self.steps) if step is None else step
        for metric, value in scores.items():
            self.log_eval(task, metric, value, step, split)

    def losses(self, key: str = "total") -> List[float]:
        return [getattr(r, key) for r in self.steps]

    def write_jsonl(self, path: Path, append: bool = False):
        """Строка на каждый шаг, затем на каждую оценку; отсутствующие потери пропускаются"""
        with open(path, "a" if append else "w", encoding="utf-8") as f:
            for record in self.steps:
                row = {"config_hash": self.config_hash, "seed": self.seed, **record.model_dump(exclude_none=True)}
                f.write(json.dumps(row, sort_keys=True) + "\n")
            for record in self.evaluations:
                row = {"config_hash": self.config_hash, "seed": self.seed, **record.model_dump(exclude_none=True)}
                f.write(json.dumps(row, sort_keys=True) + "\n")


# ============ Result rows ============

class ResultRow(BaseModel):
    variant: str
    placement: str
    pt_concat: str
    ft_concat: str
    task: str
    metric: str
    value: float
    seed: int
    config_hash: str


RESULT_FIELDS = list(ResultRow.model_fields)


class ReportWriter:
    """Дописывает строки результатов в `<stem>.csv` и `<stem>.jsonl` одного каталога"""

    def __init__(self, directory: Path, stem: str = "results"):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.csv_path = self.directory / f"{stem}.csv"
        self.jsonl_path = self.directory / f"{stem}.jsonl"

    def append(self, row: ResultRow):
        new_file = not self.csv_path.exists()
        with open(self.csv_path, "a", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=RESULT_FIELDS)
            if new_file:
                writer.writeheader()
            writer.writerow(row.model_dump())
        with open(self.jsonl_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(row.model_dump(), sort_keys=True) + "\n")

    def extend(self, rows: List[ResultRow]):
        for row in rows:
            self.append(row)
        if rows:
            logger.info(f"📊 {len(rows)} result rows appended to {self.csv_path}")

    def read(self) -> List[Dict]:
        if not self.jsonl_path.exists():
            return []
        with open(self.jsonl_path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]
