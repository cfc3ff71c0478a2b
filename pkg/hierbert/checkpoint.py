"""
Сохранение и загрузка чекпоинтов: manifest.json + payload.bin.

Массивы лежат в payload подряд как little-endian float64 в порядке manifest;
для каждого массива manifest хранит форму, смещение, длину и SHA-256.
Подробности формата в FORMATS.md.
"""

import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from hierbert.exceptions import ChecksumMismatchError, FormatVersionError, MissingCheckpointError
from hierbert.layers import Module
from hierbert.optimizer import AdamAMSGrad, AdamState

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
PAYLOAD = "payload.bin"
DTYPE = "<f8"


@dataclass
class Checkpoint:
    manifest: Dict[str, Any]
    parameters: Dict[str, np.ndarray]
    optimizer_state: Optional[AdamState] = None
    frozen: List[str] = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.manifest["step"]

    @property
    def config(self) -> Dict[str, Any]:
        return self.manifest["config"]

    @property
    def placement(self) -> Dict[str, Any]:
        return self.manifest["placement"]

    @property
    def concat(self) -> str:
        return self.manifest["concat"]

    def has_nsp_head(self) -> bool:
        return any(name.startswith("nsp_head.") for name in self.parameters)


def save_checkpoint(path: Path, model: Module, optimizer: Optional[AdamAMSGrad], config: Dict[str, Any],
                    step: int, metadata: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write the checkpoint directory. Identical inputs give identical bytes.

    `metadata` must carry placement, concat, vocab_checksum, config_hash and
    seed; anything else in it is stored verbatim.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    arrays: Dict[str, np.ndarray] = dict(model.state_dict())
    if optimizer is not None:
        arrays.update(optimizer.state.arrays())

    table = []
    offset = 0
    with open(path / PAYLOAD, "wb") as f:
        for name, value in arrays.items():
            raw = np.ascontiguousarray(value, dtype=DTYPE).tobytes()
            f.write(raw)
            table.append({
                "name": name,
                "shape": list(np.shape(value)),
                "offset": offset,
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            })
            offset += len(raw)

    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": DTYPE,
        "step": step,
        "config": config,
        "optimizer_step": optimizer.state.t if optimizer is not None else None,
        "frozen": sorted(optimizer.frozen) if optimizer is not None else [],
        "arrays": table,
        **(metadata or {}),
    }
    (path / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    logger.info(f"✓ Checkpoint saved: {path} (step {step}, {len(table)} arrays, {offset} bytes)")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    """Чтение и проверка чекпоинта; каждый массив сверяется со своим SHA-256"""
    path = Path(path)
    manifest_path = path / MANIFEST
    if not manifest_path.is_file() or not (path / PAYLOAD).is_file():
        raise MissingCheckpointError(str(path))
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(manifest.get("format_version"), FORMAT_VERSION)

    payload = (path / PAYLOAD).read_bytes()
    parameters: Dict[str, np.ndarray] = {}
    optim_arrays: Dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"] or hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise ChecksumMismatchError(entry["name"])
        value = np.frombuffer(raw, dtype=DTYPE).astype(np.float64).reshape(entry["shape"])
        target = optim_arrays if entry["name"].startswith("optim.") else parameters
        target[entry["name"]] = value

    state = None
    if manifest.get("optimizer_step") is not None:
        state = AdamState.from_arrays(optim_arrays, manifest["optimizer_step"])
    logger.info(f"Checkpoint loaded: {path} (step {manifest['step']})")
    return Checkpoint(manifest=manifest, parameters=parameters, optimizer_state=state,
                      frozen=list(manifest.get("frozen", [])))


def copy_checkpoint(source: Path, target: Path) -> Path:
    """Отдельная копия каталога чекпоинта (ячейки sweep не делят чекпоинты)"""
    source, target = Path(source), Path(target)
    if not (source / MANIFEST).is_file():
        raise MissingCheckpointError(str(source))
    if target.exists():
        shutil.rmtree(target)
    shutil.copytree(source, target)
    return target
