"""
Checkpoint container.

Layout: a numpy .npz archive holding one float64 array per entry
(`param/<name>`, `velocity/<name>`) plus `meta`, a JSON document with the
format version, epoch counter, RNG and sampler states, the partial run
report and the config echo. Writes go to a temporary file first and are
moved into place, so a crash never leaves a half-written checkpoint behind.
"""

import json
import logging
import os
import time
import uuid
import zipfile
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from .errors import CheckpointError

logger = logging.getLogger("Checkpoint")

CHECKPOINT_FORMAT = "hybridlt-checkpoint"
CHECKPOINT_VERSION = 1


def write_checkpoint(path: Union[str, Path], arrays: Dict[str, np.ndarray],
                     meta: Dict[str, Any]) -> Path:
    operation_id = str(uuid.uuid4())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    logger.info(f"BEGIN write_checkpoint operation_id={operation_id} path={path} arrays={len(arrays)}")
    start = time.time()
    document = dict(meta)
    document["format"] = CHECKPOINT_FORMAT
    document["version"] = CHECKPOINT_VERSION
    payload = {key: np.asarray(value, dtype=np.float64) for key, value in arrays.items()}
    payload["meta"] = np.array(json.dumps(document, sort_keys=True))
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as f:
        np.savez(f, **payload)
    os.replace(tmp_path, path)
    logger.info(f"END write_checkpoint operation_id={operation_id} elapsed={time.time() - start:.3f}s")
    return path


def read_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Load and validate the whole file before anything is handed back"""
    operation_id = str(uuid.uuid4())
    path = Path(path)
    logger.info(f"BEGIN read_checkpoint operation_id={operation_id} path={path}")
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}", field="path")
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {key: np.array(archive[key]) for key in archive.files}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError, KeyError) as exc:
        logger.info(f"END read_checkpoint operation_id={operation_id} status=error error={exc}")
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint ({exc})", field="archive") from exc
    if "meta" not in arrays:
        raise CheckpointError(f"{path}: missing metadata", field="meta")
    try:
        meta = json.loads(str(arrays.pop("meta")))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable metadata ({exc})", field="meta") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file", field="format")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: version {meta.get('version')} != supported {CHECKPOINT_VERSION}",
            field="version")
    logger.info(f"END read_checkpoint operation_id={operation_id} arrays={len(arrays)} status=success")
    return arrays, meta
