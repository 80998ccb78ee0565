#!/usr/bin/env python3
"""
Binary checkpoints.

Layout: the magic bytes ``M3DS``, the format version and the header length
as little-endian u32, a UTF-8 JSON header (sorted keys) and then every
array as little-endian float64 in header order. The header names the
weight setting, the layer plan and each array's section, name and shape.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from ..version import CHECKPOINT_FORMAT_VERSION
from .config import LayerPlan
from .meta_psl import MetaState, meta_shapes
from .psl import ParamBundle, layer_shapes
from .validation import DataError, ShapeError

logger = logging.getLogger(__name__)

MAGIC = b"M3DS"
SECTIONS = ("psl", "meta")
_PREFIX = struct.Struct("<4sII")
_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    mode: str
    plan: LayerPlan
    bundle: ParamBundle
    meta: Optional[MetaState] = None

    @property
    def array_count(self) -> int:
        return len(self.bundle.theta_t) + (len(self.meta.params) if self.meta else 0)


def _entries(checkpoint: Checkpoint) -> List[tuple]:
    entries = [("psl", name, checkpoint.bundle.theta_t[name]) for name in layer_shapes(checkpoint.plan)]
    if checkpoint.meta is not None:
        entries += [("meta", name, checkpoint.meta.params[name]) for name in meta_shapes(checkpoint.plan)]
    return entries


def save_checkpoint(checkpoint: Checkpoint, path: str) -> None:
    """
    Write a checkpoint. Identical parameters always produce identical bytes.

    Raises:
        DataError: If the file cannot be written
    """
    entries = _entries(checkpoint)
    header = {
        "mode": checkpoint.mode,
        "plan": checkpoint.plan.model_dump(mode="json"),
        "arrays": [{"section": s, "name": n, "shape": list(a.shape)} for s, n, a in entries],
    }
    encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "wb") as f:
            f.write(_PREFIX.pack(MAGIC, CHECKPOINT_FORMAT_VERSION, len(encoded)))
            f.write(encoded)
            for _, _, array in entries:
                f.write(np.ascontiguousarray(array, dtype=_DTYPE).tobytes())
    except OSError as e:
        raise DataError(f"Cannot write checkpoint: {e}", path)
    logger.info(f"Wrote checkpoint {path}: mode {checkpoint.mode}, {len(entries)} arrays")


def load_checkpoint(path: str) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        DataError: On a missing file, bad magic, unknown version, truncation
            or arrays that do not fit the stored layer plan
    """
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DataError(f"Cannot read checkpoint: {e}", path)
    if len(blob) < _PREFIX.size:
        raise DataError("Checkpoint is truncated", path)
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise DataError(f"Not a checkpoint (magic {magic!r})", path)
    if version != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"Unsupported checkpoint format version {version}", path)
    try:
        header = json.loads(blob[_PREFIX.size:_PREFIX.size + header_len].decode("utf-8"))
        plan = LayerPlan(**header["plan"])
        mode = header["mode"]
        arrays = [(a["section"], a["name"], tuple(int(d) for d in a["shape"])) for a in header["arrays"]]
    except (ValueError, KeyError, TypeError) as e:
        raise DataError(f"Corrupt checkpoint header: {e}", path)

    offset = _PREFIX.size + header_len
    sections: Dict[str, Dict[str, np.ndarray]] = {s: {} for s in SECTIONS}
    for section, name, shape in arrays:
        if section not in SECTIONS:
            raise DataError(f"Unknown checkpoint section '{section}'", path)
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + count * _DTYPE.itemsize
        if end > len(blob):
            raise DataError(f"Checkpoint is truncated inside array {name}", path)
        sections[section][name] = np.frombuffer(blob[offset:end], dtype=_DTYPE) \
            .astype(np.float64).reshape(shape)
        offset = end
    if offset != len(blob):
        raise DataError(f"Checkpoint has {len(blob) - offset} trailing bytes", path)

    try:
        bundle = ParamBundle(plan, sections["psl"])
        meta = MetaState(plan, sections["meta"]) if sections["meta"] else None
    except ShapeError as e:
        raise DataError(f"Checkpoint arrays do not match its layer plan: {e}", path)
    return Checkpoint(mode, plan, bundle, meta)


def check_plan(checkpoint: Checkpoint, plan: LayerPlan) -> None:
    """
    Raises:
        DataError: If the config's layer plan differs from the checkpoint's
    """
    if checkpoint.plan != plan:
        raise DataError(f"Config layer plan {plan.model_dump()} does not match the checkpoint's "
                        f"{checkpoint.plan.model_dump()}")
