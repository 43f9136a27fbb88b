"""Action codes: per-frame class vectors scaled to [0, 255]."""
from __future__ import annotations

import numpy as np

from .engine import ParameterError

CODE_MAX = 255.0
BACKGROUND = 0


def encode(class_id, k):
    """Scaled one-hot ground-truth code: 255 at ``class_id``, 0 elsewhere."""
    if k < 2:
        raise ParameterError(f"need at least two classes, got k={k}")
    if not 0 <= class_id < k:
        raise ParameterError(f"class id {class_id} outside [0, {k})")
    code = np.zeros(k, dtype=np.float32)
    code[class_id] = CODE_MAX
    return code


def encode_batch(class_ids, k):
    ids = np.asarray(class_ids, dtype=np.int64)
    if k < 2:
        raise ParameterError(f"need at least two classes, got k={k}")
    if ids.size and (ids.min() < 0 or ids.max() >= k):
        raise ParameterError(f"class ids must lie in [0, {k})")
    codes = np.zeros((ids.size, k), dtype=np.float32)
    codes[np.arange(ids.size), ids] = CODE_MAX
    return codes


def decode(code):
    """Argmax class; ties go to the smallest index."""
    return int(np.argmax(np.asarray(code)))


def decode_batch(codes):
    return np.argmax(np.asarray(codes), axis=-1)


def clamp_generated(raw):
    return np.clip(np.asarray(raw, dtype=np.float32), 0.0, CODE_MAX)


def is_valid(code):
    code = np.asarray(code)
    return code.ndim == 1 and code.size >= 2 and bool(np.all((code >= 0) & (code <= CODE_MAX)))
