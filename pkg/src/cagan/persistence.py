"""Binary sequence files, model checkpoints and JSON reports.

All binary formats are little-endian. Every write goes to a temporary file in
the target directory and is renamed into place, so readers never observe a
half-written file.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import tempfile
import warnings
from pathlib import Path

import numpy as np

from .engine import EngineError
from .synth import SequenceSample

SEQ_MAGIC = b"SEQ1"
CKPT_MAGIC = b"CAGN"
CKPT_VERSION = 1
HASH_BYTES = 32
REPORT_KINDS = ("metrics", "epoch_log", "arch_audit")

# tag 0 is the only one needed for float32 models; the others carry float64
# test bundles, integer counters and optimizer step numbers
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
TAG_OF = {np.dtype(v).str: k for k, v in DTYPE_TAGS.items()}
KNOWN_MAGICS = {SEQ_MAGIC: "sequence", CKPT_MAGIC: "checkpoint", b"{": "report"}


class PersistenceError(EngineError):
    pass


class FormatError(PersistenceError):
    pass


class CorruptionError(PersistenceError):
    pass


class IncompatibilityError(PersistenceError):
    pass


class ConfigHashWarning(UserWarning):
    pass


def atomic_write(path, data):
    """Write bytes to ``path`` via a sibling temp file and an atomic rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _check_magic(raw, expected, what):
    head = raw[:len(expected)]
    if head == expected:
        return
    for magic, kind in KNOWN_MAGICS.items():
        if raw.startswith(magic):
            raise FormatError(f"expected a {what} file but found a {kind} file")
    raise FormatError(f"bad magic {head!r}; not a {what} file")


# -- sequence files ----------------------------------------------------------

_SEQ_HEADER = struct.Struct("<4s6I")


def encode_sequence(sample):
    rgb = np.ascontiguousarray(sample.rgb, dtype="<f4")
    aux = np.ascontiguousarray(sample.aux, dtype="<f4")
    labels = np.asarray(sample.labels)
    if rgb.ndim != 4 or aux.ndim != 4:
        raise FormatError("rgb and aux must be T x H x W x C arrays")
    t, h, w, c_rgb = rgb.shape
    if aux.shape[:3] != (t, h, w):
        raise FormatError(f"aux shape {aux.shape} does not match rgb {rgb.shape}")
    k = int(sample.k) if sample.k else (int(labels.max()) + 1 if labels.size else 1)
    if labels.size and (labels.min() < 0 or labels.max() >= k or k > 0xFFFF):
        raise FormatError(f"labels must lie in [0, {k})")
    header = _SEQ_HEADER.pack(SEQ_MAGIC, t, h, w, c_rgb, aux.shape[3], k)
    return header + rgb.tobytes() + aux.tobytes() + labels.astype("<u2").tobytes()


def decode_sequence(raw, seq_id=0):
    _check_magic(raw, SEQ_MAGIC, "sequence")
    if len(raw) < _SEQ_HEADER.size:
        raise CorruptionError(f"header needs {_SEQ_HEADER.size} bytes, file has {len(raw)}")
    _, t, h, w, c_rgb, c_aux, k = _SEQ_HEADER.unpack_from(raw)
    n_rgb, n_aux = t * h * w * c_rgb * 4, t * h * w * c_aux * 4
    expected = _SEQ_HEADER.size + n_rgb + n_aux + 2 * t
    if len(raw) != expected:
        raise CorruptionError(f"payload ends at byte {len(raw)}, header implies {expected} "
                              f"(rgb at {_SEQ_HEADER.size}, aux at {_SEQ_HEADER.size + n_rgb}, "
                              f"labels at {_SEQ_HEADER.size + n_rgb + n_aux})")
    off = _SEQ_HEADER.size
    rgb = np.frombuffer(raw, "<f4", t * h * w * c_rgb, off).reshape(t, h, w, c_rgb).astype(np.float32)
    off += n_rgb
    aux = np.frombuffer(raw, "<f4", t * h * w * c_aux, off).reshape(t, h, w, c_aux).astype(np.float32)
    off += n_aux
    labels = np.frombuffer(raw, "<u2", t, off).astype(np.int64)
    if t and labels.max() >= k:
        raise CorruptionError(f"label {labels.max()} at or above k={k}")
    return SequenceSample(rgb, aux, labels, id=seq_id, k=k)


def write_sequence(path, sample):
    atomic_write(path, encode_sequence(sample))


def read_sequence(path, seq_id=None):
    path = Path(path)
    if seq_id is None:
        digits = "".join(ch for ch in path.stem if ch.isdigit())
        seq_id = int(digits) if digits else 0
    return decode_sequence(path.read_bytes(), seq_id)


def sequence_filename(seq_id):
    return f"seq_{seq_id:04d}.seq"


def write_dataset(directory, dataset):
    """One sequence file per sample plus ``manifest.json``."""
    directory = Path(directory)
    for name in ("train", "val", "test"):
        for s in dataset.split(name):
            write_sequence(directory / sequence_filename(s.id), s)
    atomic_write(directory / "manifest.json", dumps_json(dataset.manifest))


def read_dataset(directory):
    from .synth import Dataset
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    splits = {name: [read_sequence(directory / sequence_filename(i), i) for i in manifest["splits"][name]]
              for name in ("train", "val", "test")}
    return Dataset(splits["train"], splits["val"], splits["test"], manifest)


# -- checkpoints -------------------------------------------------------------

def encode_tensors(tensors, config_hash):
    """Serialize an ordered name -> array mapping."""
    digest = bytes.fromhex(config_hash) if isinstance(config_hash, str) else bytes(config_hash)
    if len(digest) != HASH_BYTES:
        raise FormatError(f"config hash must be {HASH_BYTES} bytes")
    parts = [CKPT_MAGIC, struct.pack("<IQ", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        tag = TAG_OF.get(np.dtype(dt).newbyteorder("<").str)
        if tag is None:
            raise FormatError(f"tensor {name} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(struct.pack("<B", tag))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
    parts.append(digest)
    return b"".join(parts)


def decode_tensors(raw):
    """Inverse of ``encode_tensors``. Returns (name -> array, config hash hex)."""
    _check_magic(raw, CKPT_MAGIC, "checkpoint")
    off = len(CKPT_MAGIC)

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise CorruptionError(f"truncated checkpoint: {what} needs bytes {off}..{off + n}, "
                                  f"file has {len(raw)}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    version, count = struct.unpack("<IQ", take(12, "header"))
    if version != CKPT_VERSION:
        raise FormatError(f"unknown checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        if name in tensors:
            raise CorruptionError(f"duplicate tensor name {name!r}")
        (ndim,) = struct.unpack("<I", take(4, f"{name} ndim"))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, f"{name} dims"))
        (tag,) = struct.unpack("<B", take(1, f"{name} dtype"))
        if tag not in DTYPE_TAGS:
            raise FormatError(f"tensor {name} has unknown dtype tag {tag}")
        dt = DTYPE_TAGS[tag]
        size = math.prod(dims)
        data = take(size * dt.itemsize, f"{name} data")
        tensors[name] = np.frombuffer(data, dt).reshape(dims).astype(dt.newbyteorder("="))
    digest = take(HASH_BYTES, "config hash")
    if off != len(raw):
        raise CorruptionError(f"{len(raw) - off} unexpected trailing bytes after offset {off}")
    return tensors, digest.hex()


def bundle_config(bundle):
    p = bundle.preset
    return {"preset": p.name, "input_hw": p.input_hw, "width_factor": str(p.width_factor), "k": p.k,
            "rgb_channels": p.rgb_channels, "aux_channels": p.aux_channels, "noise_rate": p.noise_rate,
            "bn_first": p.bn_first, "dtype": p.dtype, "variant": bundle.variant.id, "seed": bundle.seed}


def config_hash(config):
    return hashlib.sha256(dumps_json(config)).hexdigest()


def bundle_tensors(bundle, state=None):
    """Everything a checkpoint stores, as an ordered name -> array dict."""
    out = {}
    for name, p in bundle.named_parameters().items():
        out[f"param:{name}"] = p.data
    for name, bn in bundle.named_bn_states().items():
        out[f"bn:{name}/mean"] = bn.mean
        out[f"bn:{name}/var"] = bn.var
        out[f"bn:{name}/count"] = np.array(bn.count, dtype=np.int64)
    if state is not None:
        out["train:epoch"] = np.array(state.epoch, dtype=np.int64)
        for side, opt in (("g", state.g_opt), ("d", state.d_opt)):
            if opt is None:
                continue
            out[f"opt:{side}/step"] = np.array(opt.step, dtype=np.int64)
            for key in sorted(opt.m):
                out[f"opt:{side}/m/{key}"] = opt.m[key]
                out[f"opt:{side}/v/{key}"] = opt.v[key]
    return out


def save_checkpoint(path, bundle, state=None, config=None):
    """Write parameters, batch-norm statistics and, with ``state``, optimizer moments and epoch."""
    tensors = bundle_tensors(bundle, state)
    for name, arr in tensors.items():
        if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
            raise ValueError(f"refusing to checkpoint non-finite tensor {name}")
    cfg = config if config is not None else bundle_config(bundle)
    atomic_write(path, encode_tensors(tensors, config_hash(cfg)))


def load_checkpoint(path, bundle, state=None, config=None):
    """Fill ``bundle`` (and optionally ``state``) in place from a checkpoint file.

    Returns the stored config hash. A hash that differs from the expected one
    only warns; missing or mismatched tensors raise IncompatibilityError.
    """
    tensors, digest = decode_tensors(Path(path).read_bytes())
    expected = bundle_tensors(bundle)
    missing = [n for n in expected if n not in tensors]
    if missing:
        raise IncompatibilityError(f"checkpoint lacks {len(missing)} tensors: " + ", ".join(missing))
    unexpected = [n for n in tensors if n.startswith(("param:", "bn:")) and n not in expected]
    if unexpected:
        raise IncompatibilityError(f"checkpoint has {len(unexpected)} tensors this bundle does not: "
                                   + ", ".join(unexpected))
    wrong = [f"{n} {tensors[n].shape}!={np.shape(expected[n])}" for n in expected
             if tensors[n].shape != np.shape(expected[n])]
    if wrong:
        raise IncompatibilityError("shape mismatch: " + ", ".join(wrong))
    cfg = config if config is not None else bundle_config(bundle)
    if digest != config_hash(cfg):
        warnings.warn(f"checkpoint config hash {digest[:12]} differs from the current config", ConfigHashWarning)

    params = bundle.named_parameters()
    for name, p in params.items():
        p.data = tensors[f"param:{name}"].astype(p.dtype)
        p.grad = None
    for name, bn in bundle.named_bn_states().items():
        bn.mean = tensors[f"bn:{name}/mean"].astype(bn.mean.dtype)
        bn.var = tensors[f"bn:{name}/var"].astype(bn.var.dtype)
        bn.count = int(tensors[f"bn:{name}/count"])
    if state is not None:
        if "train:epoch" not in tensors:
            raise IncompatibilityError("checkpoint holds no training state (train:epoch missing)")
        state.epoch = int(tensors["train:epoch"])
        for side, opt in (("g", state.g_opt), ("d", state.d_opt)):
            if opt is None:
                continue
            key = f"opt:{side}/step"
            if key not in tensors:
                raise IncompatibilityError(f"checkpoint lacks optimizer state {key}")
            opt.step = int(tensors[key])
            prefix_m, prefix_v = f"opt:{side}/m/", f"opt:{side}/v/"
            opt.m = {n[len(prefix_m):]: a for n, a in tensors.items() if n.startswith(prefix_m)}
            opt.v = {n[len(prefix_v):]: a for n, a in tensors.items() if n.startswith(prefix_v)}
    return digest


# -- reports -----------------------------------------------------------------

def _float_text(f):
    if not math.isfinite(f):
        raise ValueError(f"cannot serialize non-finite number {f}")
    text = format(f, ".17g")
    # keep floats recognisable as floats after parsing
    return text if any(ch in text for ch in ".en") else text + ".0"


def _emit(obj, indent, out):
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        items = sorted((str(k), v) for k, v in obj.items())
        for i, (k, v) in enumerate(items):
            out.append(f"{pad}  {json.dumps(k, ensure_ascii=False)}: ")
            _emit(v, indent + 1, out)
            out.append(",\n" if i < len(items) - 1 else "\n")
        out.append(pad + "}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else obj
        if not seq:
            out.append("[]")
            return
        out.append("[")
        for i, v in enumerate(seq):
            _emit(v, indent + 1, out)
            if i < len(seq) - 1:
                out.append(", ")
        out.append("]")
    elif obj is None or isinstance(obj, (bool, np.bool_)):
        out.append(json.dumps(None if obj is None else bool(obj)))
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(_float_text(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_json(obj):
    """Deterministic JSON: sorted keys, floats with 17 significant digits."""
    out = []
    _emit(obj, 0, out)
    out.append("\n")
    return "".join(out).encode("utf-8")


def make_report(kind, payload):
    if kind not in REPORT_KINDS:
        raise FormatError(f"unknown report kind {kind!r}; expected one of {REPORT_KINDS}")
    return {"kind": kind, "payload": payload}


def write_report(path, record):
    if not isinstance(record, dict) or record.get("kind") not in REPORT_KINDS or "payload" not in record:
        raise FormatError("a report record needs kind in metrics/epoch_log/arch_audit and a payload")
    atomic_write(path, dumps_json(record))


def read_report(path):
    raw = Path(path).read_bytes()
    if raw.startswith(SEQ_MAGIC) or raw.startswith(CKPT_MAGIC):
        _check_magic(raw, b"{", "report")
    try:
        record = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"not a report document: {exc}") from None
    if not isinstance(record, dict) or record.get("kind") not in REPORT_KINDS:
        raise FormatError("report document lacks a known kind")
    return record
