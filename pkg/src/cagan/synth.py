"""Deterministic multimodal activity simulator.

Each sequence is a script of action runs separated by background runs. Every
action class draws a coloured shape whose position depends on the progress
(phase) through its run. Classes 1/2 and 3/4 are mirror pairs: the same
shape orbiting the same circle in opposite directions, so any single frame of
one also occurs in the other and only the motion tells them apart.

Action frames are occasionally hidden behind a full-frame occluder that looks
the same for every class; only temporal context recovers the label there.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .engine import ParameterError, UsageError

BACKGROUND_LEVEL = 0.1
OCCLUDER_LEVEL = 0.55
FLOW_SCALE = 2.0
FLOW_REG = 0.01

# (shape, rgb colour, motion, motion parameter)
_PAIR_STYLES = [
    ("square", (0.95, 0.55, 0.15), "orbit", +1),
    ("square", (0.95, 0.55, 0.15), "orbit", -1),
    ("disk", (0.15, 0.75, 0.95), "orbit", +1),
    ("disk", (0.15, 0.75, 0.95), "orbit", -1),
    ("cross", (0.85, 0.2, 0.85), "sweep_h", 0),
]
_EXTRA_SHAPES = ("bar", "ring", "diamond", "square", "disk", "cross")
_EXTRA_MOTIONS = ("sweep_v", "diag", "pulse")
_EXTRA_COLORS = ((0.2, 0.9, 0.3), (0.95, 0.9, 0.2), (0.9, 0.25, 0.25), (0.5, 0.5, 0.95),
                 (0.95, 0.95, 0.95), (0.6, 0.35, 0.1))


class ConfigError(ParameterError):
    pass


def class_style(c):
    """Appearance/motion recipe for action class ``c`` (>= 1)."""
    if c < 1:
        raise ParameterError("background has no shape style")
    if c <= len(_PAIR_STYLES):
        return _PAIR_STYLES[c - 1]
    j = c - len(_PAIR_STYLES) - 1
    return (_EXTRA_SHAPES[j % len(_EXTRA_SHAPES)], _EXTRA_COLORS[j % len(_EXTRA_COLORS)],
            _EXTRA_MOTIONS[(j // len(_EXTRA_SHAPES)) % len(_EXTRA_MOTIONS)], 0)


def confusable_pairs(k):
    return [(a, b) for a, b in ((1, 2), (3, 4)) if b < k]


def default_transition(k):
    """Background -> uniform over actions; every action -> background."""
    t = np.zeros((k, k))
    t[0, 1:] = 1.0 / (k - 1)
    t[1:, 0] = 1.0
    return t


@dataclass
class ActivityScriptConfig:
    k: int = 6
    transition_matrix: list | None = None
    duration_ranges: list | None = None
    sequence_length: int = 200
    image_hw: int = 32
    aux_mode: str = "frame_diff"
    seed: int = 0
    force_background_interleave: bool = True
    occlusion_rate: float = 0.08
    occlusion_length: tuple = (1, 3)
    noise_amplitude: float = 0.02
    global_jitter: bool = False

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError(f"need at least two classes, got k={self.k}")
        if self.transition_matrix is None:
            self.transition_matrix = default_transition(self.k).tolist()
        if self.duration_ranges is None:
            self.duration_ranges = [[6, 16]] + [[18, 36]] * (self.k - 1)
        self.transition_matrix = [list(map(float, r)) for r in self.transition_matrix]
        self.duration_ranges = [list(map(int, r)) for r in self.duration_ranges]
        self.occlusion_length = tuple(int(v) for v in self.occlusion_length)
        self.validate()

    def validate(self):
        t = np.asarray(self.transition_matrix, dtype=float)
        if t.shape != (self.k, self.k):
            raise ConfigError(f"transition matrix must be {self.k}x{self.k}, got {t.shape}")
        for i, row in enumerate(t):
            if np.any(row < 0) or abs(row.sum() - 1.0) > 1e-9:
                raise ConfigError(f"transition matrix row {i} is not a probability distribution "
                                  f"(sum={row.sum():.12g})")
        if len(self.duration_ranges) != self.k:
            raise ConfigError(f"need {self.k} duration ranges, got {len(self.duration_ranges)}")
        for i, (lo, hi) in enumerate(self.duration_ranges):
            if not 1 <= lo <= hi:
                raise ConfigError(f"duration range for class {i} must satisfy 1 <= min <= max, got {(lo, hi)}")
        if self.aux_mode not in ("frame_diff", "distance_field"):
            raise ConfigError(f"unknown aux_mode {self.aux_mode!r}")
        if self.sequence_length < 1 or self.image_hw < 4:
            raise ConfigError("sequence_length must be >= 1 and image_hw >= 4")
        if not 0.0 <= self.occlusion_rate < 1.0:
            raise ConfigError("occlusion_rate must lie in [0, 1)")
        adj = _adjacency(t, self.force_background_interleave)
        reach_bg = _reaches(adj.T, 0)
        for i in range(self.k):
            if not reach_bg[i]:
                raise ConfigError(f"background is unreachable from class {i}")

    @property
    def aux_channels(self):
        return 2 if self.aux_mode == "frame_diff" else 1

    def to_dict(self):
        d = asdict(self)
        d["occlusion_length"] = list(self.occlusion_length)
        return d

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _adjacency(t, interleave):
    adj = t > 0
    if interleave:
        adj = adj.copy()
        # an action -> action step passes through an inserted background run
        for i in range(1, len(t)):
            if np.any(adj[i, 1:]):
                adj[i, 0] = True
                adj[0, 1:] |= adj[i, 1:]
    return adj


def _reaches(adj, start):
    seen = np.zeros(len(adj), bool)
    seen[start] = True
    frontier = [start]
    while frontier:
        i = frontier.pop()
        for j in np.flatnonzero(adj[i]):
            if not seen[j]:
                seen[j] = True
                frontier.append(j)
    return seen


@dataclass
class SequenceSample:
    rgb: np.ndarray
    aux: np.ndarray
    labels: np.ndarray
    id: int = 0
    k: int = 0

    def __post_init__(self):
        t = len(self.labels)
        if self.rgb.shape[0] != t or self.aux.shape[0] != t:
            raise ParameterError("rgb, aux and labels must share the time axis")

    @property
    def length(self):
        return len(self.labels)


# -- scripts -----------------------------------------------------------------

def sample_runs(config, rng, length=None):
    """Return a list of (class, duration) runs covering at least ``length`` frames."""
    length = config.sequence_length if length is None else length
    t = np.asarray(config.transition_matrix)
    unreachable = [i for i, ok in enumerate(_reaches(_adjacency(t, config.force_background_interleave), 0))
                   if not ok]
    if unreachable:
        warnings.warn(f"classes {unreachable} are unreachable from background under the transition matrix",
                      stacklevel=2)
    runs = []
    total = 0
    state = 0
    prev = None
    while total < length:
        if (config.force_background_interleave and prev is not None and prev != 0 and state != 0):
            d = int(rng.integers(config.duration_ranges[0][0], config.duration_ranges[0][1] + 1))
            runs.append((0, d))
            total += d
        lo, hi = config.duration_ranges[state]
        d = int(rng.integers(lo, hi + 1))
        runs.append((state, d))
        total += d
        prev = state
        state = int(rng.choice(config.k, p=t[state]))
    return runs


def sample_script(config, rng):
    """Per-frame labels for one sequence, truncated to ``sequence_length``."""
    runs = sample_runs(config, rng)
    labels = np.concatenate([np.full(d, c, dtype=np.int64) for c, d in runs])
    return labels[:config.sequence_length]


def stationary_frame_distribution(config, tol=1e-14, max_iter=100000):
    """Long-run fraction of frames per class, via power iteration on the run chain."""
    t = np.asarray(config.transition_matrix, dtype=float)
    lazy = 0.5 * (t + np.eye(config.k))  # same fixed point, but aperiodic
    pi = np.full(config.k, 1.0 / config.k)
    for _ in range(max_iter):
        nxt = pi @ lazy
        if np.abs(nxt - pi).sum() < tol:
            pi = nxt
            break
        pi = nxt
    mean_d = np.array([(lo + hi) / 2.0 for lo, hi in config.duration_ranges])
    frames = pi * mean_d
    if config.force_background_interleave:
        inserted = sum(pi[i] * t[i, 1:].sum() for i in range(1, config.k))
        frames[0] += inserted * mean_d[0]
    return frames / frames.sum()


# -- rendering ---------------------------------------------------------------

def _grid(hw):
    c = np.arange(hw) + 0.5
    return np.meshgrid(c, c)  # xx, yy


def _shape_mask(shape, cx, cy, size, hw):
    xx, yy = _grid(hw)
    dx, dy = xx - cx, yy - cy
    if shape == "square":
        d = np.maximum(np.abs(dx), np.abs(dy))
        return np.clip(size - d + 0.5, 0, 1)
    if shape == "disk":
        return np.clip(size - np.hypot(dx, dy) + 0.5, 0, 1)
    if shape == "diamond":
        return np.clip(1.3 * size - (np.abs(dx) + np.abs(dy)) + 0.5, 0, 1)
    if shape == "ring":
        return np.clip(1.2 - np.abs(np.hypot(dx, dy) - size) + 0.5, 0, 1)
    if shape == "bar":
        return np.clip(size - np.abs(dx) + 0.5, 0, 1) * np.clip(size / 2.5 - np.abs(dy) + 0.5, 0, 1)
    if shape == "cross":
        arm = size / 3.0
        h = np.clip(size - np.abs(dx) + 0.5, 0, 1) * np.clip(arm - np.abs(dy) + 0.5, 0, 1)
        v = np.clip(size - np.abs(dy) + 0.5, 0, 1) * np.clip(arm - np.abs(dx) + 0.5, 0, 1)
        return np.maximum(h, v)
    raise ParameterError(f"unknown shape {shape!r}")


def _placement(c, phase, hw):
    shape, color, motion, direction = class_style(c)
    s = hw / 32.0
    mid = hw / 2.0
    size = 4.0 * s
    if motion == "orbit":
        radius = (8.0 if shape == "square" else 6.0) * s
        angle = math.pi / 2 + direction * 2 * math.pi * phase
        cx, cy = mid + radius * math.cos(angle), mid - radius * math.sin(angle)
        if shape == "disk":
            size = 4.5 * s
    elif motion == "sweep_h":
        cx, cy = (6 + 20 * phase) * s, mid
        size = 5.0 * s
    elif motion == "sweep_v":
        cx, cy = mid, (6 + 20 * phase) * s
    elif motion == "diag":
        cx, cy = (6 + 20 * phase) * s, (6 + 20 * phase) * s
    else:  # pulse
        cx, cy = mid, mid
        size = (3.0 + 4.0 * phase) * s
    return shape, color, cx, cy, size


def render_mask(c, phase, hw):
    if c == 0:
        return np.zeros((hw, hw))
    shape, _, cx, cy, size = _placement(c, phase, hw)
    return _shape_mask(shape, cx, cy, size, hw)


def render_frame(c, phase, config, rng=None, occluded=False, shift=(0, 0)):
    """One H x W x 3 frame in [0, 1] showing class ``c`` at progress ``phase``.

    Noise is only added when ``rng`` is given, so the noiseless rendering of a
    (class, phase) pair is a pure function.
    """
    if not 0 <= c < config.k:
        raise ParameterError(f"class {c} outside [0, {config.k})")
    hw = config.image_hw
    frame = np.full((hw, hw, 3), BACKGROUND_LEVEL)
    if occluded:
        frame[:] = OCCLUDER_LEVEL
    elif c != 0:
        shape, color, cx, cy, size = _placement(c, phase, hw)
        mask = _shape_mask(shape, cx + shift[0], cy + shift[1], size, hw)[..., None]
        frame = frame * (1 - mask) + np.asarray(color) * mask
    if rng is not None and config.noise_amplitude > 0:
        frame = frame + config.noise_amplitude * rng.uniform(-1, 1, frame.shape)
    return np.clip(frame, 0.0, 1.0).astype(np.float32)


def _frame_diff(frames):
    g = frames.mean(axis=-1).astype(np.float64)
    t = len(g)
    aux = np.empty(frames.shape[:3] + (2,), dtype=np.float32)
    for i in range(1, t):
        d = g[i] - g[i - 1]
        avg = 0.5 * (g[i] + g[i - 1])
        gy, gx = np.gradient(avg)
        denom = gx * gx + gy * gy + FLOW_REG
        u = -d * gx / denom
        v = -d * gy / denom
        aux[i, ..., 0] = 0.5 + 0.5 * np.clip(u / FLOW_SCALE, -1, 1)
        aux[i, ..., 1] = 0.5 + 0.5 * np.clip(v / FLOW_SCALE, -1, 1)
    aux[0] = aux[1]
    return aux


def distance_field(mask):
    """Distance to the shape boundary, normalised to [0, 1]; all ones when empty."""
    inside = mask >= 0.5
    if not inside.any():
        return np.ones(mask.shape, dtype=np.float32)
    boundary = inside & ~ndimage.binary_erosion(inside, border_value=0)
    dist = ndimage.distance_transform_edt(~boundary)
    top = dist.max()
    return (dist / top if top > 0 else dist).astype(np.float32)


def derive_aux(frames, mode, masks=None):
    """Auxiliary stream for a T x H x W x 3 sequence.

    ``frame_diff``: two flow-like channels (brightness-constancy normal flow
    along x and y), zero motion at 0.5. ``distance_field``: one channel per
    frame computed from ``masks`` (T x H x W, required in that mode).
    """
    frames = np.asarray(frames)
    if mode == "frame_diff":
        if len(frames) < 2:
            raise UsageError("frame_diff needs at least two frames")
        return _frame_diff(frames)
    if mode == "distance_field":
        if masks is None:
            raise UsageError("distance_field needs the shape masks")
        return np.stack([distance_field(m) for m in masks])[..., None]
    raise ParameterError(f"unknown aux mode {mode!r}")


def generate_sequence(config, seq_id):
    rng = np.random.default_rng([config.seed, seq_id])
    runs = sample_runs(config, rng)
    t_total = config.sequence_length
    hw = config.image_hw
    labels = np.empty(t_total, dtype=np.int64)
    rgb = np.empty((t_total, hw, hw, 3), dtype=np.float32)
    masks = np.empty((t_total, hw, hw))
    t = 0
    occlusion_left = 0
    for c, d in runs:
        for j in range(d):
            if t >= t_total:
                break
            phase = j / (d - 1) if d > 1 else 0.0
            occluded = False
            if c != 0:
                if occlusion_left == 0 and config.occlusion_rate > 0 and rng.random() < config.occlusion_rate:
                    lo, hi = config.occlusion_length
                    occlusion_left = int(rng.integers(lo, hi + 1))
                occluded = occlusion_left > 0
                occlusion_left = max(occlusion_left - 1, 0)
            else:
                occlusion_left = 0
            shift = tuple(rng.integers(-1, 2, size=2)) if config.global_jitter else (0, 0)
            labels[t] = c
            rgb[t] = render_frame(c, phase, config, rng, occluded=occluded, shift=shift)
            masks[t] = 0.0 if occluded else render_mask(c, phase, hw)
            t += 1
    aux = derive_aux(rgb, config.aux_mode, masks)
    return SequenceSample(rgb, aux, labels, id=seq_id, k=config.k)


def split_counts(count, ratios):
    if count < 3:
        raise ParameterError("need at least three sequences to split")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ParameterError("split ratios must be three non-negative numbers summing to 1")
    counts = [int(math.floor(count * r + 1e-9)) for r in ratios]
    counts[0] += count - sum(counts)
    return counts


@dataclass
class Dataset:
    train: list
    val: list
    test: list
    manifest: dict = field(default_factory=dict)

    def split(self, name):
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def label_histogram(samples, k):
    hist = np.zeros(k, dtype=np.int64)
    for s in samples:
        hist += np.bincount(np.asarray(s.labels), minlength=k)[:k]
    return hist.tolist()


def generate_dataset(config, count=20, split_ratios=(0.7, 0.15, 0.15)):
    """Seeded train/val/test split of ``count`` sequences plus a manifest."""
    counts = split_counts(count, split_ratios)
    order = np.random.default_rng([config.seed, 7919]).permutation(count)
    ids = {"train": sorted(order[:counts[0]].tolist()),
           "val": sorted(order[counts[0]:counts[0] + counts[1]].tolist()),
           "test": sorted(order[counts[0] + counts[1]:].tolist())}
    splits = {name: [generate_sequence(config, i) for i in seq_ids] for name, seq_ids in ids.items()}
    manifest = {
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "count": count,
        "split_ratios": list(split_ratios),
        "splits": ids,
        "label_histogram": {name: label_histogram(s, config.k) for name, s in splits.items()},
    }
    return Dataset(splits["train"], splits["val"], splits["test"], manifest)
