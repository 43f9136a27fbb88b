"""Alternating adversarial training over recurrent frame windows."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .codes import CODE_MAX, clamp_generated, decode_batch, encode_batch
from .engine import NumericError, OptimizerState, ParameterError, Tensor, UsageError, clip
from .engine import optim
from .losses import (LossReport, adversarial_generator_loss, cgan_loss, classifier_loss,
                     coupled_value, generator_objective)
from .variants import get_variant

log = logging.getLogger(__name__)

PAPER_SCHEDULE = ((0.1, 25), (0.01, 75))
DESK_SCHEDULE = ((2e-4, 40),)


@dataclass
class TrainConfig:
    batch_size: int = 32
    schedule: list = field(default_factory=lambda: [list(s) for s in DESK_SCHEDULE])
    lambda1: float = 1.0
    window_length: int = 16
    seed: int = 0
    variant: str = "h"
    optimizer: str = "adam"
    beta1: float = 0.5
    beta2: float = 0.999
    saturating: bool = False
    noise_at_inference: bool = False

    def __post_init__(self):
        self.schedule = [[float(lr), int(ep)] for lr, ep in self.schedule]
        get_variant(self.variant)
        if not self.schedule or any(lr <= 0 or ep <= 0 for lr, ep in self.schedule):
            raise ParameterError("schedule entries need positive learning rates and epoch counts")
        if self.window_length < 1 or self.batch_size < 1:
            raise ParameterError("window_length and batch_size must be at least 1")
        if self.lambda1 < 0:
            raise ParameterError("lambda1 must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")

    @property
    def total_epochs(self):
        return sum(ep for _, ep in self.schedule)

    def lr_at(self, epoch):
        """Learning rate for 1-based ``epoch``."""
        end = 0
        for lr, ep in self.schedule:
            end += ep
            if epoch <= end:
                return lr
        return self.schedule[-1][0]

    def boundaries(self):
        out, end = [], 0
        for _, ep in self.schedule:
            end += ep
            out.append(end)
        return out

    def to_dict(self):
        return asdict(self)


def paper_config(**kw):
    return TrainConfig(schedule=[list(s) for s in PAPER_SCHEDULE], **kw)


@dataclass
class TrainState:
    """Everything needed to continue training bit-identically."""
    bundle: object
    config: TrainConfig
    g_opt: OptimizerState
    d_opt: OptimizerState | None
    epoch: int = 0
    log: list = field(default_factory=list)


def new_state(bundle, config):
    def opt():
        return OptimizerState(kind=config.optimizer, learning_rate=config.lr_at(1),
                              beta1=config.beta1, beta2=config.beta2)
    d_opt = opt() if bundle.variant.has_discriminators else None
    return TrainState(bundle, config, opt(), d_opt)


def _check_finite(named):
    for name, value in named:
        if value is None:
            continue
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in {name}")


def generator_pass(bundle, rgb, aux, prev_rgb, prev_aux, rng, training=True, track_stats=True):
    """Forward the generator side. Returns a dict of tensors for one time step."""
    out = {"context": None, "raw1": None, "raw2": None, "taps1": None, "taps2": None}
    v = bundle.variant
    if v.has_context:
        out["context"] = bundle.context.forward(rgb, aux if v.has_aux else None, prev_rgb,
                                                prev_aux if v.has_aux else None,
                                                training=training, track_stats=track_stats)
    out["raw1"], out["taps1"] = bundle.g_a1.forward(rgb, out["context"], training=training, rng=rng,
                                                    track_stats=track_stats)
    if v.has_aux:
        out["raw2"], out["taps2"] = bundle.g_a2.forward(aux, out["context"], training=training, rng=rng,
                                                        track_stats=track_stats)
    return out


def discriminator_step(state, streams, real_code, learning_rate):
    """One joint update of the discriminators on (frame, real code) vs (frame, fake code).

    ``streams`` lists ``(name, discriminator, frame, fake_code)`` with fake codes
    as plain arrays, so no gradient reaches the generator side. Returns
    ``{name: (cgan value, real scores, fake scores)}`` measured before the update.
    """
    d_params = state.bundle.named_parameters("discriminator")
    d_total = None
    out = {}
    for name, disc, frame, fake in streams:
        feat = disc.features(frame)
        p_real = disc.score(feat, real_code)
        p_fake = disc.score(feat, fake)
        _check_finite([(f"{name} real score", p_real), (f"{name} fake score", p_fake)])
        value = cgan_loss(p_real, p_fake)
        out[name] = (float(value.data), p_real.data.copy(), p_fake.data.copy())
        d_total = -value if d_total is None else d_total - value
    state.d_opt.learning_rate = learning_rate
    d_total.backward()
    optim.step(d_params, state.d_opt)
    return out


def train_step(state, batch, rng):
    """One discriminator update per stream, then one generator-side update.

    ``batch`` holds ``rgb``, ``aux`` (N x H x W x C float arrays), ``prev_rgb``,
    ``prev_aux`` (N x k previous codes) and ``labels``. Returns the LossReport
    and the clamped generated codes for the next time step.
    """
    bundle, cfg = state.bundle, state.config
    v = bundle.variant
    k = bundle.preset.k
    rgb = Tensor(batch["rgb"])
    aux = Tensor(batch["aux"]) if v.has_aux else None
    labels = np.asarray(batch["labels"])
    real_code = encode_batch(labels, k)
    # ReLU masks would silently zero a NaN pixel, so inputs are checked up front
    _check_finite([("rgb frames", rgb), ("aux frames", aux), ("previous rgb code", batch["prev_rgb"]),
                   ("previous aux code", batch.get("prev_aux"))])

    gen = generator_pass(bundle, rgb, aux, batch["prev_rgb"], batch.get("prev_aux"), rng)
    code1 = clip(gen["raw1"], 0.0, CODE_MAX)
    code2 = clip(gen["raw2"], 0.0, CODE_MAX) if v.has_aux else None
    _check_finite([("context", gen["context"]), ("g_a1 code", gen["raw1"]), ("g_a2 code", gen["raw2"])])

    report = LossReport(lambda1=cfg.lambda1)
    streams = [("d1", bundle.d1, rgb, code1)]
    if v.has_aux:
        streams.append(("d2", bundle.d2, aux, code2))

    scores = {}
    if v.has_discriminators:
        lr = cfg.lr_at(state.epoch + 1)
        values = discriminator_step(state, [(n, d, f, c.data) for n, d, f, c in streams], real_code, lr)
        for name, (value, p_real, p_fake) in values.items():
            scores[name] = (p_real, p_fake)
            setattr(report, f"{name}_loss", -value)

    g_params = bundle.named_parameters("generator")
    objective = None
    l_c = None
    if v.has_classifier:
        taps = list(gen["taps1"]) + (list(gen["taps2"]) if v.dual_taps else [])
        dist = bundle.classifier.forward(taps)
        _check_finite([("classifier distribution", dist)])
        l_c = classifier_loss(dist, labels)
        report.classifier_loss = float(l_c.data)
    if v.has_discriminators:
        for i, (name, disc, frame, code) in enumerate(streams):
            # discriminator weights are frozen here: fresh features, no running-stat updates
            feat = Tensor(disc.features(frame, track_stats=False).data)
            p_fake = disc.score(feat, code)
            if i == 0:
                term = generator_objective(p_fake, l_c, cfg.lambda1, v, saturating=cfg.saturating)
                report.g1_adv = float(adversarial_generator_loss(p_fake, cfg.saturating).data)
            else:
                term = adversarial_generator_loss(p_fake, cfg.saturating)
                report.g2_adv = float(term.data)
            objective = term if objective is None else objective + term
    else:
        objective = l_c * cfg.lambda1 if cfg.lambda1 != 1.0 else l_c
    _check_finite([("generator objective", objective)])
    objective.backward()
    state.g_opt.learning_rate = cfg.lr_at(state.epoch + 1)
    optim.step(g_params, state.g_opt)
    if v.has_discriminators:
        for p in bundle.named_parameters("discriminator").values():
            p.grad = None

    lc_val = report.classifier_loss if v.has_classifier else 0.0
    if v.has_discriminators:
        v1 = float(cgan_loss(*scores["d1"]).data) - cfg.lambda1 * lc_val
        if v.has_aux:
            report.coupled_total = coupled_value(*scores["d1"], *scores["d2"], lc_val, cfg.lambda1)
        else:
            report.coupled_total = v1
    else:
        report.coupled_total = -cfg.lambda1 * lc_val

    next_rgb = clamp_generated(gen["raw1"].data)
    next_aux = clamp_generated(gen["raw2"].data) if v.has_aux else None
    return report, next_rgb, next_aux


# -- data windows ------------------------------------------------------------

def make_windows(dataset, window_length):
    """(sequence index, start) pairs tiling each sequence; the last window is end-aligned."""
    windows = []
    for si, s in enumerate(dataset):
        t = s.length
        if t < window_length:
            raise UsageError(f"sequence {s.id} has {t} frames, shorter than window_length={window_length}")
        starts = list(range(0, t - window_length + 1, window_length))
        if starts[-1] + window_length < t:
            starts.append(t - window_length)
        windows += [(si, st) for st in starts]
    return windows


def epoch_rng(seed, epoch):
    return np.random.default_rng([seed, 1_000_003, epoch])


def train_epoch(state, dataset):
    cfg, bundle = state.config, state.bundle
    k = bundle.preset.k
    v = bundle.variant
    rng = epoch_rng(cfg.seed, state.epoch + 1)
    windows = make_windows(dataset, cfg.window_length)
    order = rng.permutation(len(windows))
    sums = {}
    steps = 0
    L = cfg.window_length
    for b in range(0, len(order), cfg.batch_size):
        chosen = [windows[i] for i in order[b:b + cfg.batch_size]]
        rgb = np.stack([dataset[si].rgb[st:st + L] for si, st in chosen])
        aux = np.stack([dataset[si].aux[st:st + L] for si, st in chosen]) if v.has_aux else None
        labels = np.stack([dataset[si].labels[st:st + L] for si, st in chosen])
        n = len(chosen)
        prev_rgb = np.zeros((n, k), np.float32)
        prev_aux = np.zeros((n, k), np.float32)
        for t in range(L):
            batch = {"rgb": rgb[:, t], "aux": aux[:, t] if aux is not None else None,
                     "prev_rgb": prev_rgb, "prev_aux": prev_aux, "labels": labels[:, t]}
            report, prev_rgb, nxt_aux = train_step(state, batch, rng)
            if nxt_aux is not None:
                prev_aux = nxt_aux
            for key, val in report.as_dict().items():
                sums[key] = sums.get(key, 0.0) + val
            steps += 1
    state.epoch += 1
    return {key: val / steps for key, val in sums.items()}


def train_sequences(state, dataset, epochs=None, on_epoch_end=None):
    """Train ``state`` in place until ``epochs`` (default: the full schedule) are done."""
    if not dataset:
        raise UsageError("training dataset is empty")
    cfg = state.config
    target = cfg.total_epochs if epochs is None else epochs
    while state.epoch < target:
        t0 = time.perf_counter()
        means = train_epoch(state, dataset)
        record = {"epoch": state.epoch, "learning_rate": cfg.lr_at(state.epoch), **means,
                  "seconds": time.perf_counter() - t0}
        state.log.append(record)
        log.info("epoch %d lr %.3g L_c %.4f d1 %.4f g1 %.4f (%.1fs)", state.epoch, record["learning_rate"],
                 record["classifier_loss"], record["d1_loss"], record["g1_adv"], record["seconds"])
        if on_epoch_end is not None:
            on_epoch_end(state)
    return state


# -- inference ---------------------------------------------------------------

def predict_sequences(bundle, samples, noise_at_inference=False, seed=0):
    """Recurrent eval-mode prediction for equal-length sequences, run as one batch.

    Returns ``(labels, distributions)`` arrays of shape N x T and N x T x k.
    """
    v = bundle.variant
    k = bundle.preset.k
    lengths = {s.length for s in samples}
    if len(lengths) != 1:
        raise UsageError("predict_sequences needs sequences of equal length")
    hw = bundle.preset.input_hw
    for s in samples:
        if s.rgb.shape[1:] != (hw, hw, bundle.preset.rgb_channels):
            from .engine import DimensionError
            raise DimensionError(f"frames of shape {s.rgb.shape[1:]} do not match preset {bundle.preset.name}")
    (T,) = lengths
    n = len(samples)
    rng = np.random.default_rng([seed, 17]) if noise_at_inference else None
    prev_rgb = np.zeros((n, k), np.float32)
    prev_aux = np.zeros((n, k), np.float32)
    labels = np.empty((n, T), dtype=np.int64)
    dists = np.empty((n, T, k), dtype=np.float64)
    for t in range(T):
        rgb = Tensor(np.stack([s.rgb[t] for s in samples]))
        aux = Tensor(np.stack([s.aux[t] for s in samples])) if v.has_aux else None
        gen = _eval_generators(bundle, rgb, aux, prev_rgb, prev_aux, rng)
        code1 = clamp_generated(gen["raw1"].data)
        if v.has_classifier:
            taps = list(gen["taps1"]) + (list(gen["taps2"]) if v.dual_taps else [])
            dist = bundle.classifier.forward(taps).data.astype(np.float64)
            pred = np.argmax(dist, axis=-1)
        else:
            c = code1.astype(np.float64)
            tot = c.sum(axis=-1, keepdims=True)
            dist = np.where(tot > 0, c / np.where(tot > 0, tot, 1.0), 1.0 / k)
            pred = decode_batch(code1)
        labels[:, t] = pred
        dists[:, t] = dist
        prev_rgb = code1
        if v.has_aux:
            prev_aux = clamp_generated(gen["raw2"].data)
    return labels, dists


def _eval_generators(bundle, rgb, aux, prev_rgb, prev_aux, rng):
    # with an rng the dropout noise stays on; batch norm uses running statistics either way
    return generator_pass(bundle, rgb, aux, prev_rgb, prev_aux, rng, training=False)


def predict_sequence(bundle, sample, noise_at_inference=False, seed=0):
    labels, dists = predict_sequences(bundle, [sample], noise_at_inference, seed)
    return labels[0], dists[0]


def predict_dataset(bundle, samples, **kw):
    """Predict every sample, batching equal-length sequences together."""
    out = [None] * len(samples)
    by_len = {}
    for i, s in enumerate(samples):
        by_len.setdefault(s.length, []).append(i)
    for idx in by_len.values():
        labels, dists = predict_sequences(bundle, [samples[i] for i in idx], **kw)
        for j, i in enumerate(idx):
            out[i] = (labels[j], dists[j])
    return out
