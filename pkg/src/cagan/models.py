"""Network families: action generators, context extractor, discriminators, classifier head."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .codes import CODE_MAX
from .engine import (DimensionError, LayerSpec, Module, ParameterError, Sequential, Tensor,
                     UsageError, concat, sigmoid, softmax)
from .engine import functional as F
from .variants import AblationVariant, get_variant

GEN_CONV = (64, 128, 256, 512, 512, 512, 512, 512)
GEN_DENSE = (256, 128)
CTX_CONV = (64, 128, 256, 512, 512)
CTX_DENSE = 256
DISC_CONV = (64, 128)

# generator layer numbering used for classifier taps and embedding export:
# conv blocks 1-8, flatten/context concat 9, dense 10-12
TAP_LAYERS = (8, 10, 12)
EMBED_LAYER = 5


@dataclass(frozen=True)
class ArchPreset:
    name: str
    input_hw: int
    width_factor: Fraction
    k: int
    rgb_channels: int = 3
    aux_channels: int = 2
    noise_rate: float = 0.5
    bn_first: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.k < 2:
            raise ParameterError(f"need at least two classes, got k={self.k}")
        if self.aux_channels not in (1, 2):
            raise ParameterError("aux_channels must be 1 (depth-like) or 2 (flow-like)")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ParameterError("noise_rate must lie in [0, 1)")

    def scale(self, channels):
        return max(4, math.ceil(channels * self.width_factor))

    @property
    def gen_conv(self):
        return tuple(self.scale(c) for c in GEN_CONV)

    @property
    def gen_dense(self):
        return tuple(self.scale(c) for c in GEN_DENSE) + (self.k,)

    @property
    def ctx_conv(self):
        return tuple(self.scale(c) for c in CTX_CONV)

    @property
    def ctx_dense(self):
        return self.scale(CTX_DENSE)

    @property
    def disc_conv(self):
        return tuple(self.scale(c) for c in DISC_CONV)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type


def make_preset(name="desk32", k=6, aux_channels=2, width_factor=None, **kw):
    if name == "paper224":
        hw, wf = 224, Fraction(1)
    elif name == "desk32":
        hw, wf = 32, Fraction(1, 8)
    else:
        raise ParameterError(f"unknown preset {name!r}; expected paper224 or desk32")
    if width_factor is not None:
        wf = Fraction(width_factor).limit_denominator(1024)
    return ArchPreset(name, hw, wf, k, aux_channels=aux_channels, **kw)


def conv_blocks(ladder, bn_first=True):
    specs = []
    for i, c in enumerate(ladder):
        specs.append(LayerSpec("conv2d", c))
        if i > 0 or bn_first:
            specs.append(LayerSpec("batch_norm"))
        specs.append(LayerSpec("relu"))
    return specs


def _block_ends(specs):
    """Index of the last spec (the ReLU) of every conv block."""
    ends = []
    for i, s in enumerate(specs):
        if s.kind == "relu":
            ends.append(i)
    return ends


class Generator(Module):
    """Eight conv_BN_ReLU blocks, optional context concat, three dense layers."""

    def __init__(self, preset, in_channels, context_dim, rng):
        super().__init__()
        dt = preset.np_dtype
        hw = preset.input_hw
        self.k = preset.k
        self.context_dim = context_dim
        self.encoder = self.add_child("encoder", Sequential(
            conv_blocks(preset.gen_conv, preset.bn_first), (hw, hw, in_channels), rng, dtype=dt))
        d256, d128, dk = preset.gen_dense
        head = [LayerSpec("flatten")]
        if context_dim:
            head.append(LayerSpec("concat", context_dim))
        head += [LayerSpec("dense", d256), LayerSpec("relu"), LayerSpec("dropout", rate=preset.noise_rate),
                 LayerSpec("dense", d128), LayerSpec("relu"), LayerSpec("dropout", rate=preset.noise_rate),
                 LayerSpec("dense", dk)]
        self.head = self.add_child("head", Sequential(head, self.encoder.out_shape, rng, dtype=dt))
        self._block_ends = _block_ends(self.encoder.specs)
        dense_idx = [i for i, s in enumerate(head) if s.kind == "dense"]
        # taps on the head: post-ReLU/dropout output of dense-256, raw dense-k output
        self._head_taps = (dense_idx[0] + 2, dense_idx[2])

    @property
    def tap_dims(self):
        conv8 = int(np.prod(self.encoder.out_shape))
        return (conv8, self.head.specs[self._head_taps[0] - 2].units, self.k)

    def forward(self, frame, context=None, training=True, rng=None, track_stats=True, embed=False,
                noise_rate=None):
        if self.context_dim:
            if context is None:
                raise UsageError("this generator was built with a context extractor; context is required")
            if context.shape[-1] != self.context_dim:
                raise DimensionError(f"context length {context.shape[-1]} != {self.context_dim}")
        elif context is not None:
            raise UsageError("this generator takes no context input")
        want = (self._block_ends[EMBED_LAYER - 1],) if embed else ()
        h, enc_taps = self.encoder.forward(frame, training=training, rng=rng, track_stats=track_stats,
                                           taps=want)
        out, head_taps = self.head.forward(h, extra=context, training=training, rng=rng,
                                           track_stats=track_stats, taps=self._head_taps,
                                           dropout_rate=noise_rate)
        taps = [F.flatten(h), head_taps[self._head_taps[0]], out]
        raw_code = out * CODE_MAX
        if embed:
            return raw_code, taps, enc_taps[want[0]]
        return raw_code, taps


class ContextExtractor(Module):
    """Per-stream five-block conv chains fused with the previous action codes."""

    def __init__(self, preset, two_stream, rng):
        super().__init__()
        dt = preset.np_dtype
        hw = preset.input_hw
        self.k = preset.k
        self.two_stream = two_stream
        self.rgb = self.add_child("rgb", Sequential(
            conv_blocks(preset.ctx_conv, preset.bn_first), (hw, hw, preset.rgb_channels), rng, dtype=dt))
        feat = int(np.prod(self.rgb.out_shape))
        fused = feat + self.k
        if two_stream:
            self.aux = self.add_child("aux", Sequential(
                conv_blocks(preset.ctx_conv, preset.bn_first), (hw, hw, preset.aux_channels), rng, dtype=dt))
            fused += int(np.prod(self.aux.out_shape)) + self.k
        self.fuse = self.add_child("fuse", Sequential(
            [LayerSpec("dense", preset.ctx_dense), LayerSpec("relu")], (fused,), rng, dtype=dt))
        self.out_dim = preset.ctx_dense

    def forward(self, rgb, aux, prev_code_rgb, prev_code_aux=None, training=True, track_stats=True):
        parts = []
        h, _ = self.rgb.forward(rgb, training=training, track_stats=track_stats)
        parts += [F.flatten(h), _code_input(prev_code_rgb, self.k, rgb.dtype)]
        if self.two_stream:
            if aux is None or prev_code_aux is None:
                raise UsageError("two-stream context extractor needs the auxiliary frame and its previous code")
            h2, _ = self.aux.forward(aux, training=training, track_stats=track_stats)
            parts += [F.flatten(h2), _code_input(prev_code_aux, self.k, rgb.dtype)]
        out, _ = self.fuse.forward(concat(parts, axis=-1), training=training)
        return out


def _code_input(code, k, dtype):
    # previous codes never carry gradient into the previous time step
    arr = code.data if isinstance(code, Tensor) else np.asarray(code)
    if arr.shape[-1] != k:
        raise DimensionError(f"action code length {arr.shape[-1]} != k={k}")
    return Tensor((arr / CODE_MAX).astype(dtype))


class Discriminator(Module):
    """Two conv_BN_ReLU blocks on the frame, concat the code, one logistic unit."""

    def __init__(self, preset, in_channels, rng):
        super().__init__()
        dt = preset.np_dtype
        hw = preset.input_hw
        self.k = preset.k
        self.encoder = self.add_child("encoder", Sequential(
            conv_blocks(preset.disc_conv, preset.bn_first), (hw, hw, in_channels), rng, dtype=dt))
        feat = int(np.prod(self.encoder.out_shape))
        self.head = self.add_child("head", Sequential(
            [LayerSpec("concat", self.k), LayerSpec("dense", 1)], (feat,), rng, dtype=dt))

    def features(self, frame, training=True, track_stats=True):
        h, _ = self.encoder.forward(frame, training=training, track_stats=track_stats)
        return F.flatten(h)

    def score(self, features, code):
        """Probability that ``code`` is the real code for the frames behind ``features``."""
        if code.shape[-1] != self.k:
            raise DimensionError(f"action code length {code.shape[-1]} != k={self.k}")
        code_in = code * (1.0 / CODE_MAX) if isinstance(code, Tensor) else _code_input(code, self.k, features.dtype)
        logit, _ = self.head.forward(features, extra=code_in)
        return sigmoid(logit).reshape(-1)

    def forward(self, frame, code, training=True, track_stats=True):
        return self.score(self.features(frame, training, track_stats), code)


class ClassifierHead(Module):
    """Softmax classifier over concatenated generator taps."""

    def __init__(self, tap_dims, k, rng, dtype=np.float32):
        super().__init__()
        self.tap_dims = tuple(tap_dims)
        self.k = k
        self.net = self.add_child("net", Sequential([LayerSpec("dense", k)], (sum(self.tap_dims),), rng,
                                                    dtype=dtype))

    def logits(self, taps):
        if len(taps) != len(self.tap_dims):
            raise UsageError(f"classifier expects {len(self.tap_dims)} taps, got {len(taps)}")
        for t, d in zip(taps, self.tap_dims):
            if t.shape[-1] != d:
                raise DimensionError(f"tap width {t.shape[-1]} != expected {d}")
        out, _ = self.net.forward(concat(list(taps), axis=-1))
        return out

    def forward(self, taps):
        return softmax(self.logits(taps))


NETWORK_ORDER = ("g_a1", "g_a2", "context", "d1", "d2", "classifier")
GENERATOR_SIDE = ("g_a1", "g_a2", "context", "classifier")
DISCRIMINATOR_SIDE = ("d1", "d2")


@dataclass
class ModelBundle:
    preset: ArchPreset
    variant: AblationVariant
    g_a1: Generator
    g_a2: Generator | None = None
    context: ContextExtractor | None = None
    d1: Discriminator | None = None
    d2: Discriminator | None = None
    classifier: ClassifierHead | None = None
    seed: int = 0
    extras: dict = field(default_factory=dict)

    def networks(self):
        return {name: getattr(self, name) for name in NETWORK_ORDER if getattr(self, name) is not None}

    def named_parameters(self, side=None):
        names = {"generator": GENERATOR_SIDE, "discriminator": DISCRIMINATOR_SIDE}.get(side, NETWORK_ORDER)
        out = {}
        for name, net in self.networks().items():
            if name in names:
                out.update(net.named_parameters(name + "/"))
        return out

    def named_bn_states(self):
        out = {}
        for name, net in self.networks().items():
            out.update(net.named_bn_states(name + "/"))
        return out

    def parameter_counts(self):
        return {name: net.parameter_count() for name, net in self.networks().items()}


def build_bundle(preset, variant, seed=0):
    """Allocate and initialise every network the variant needs.

    Each network draws from its own seeded stream, so a variant's shared
    components start from identical weights whichever other networks exist.
    """
    variant = get_variant(variant)
    if preset.k < 2:
        raise ParameterError(f"need at least two classes, got k={preset.k}")

    def rng_for(name):
        return np.random.default_rng([seed, NETWORK_ORDER.index(name)])

    context = None
    ctx_dim = 0
    if variant.has_context:
        context = ContextExtractor(preset, two_stream=variant.has_aux, rng=rng_for("context"))
        ctx_dim = context.out_dim
    g_a1 = Generator(preset, preset.rgb_channels, ctx_dim, rng_for("g_a1"))
    g_a2 = Generator(preset, preset.aux_channels, ctx_dim, rng_for("g_a2")) if variant.has_aux else None
    d1 = d2 = None
    if variant.has_discriminators:
        d1 = Discriminator(preset, preset.rgb_channels, rng_for("d1"))
        if variant.has_aux:
            d2 = Discriminator(preset, preset.aux_channels, rng_for("d2"))
    classifier = None
    if variant.has_classifier:
        dims = g_a1.tap_dims + (g_a2.tap_dims if variant.dual_taps else ())
        classifier = ClassifierHead(dims, preset.k, rng_for("classifier"), dtype=preset.np_dtype)
    return ModelBundle(preset, variant, g_a1, g_a2, context, d1, d2, classifier, seed=seed)


# -- functional entry points -------------------------------------------------

def context_forward(ctx_net, rgb, aux, prev_code_rgb, prev_code_aux=None, training=True):
    return ctx_net.forward(rgb, aux, prev_code_rgb, prev_code_aux, training=training)


def generator_forward(gen, frame, context=None, noise=None, rng=None, training=True):
    """Noise is drawn only when ``rng`` is given and, in eval mode, the NoiseSpec allows it."""
    rate = None
    if noise is not None:
        rate = noise.rate
        if not training and not noise.active_at_inference:
            rng = None
    return gen.forward(frame, context, training=training, rng=rng, noise_rate=rate)


def discriminator_forward(disc, frame, code, training=True):
    return disc.forward(frame, code, training=training)


def classifier_forward(head, taps):
    return head.forward(taps)


def ladder_of(seq):
    return [s.units for s in seq.specs if s.kind in ("conv2d", "dense")]


def architecture_audit(bundle):
    """Instantiated ladders and spatial sizes per network (for reports and tests)."""
    out = {"preset": bundle.preset.name, "variant": bundle.variant.id, "k": bundle.preset.k,
           "parameter_counts": bundle.parameter_counts()}
    for name in ("g_a1", "g_a2"):
        g = getattr(bundle, name)
        if g is not None:
            out[name] = {"conv": ladder_of(g.encoder), "dense": ladder_of(g.head),
                         "spatial": [shape[0] for spec, shape in zip(g.encoder.specs, g.encoder.shapes)
                                     if spec.kind == "conv2d"]}
    if bundle.context is not None:
        c = bundle.context
        out["context"] = {"conv": ladder_of(c.rgb), "dense": ladder_of(c.fuse),
                          "streams": 2 if c.two_stream else 1}
    for name in ("d1", "d2"):
        d = getattr(bundle, name)
        if d is not None:
            out[name] = {"conv": ladder_of(d.encoder), "dense": ladder_of(d.head)}
    if bundle.classifier is not None:
        out["classifier"] = {"taps": len(bundle.classifier.tap_dims), "in": sum(bundle.classifier.tap_dims)}
    return out
