"""Parameterised layers and a sequential container built from LayerSpecs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .tensor import ParameterError, Tensor, relu

LAYER_KINDS = ("conv2d", "batch_norm", "relu", "dense", "softmax", "dropout", "flatten", "concat")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0          # filters for conv2d, units for dense, channels for batch_norm
    rate: float = 0.0       # dropout
    eps: float = 1e-5
    momentum: float = 0.9
    kernel: int = F.KERNEL
    stride: int = F.STRIDE
    padding: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ParameterError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d" and (self.kernel, self.stride, self.padding) != (4, 2, 1):
            raise ParameterError("conv2d is fixed at 4x4 filters, stride 2, padding 1")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ParameterError(f"dropout rate must lie in [0, 1), got {self.rate}")


class Module:
    """Owns named parameter tensors and batch-norm state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.bn_states: dict[str, F.BatchNormState] = {}
        self.children: dict[str, Module] = {}

    def add_child(self, name, module):
        self.children[name] = module
        return module

    def named_parameters(self, prefix=""):
        out = {}
        for name, p in self.params.items():
            out[prefix + name] = p
        for cname, child in self.children.items():
            out.update(child.named_parameters(f"{prefix}{cname}/"))
        return out

    def named_bn_states(self, prefix=""):
        out = {prefix + k: v for k, v in self.bn_states.items()}
        for cname, child in self.children.items():
            out.update(child.named_bn_states(f"{prefix}{cname}/"))
        return out

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.grad = None

    def parameter_count(self):
        return int(sum(p.size for p in self.named_parameters().values()))


def init_normal(rng, shape, std=0.02, mean=0.0, dtype=np.float32):
    return (mean + std * rng.standard_normal(shape)).astype(dtype)


class Sequential(Module):
    """A chain of LayerSpecs; ``concat`` splices in an extra input."""

    def __init__(self, specs, in_shape, rng, dtype=np.float32):
        super().__init__()
        self.specs = list(specs)
        self.dtype = dtype
        self.const = {}
        self.shapes = []        # per-layer output shape (without batch axis)
        shape = tuple(in_shape)
        for i, spec in enumerate(self.specs):
            key = f"{i:02d}_{spec.kind}"
            if spec.kind == "conv2d":
                h, w, c = shape
                self.params[key + "/filters"] = Tensor(init_normal(rng, (4, 4, c, spec.units), dtype=dtype),
                                                       requires_grad=True, name=key + "/filters")
                followed_by_bn = i + 1 < len(self.specs) and self.specs[i + 1].kind == "batch_norm"
                if followed_by_bn:
                    # batch norm cancels any per-channel shift, so the bias stays a fixed zero
                    self.const[key + "/bias"] = Tensor(np.zeros(spec.units, dtype))
                else:
                    self.params[key + "/bias"] = Tensor(np.zeros(spec.units, dtype), requires_grad=True,
                                                        name=key + "/bias")
                shape = (F.conv_output_size(h), F.conv_output_size(w), spec.units)
            elif spec.kind == "batch_norm":
                c = shape[-1]
                self.params[key + "/gamma"] = Tensor(init_normal(rng, (c,), mean=1.0, dtype=dtype),
                                                     requires_grad=True, name=key + "/gamma")
                self.params[key + "/beta"] = Tensor(np.zeros(c, dtype), requires_grad=True, name=key + "/beta")
                self.bn_states[key] = F.BatchNormState(c, spec.momentum, spec.eps, dtype)
            elif spec.kind == "dense":
                (d,) = shape
                self.params[key + "/weights"] = Tensor(init_normal(rng, (d, spec.units), dtype=dtype),
                                                       requires_grad=True, name=key + "/weights")
                self.params[key + "/bias"] = Tensor(np.zeros(spec.units, dtype), requires_grad=True,
                                                    name=key + "/bias")
                shape = (spec.units,)
            elif spec.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif spec.kind == "concat":
                (d,) = shape
                shape = (d + spec.units,)
            self.shapes.append(shape)
        self.out_shape = shape

    def forward(self, x, extra=None, training=True, rng=None, track_stats=True, taps=(), dropout_rate=None):
        """Run the chain. Returns (output, {layer_index: activation}) for requested taps.

        Layer indices in ``taps`` refer to positions in ``specs`` (0-based).
        """
        tapped = {}
        for i, spec in enumerate(self.specs):
            key = f"{i:02d}_{spec.kind}"
            if spec.kind == "conv2d":
                bkey = key + "/bias"
                bias = self.params[bkey] if bkey in self.params else self.const[bkey]
                x = F.conv2d(x, self.params[key + "/filters"], bias)
            elif spec.kind == "batch_norm":
                x = F.batch_norm(x, self.params[key + "/gamma"], self.params[key + "/beta"],
                                 self.bn_states[key], mode="train" if training else "eval",
                                 track=track_stats)
            elif spec.kind == "relu":
                x = relu(x)
            elif spec.kind == "dense":
                x = F.dense(x, self.params[key + "/weights"], self.params[key + "/bias"])
            elif spec.kind == "softmax":
                x = F.softmax(x)
            elif spec.kind == "dropout":
                # noise is drawn whenever an rng is supplied, so eval mode can keep it on
                rate = spec.rate if dropout_rate is None else dropout_rate
                x = F.dropout(x, rate, rng, training=rng is not None)
            elif spec.kind == "flatten":
                x = F.flatten(x)
            elif spec.kind == "concat":
                if extra is None:
                    raise ParameterError("concat layer needs an extra input")
                x = F.concat([x, extra], axis=-1)
            if i in taps:
                tapped[i] = x
        return x, tapped
