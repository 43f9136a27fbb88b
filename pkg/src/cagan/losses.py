"""Adversarial, classification and coupled objectives.

Value functions (``cgan_loss``, ``coupled_loss``) follow the max-min
convention: the discriminator maximises them. Training code minimises their
negation for the discriminator and a non-saturating surrogate for the
generator.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .engine import ParameterError, Tensor, UsageError, clip, log
from .engine.tensor import ensure_tensor
from .variants import get_variant

PROB_EPS = 1e-7


def _prob(p):
    p = ensure_tensor(p)
    if p.dtype != np.float64 and not p.requires_grad:
        p = Tensor(p.data.astype(np.float64))
    return clip(p, PROB_EPS, 1.0 - PROB_EPS)


def cgan_loss(d_real, d_fake):
    """Batch mean of log D(x, y) + log(1 - D(x, G(x)))."""
    return log(_prob(d_real)).mean() + log(1.0 - _prob(d_fake)).mean()


def classifier_loss(distribution, true_class):
    """Batch-mean negative log-likelihood of the true class."""
    dist = ensure_tensor(distribution)
    labels = np.asarray(true_class, dtype=np.int64).reshape(-1)
    if dist.data.ndim == 1:
        dist = dist.reshape(1, -1)
    picked = dist[np.arange(labels.size), labels]
    return -(log(_prob(picked)).mean())


def adversarial_generator_loss(d_fake, saturating=False):
    """-log D(fake) by default; the literal log(1 - D(fake)) when ``saturating``."""
    if saturating:
        return log(1.0 - _prob(d_fake)).mean()
    return -(log(_prob(d_fake)).mean())


def generator_objective(d_fake, l_c, lambda1, variant, saturating=False):
    """Generator-side minimisation objective: adversarial term plus lambda1 * L_c."""
    variant = get_variant(variant)
    if lambda1 < 0:
        raise ParameterError(f"lambda1 must be non-negative, got {lambda1}")
    if variant.has_classifier and l_c is None:
        raise UsageError(f"variant {variant.id} trains a classifier; l_c is required")
    if not variant.has_classifier and l_c is not None:
        raise UsageError(f"variant {variant.id} has no classifier; l_c must be None")
    total = None
    if variant.has_discriminators:
        total = adversarial_generator_loss(d_fake, saturating)
    if variant.has_classifier:
        term = ensure_tensor(l_c) * lambda1
        total = term if total is None else total + term
    if total is None:
        raise UsageError(f"variant {variant.id} has nothing to optimise")
    return total


@dataclass
class LossReport:
    d1_loss: float = 0.0
    d2_loss: float = 0.0
    g1_adv: float = 0.0
    g2_adv: float = 0.0
    classifier_loss: float = 0.0
    lambda1: float = 1.0
    coupled_total: float = 0.0

    def as_dict(self):
        return asdict(self)


def coupled_value(d1_real, d1_fake, d2_real, d2_fake, l_c, lambda1):
    """Coupled value as V*(G_A1, D_1) + V(G_A2, D_2), composed stream by stream."""
    v1 = float(cgan_loss(d1_real, d1_fake).data)
    v1_star = v1 - lambda1 * l_c
    v2 = float(cgan_loss(d2_real, d2_fake).data)
    return v1_star + v2


def coupled_value_expanded(d1_real, d1_fake, d2_real, d2_fake, l_c, lambda1):
    """The same value written out as four expectation terms minus lambda1 * L_c."""
    def mean_log(p, complement=False):
        p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
        return float(np.mean(np.log(1.0 - p if complement else p)))

    return (mean_log(d1_real) + mean_log(d1_fake, True)
            + mean_log(d2_real) + mean_log(d2_fake, True)
            - lambda1 * l_c)


def coupled_loss(d1_real, d1_fake, d2_real=None, d2_fake=None, l_c=0.0, lambda1=1.0, variant="h",
                 check=True):
    """Assemble a LossReport for the two-stream model.

    Variant ``h`` needs all four discriminator outputs. Variant ``c`` has no
    adversarial terms, so only the classification term is reported.
    """
    variant = get_variant(variant)
    if lambda1 < 0:
        raise ParameterError(f"lambda1 must be non-negative, got {lambda1}")
    if not variant.has_aux:
        raise UsageError(f"variant {variant.id} has a single stream; coupled loss needs both")
    if variant.has_discriminators:
        if any(v is None for v in (d1_real, d1_fake, d2_real, d2_fake)):
            raise UsageError("coupled loss needs real and fake scores from both discriminators")
        total = coupled_value(d1_real, d1_fake, d2_real, d2_fake, l_c, lambda1)
        if check:
            expanded = coupled_value_expanded(d1_real, d1_fake, d2_real, d2_fake, l_c, lambda1)
            if abs(total - expanded) > 1e-12 * max(1.0, abs(total)):
                raise ArithmeticError(f"coupled loss decomposition mismatch: {total!r} vs {expanded!r}")
        return LossReport(
            d1_loss=-float(cgan_loss(d1_real, d1_fake).data),
            d2_loss=-float(cgan_loss(d2_real, d2_fake).data),
            g1_adv=float(adversarial_generator_loss(d1_fake).data),
            g2_adv=float(adversarial_generator_loss(d2_fake).data),
            classifier_loss=float(l_c), lambda1=float(lambda1), coupled_total=total)
    return LossReport(classifier_loss=float(l_c), lambda1=float(lambda1), coupled_total=-lambda1 * float(l_c))
