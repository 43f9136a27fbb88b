"""The eight ablation variants, from a bare supervised generator to the full coupled model."""
from __future__ import annotations

from dataclasses import dataclass

from .engine import ParameterError


@dataclass(frozen=True)
class AblationVariant:
    id: str
    label: str
    has_context: bool
    has_aux: bool
    has_discriminators: bool
    has_classifier: bool
    dual_taps: bool = False

    @property
    def adversarial(self):
        return self.has_discriminators


VARIANTS = {
    "a": AblationVariant("a", "G_A1", False, False, False, True),
    "b": AblationVariant("b", "G_A1 + context", True, False, False, True),
    "c": AblationVariant("c", "G_A1 + context + G_A2", True, True, False, True, dual_taps=True),
    "d": AblationVariant("d", "conditional GAN", False, False, True, False),
    "e": AblationVariant("e", "unitary GAN - context", False, False, True, True),
    "f": AblationVariant("f", "unitary GAN - L_c", True, False, True, False),
    "g": AblationVariant("g", "unitary GAN", True, False, True, True),
    "h": AblationVariant("h", "coupled action GAN", True, True, True, True),
}


def get_variant(variant):
    if isinstance(variant, AblationVariant):
        return variant
    try:
        return VARIANTS[str(variant).lower()]
    except KeyError:
        raise ParameterError(f"unknown ablation variant {variant!r}; expected one of a-h") from None
