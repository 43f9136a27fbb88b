"""Central-difference gradient verification."""
from __future__ import annotations

import numpy as np

from . import tensor
from .tensor import NumericError, ParameterError


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / denom


def tensor_relative_error(analytic, numeric):
    """Norm-wise relative error of one gradient tensor."""
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def _evaluate(loss_fn, dtype, track):
    """Loss value in ``dtype``, plus the branch fingerprint when ``track``."""
    if not track:
        return np.asarray(loss_fn().data, dtype=dtype).reshape(()), None
    tensor.branch_log = []
    try:
        value = loss_fn()
        marks = b"".join(tensor.branch_log)
    finally:
        tensor.branch_log = None
    return np.asarray(value.data, dtype=dtype).reshape(()), marks


def sampled_relative_error(analytic_probed, numeric, full_norm, size):
    """Estimate of the whole-tensor norm-wise error from a uniform sample of coordinates.

    Scaling the probed residual by sqrt(size / m) makes its square an unbiased
    estimate of the full residual's square; with every coordinate probed this
    is exactly ``tensor_relative_error``.
    """
    analytic_probed = np.asarray(analytic_probed, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = np.sqrt(size / numeric.size)
    denom = max(full_norm, scale * np.linalg.norm(numeric), 1e-12)
    return float(scale * np.linalg.norm(analytic_probed - numeric) / denom)


def grad_check(loss_fn, params, eps=1e-5, max_entries=None, rng=None, oracle_dtype=np.float64,
               analytic=None, return_details=False, per_element=False, skip_kinks=True,
               scheme="central"):
    """Compare backprop gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` takes no arguments and returns a scalar Tensor computed from the
    tensors in ``params`` (a name -> Tensor mapping). The analytic gradient is
    taken at the parameters' own precision; the finite differences run with
    every parameter temporarily cast to ``oracle_dtype`` so the reference stays
    accurate when the network under test is single precision. A wider type
    such as ``np.longdouble`` tightens the reference further.

    ``max_entries`` caps how many coordinates per tensor are probed (drawn
    with ``rng``); ``None`` probes all of them. A sampled tensor reports the
    scaled estimate of its whole-tensor error (``sampled_relative_error``). ``analytic`` overrides the
    backprop gradients, which is how a corrupted gradient is fed to the
    detector in tests.

    With ``skip_kinks`` a probe whose +eps or -eps evaluation flips any ReLU or
    clip mask is discarded, since the difference quotient then straddles a
    point where the loss has no derivative. A replacement coordinate is drawn
    while untried ones remain.

    ``scheme="richardson"`` combines central differences at eps and 2*eps
    as (4 D(eps) - D(2 eps)) / 3, cancelling the eps**2 truncation term; it
    costs four loss evaluations per coordinate instead of two.

    The error of a parameter tensor is ``|a - n| / max(|a|, |n|, 1e-12)`` with
    Euclidean norms over the probed coordinates; ``per_element`` switches to
    elementwise ratios instead, which are dominated by rounding noise on
    near-zero coordinates at single precision.

    Returns the maximum relative error over parameter tensors, or
    ``(max_error, per_param)`` with ``return_details``. Discarded probes are
    counted in ``per_param["<name>:kinks"]``.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ParameterError(f"eps must lie in [1e-6, 1e-2], got {eps}")
    if scheme not in ("central", "richardson"):
        raise ParameterError(f"unknown difference scheme {scheme!r}")
    steps = (1,) if scheme == "central" else (1, 2)
    rng = np.random.default_rng(0) if rng is None else rng

    if analytic is None:
        for p in params.values():
            p.grad = None
        loss = loss_fn()
        if not np.isfinite(loss.data).all():
            raise NumericError("loss is not finite")
        loss.backward()
        analytic = {}
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite analytic gradient in {name}")
            analytic[name] = np.array(g, dtype=np.float64)
            p.grad = None

    originals = {name: p.data for name, p in params.items()}
    step = oracle_dtype(eps)
    worst = 0.0
    details = {}
    try:
        for p in params.values():
            p.data = p.data.astype(oracle_dtype)
        _, base = _evaluate(loss_fn, oracle_dtype, skip_kinks)
        for name, p in params.items():
            flat = p.data.reshape(-1)
            want = flat.size if max_entries is None else min(max_entries, flat.size)
            order = np.arange(flat.size) if max_entries is None else rng.permutation(flat.size)
            used, numeric, kinks = [], [], 0
            for i in order:
                if len(used) == want:
                    break
                old = flat[i]
                quotients = []
                crossed = False
                for mult in steps:
                    h = step * mult
                    flat[i] = old + h
                    fp, mp = _evaluate(loss_fn, oracle_dtype, skip_kinks)
                    flat[i] = old - h
                    fm, mm = _evaluate(loss_fn, oracle_dtype, skip_kinks)
                    flat[i] = old
                    if not (np.isfinite(fp) and np.isfinite(fm)):
                        raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
                    crossed = crossed or (skip_kinks and (mp != base or mm != base))
                    # difference in the oracle precision, rounded once at the end
                    quotients.append((fp - fm) / (2 * h))
                if crossed:
                    kinks += 1
                    continue
                used.append(i)
                if len(quotients) == 1:
                    numeric.append(float(quotients[0]))
                else:
                    numeric.append(float((4 * quotients[0] - quotients[1]) / 3))
            a = analytic[name].reshape(-1)[np.array(used, dtype=np.int64)]
            numeric = np.array(numeric)
            if not used:
                details[name] = 0.0
            elif per_element:
                details[name] = float(relative_error(a, numeric).max())
            elif len(used) < flat.size:
                details[name] = sampled_relative_error(a, numeric, np.linalg.norm(analytic[name]), flat.size)
            else:
                details[name] = tensor_relative_error(a, numeric)
            if kinks:
                details[name + ":kinks"] = kinks
            worst = max(worst, details[name])
    finally:
        for name, p in params.items():
            p.data = originals[name]
    return (worst, details) if return_details else worst
