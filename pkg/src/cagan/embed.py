"""Layer activations of the RGB generator projected to 2-D by PCA."""
from __future__ import annotations

import numpy as np

from .codes import clamp_generated
from .engine import Tensor, UsageError


def power_iteration(mat, tol=1e-11, max_iter=200_000, rng=None, scale=None):
    """Dominant eigenpair of a symmetric PSD matrix.

    Stops once ||M v - lambda v|| <= tol * scale. ``scale`` defaults to the
    trace; pass the undeflated trace so a near-zero remainder stops at once.
    """
    n = mat.shape[0]
    rng = np.random.default_rng(0) if rng is None else rng
    if scale is None:
        scale = float(np.trace(mat))
    scale = max(scale, np.finfo(float).tiny)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = mat @ v
        lam = float(v @ w)
        if np.linalg.norm(w - lam * v) <= tol * scale:
            return lam, v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        v = w / norm
    return lam, v


def pca_components(x, n_components=2, tol=1e-11, seed=0):
    """Top principal directions by power iteration with deflation.

    Returns (components as rows, explained variances, column means).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise UsageError(f"need a 2-D activation matrix, got shape {x.shape}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / max(x.shape[0] - 1, 1)
    scale = float(np.trace(cov))
    rng = np.random.default_rng(seed)
    comps, variances = [], []
    work = cov.copy()
    for _ in range(n_components):
        lam, v = power_iteration(work, tol, rng=rng, scale=scale)
        # re-orthogonalise against earlier directions to keep rounding from leaking back
        for c in comps:
            v = v - (c @ v) * c
        nv = np.linalg.norm(v)
        v = v / nv if nv > 0 else v
        lam = float(v @ cov @ v)
        comps.append(v)
        variances.append(max(lam, 0.0))
        work = work - lam * np.outer(v, v)
    return np.array(comps), np.array(variances), mean


def pca_project(x, n_components=2, tol=1e-11, seed=0):
    if len(x) < 3:
        raise UsageError(f"PCA export needs at least 3 samples, got {len(x)}")
    comps, _, mean = pca_components(x, n_components, tol, seed)
    return (np.asarray(x, dtype=np.float64) - mean) @ comps.T


def collect_activations(bundle, samples, stride=1):
    """Flattened RGB-generator block-5 activations for every ``stride``-th frame.

    The recurrent pass runs in eval mode exactly as at prediction time, so the
    context input sees the model's own previous codes. Returns (ids, classes,
    activations) where ids are ``"<sequence>:<frame>"`` strings.
    """
    v = bundle.variant
    k = bundle.preset.k
    ids, classes, rows = [], [], []
    for s in samples:
        prev_rgb = np.zeros((1, k), np.float32)
        prev_aux = np.zeros((1, k), np.float32)
        for t in range(s.length):
            rgb = Tensor(s.rgb[t:t + 1])
            aux = Tensor(s.aux[t:t + 1]) if v.has_aux else None
            context = None
            if v.has_context:
                context = bundle.context.forward(rgb, aux, prev_rgb, prev_aux if v.has_aux else None,
                                                 training=False)
            raw, _, act = bundle.g_a1.forward(rgb, context, training=False, embed=True)
            if t % stride == 0:
                ids.append(f"{s.id}:{t}")
                classes.append(int(s.labels[t]))
                rows.append(act.data.reshape(-1).astype(np.float64))
            prev_rgb = clamp_generated(raw.data)
            if v.has_aux:
                raw2, _ = bundle.g_a2.forward(aux, context, training=False)
                prev_aux = clamp_generated(raw2.data)
    return ids, np.array(classes, dtype=np.int64), np.array(rows)


def export_rows(ids, classes, projected):
    header = "sample_id,class,pc1,pc2\n"
    lines = [f"{i},{c},{p[0]:.17g},{p[1]:.17g}\n" for i, c, p in zip(ids, classes, projected)]
    return header + "".join(lines)
