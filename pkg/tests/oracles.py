"""Naive loop implementations that the vectorized code is checked against.

Nothing here imports the numerics under test; every value is computed with
plain Python loops over numpy scalars.
"""

from __future__ import annotations

import math
from typing import List, Optional, Sequence, Tuple

import numpy as np


def matmul_loop(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, p = a.shape
    q = b.shape[1]
    out = np.zeros((m, q))
    for i in range(m):
        for j in range(q):
            total = 0.0
            for k in range(p):
                total += a[i, k] * b[k, j]
            out[i, j] = total
    return out


def conv2d_loop(
    x: np.ndarray,
    w: np.ndarray,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> np.ndarray:
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    cout_g = cout // groups
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            g = o // cout_g
            for i in range(ho):
                for j in range(wo):
                    total = 0.0
                    for c in range(cin_g):
                        for u in range(kh):
                            for v in range(kw):
                                y = i * stride + u - padding
                                z = j * stride + v - padding
                                if 0 <= y < h and 0 <= z < wd:
                                    total += (
                                        x[b, g * cin_g + c, y, z]
                                        * w[o, c, u, v]
                                    )
                    out[b, o, i, j] = total
    return out


def _mean_var(values: List[float]) -> Tuple[float, float]:
    mu = sum(values) / len(values)
    var = sum((v - mu) ** 2 for v in values) / len(values)
    return mu, var


def moments_loop(
    x: np.ndarray, tag: str, groups: int = 1
) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and variance broadcast to one value per (n, c)."""
    n, c, h, w = x.shape
    mean = np.zeros((n, c))
    var = np.zeros((n, c))
    for b in range(n):
        for ch in range(c):
            if tag == "IN":
                members = [(b, ch)]
            elif tag == "LN":
                members = [(b, k) for k in range(c)]
            elif tag == "BN":
                members = [(s, ch) for s in range(n)]
            else:
                size = c // groups
                first = (ch // size) * size
                members = [(b, k) for k in range(first, first + size)]
            values = [
                float(x[s, k, i, j])
                for s, k in members
                for i in range(h)
                for j in range(w)
            ]
            mean[b, ch], var[b, ch] = _mean_var(values)
    return mean, var


def standardize_loop(
    x: np.ndarray, tag: str, eps: float, groups: int = 1
) -> np.ndarray:
    mean, var = moments_loop(x, tag, groups)
    out = np.zeros_like(x, dtype=np.float64)
    n, c, h, w = x.shape
    for b in range(n):
        for ch in range(c):
            scale = math.sqrt(var[b, ch] + eps)
            for i in range(h):
                for j in range(w):
                    out[b, ch, i, j] = (x[b, ch, i, j] - mean[b, ch]) / scale
    return out


def _softmax(row: Sequence[float]) -> List[float]:
    top = max(row)
    e = [math.exp(v - top) for v in row]
    total = sum(e)
    return [v / total for v in e]


def ratio_oracle(
    x: np.ndarray,
    tags: Sequence[str],
    params: dict,
    r: int,
    eps: float,
    variant: str = "none",
) -> np.ndarray:
    """The ratio subnet in stages: pool, pre-standardize, reduce,
    correlate, two FC layers and a softmax.

    ``params`` maps conv_w, fc1_w, fc1_b, fc2_w and fc2_b to arrays.
    """
    n, c, h, w = x.shape
    k = len(tags)
    pooled = [
        [
            sum(float(x[b, ch, i, j]) for i in range(h) for j in range(w))
            / (h * w)
            for ch in range(c)
        ]
        for b in range(n)
    ]
    moments = [moments_loop(x, tag) for tag in tags]

    rows = []
    for b in range(n):
        if variant == "a":
            features = pooled[b]
        else:
            x_hat = [
                [
                    (pooled[b][ch] - moments[m][0][b, ch])
                    / math.sqrt(moments[m][1][b, ch] + eps)
                    for ch in range(c)
                ]
                for m in range(k)
            ]
            if variant == "b":
                z = x_hat
            else:
                conv = params["conv_w"]
                z = [
                    [
                        sum(
                            conv[o, j, 0, 0] * x_hat[m][o * r + j]
                            for j in range(r)
                        )
                        for o in range(c // r)
                    ]
                    for m in range(k)
                ]
            features = [
                sum(z[p][d] * z[q][d] for d in range(len(z[p])))
                for p in range(k)
                for q in range(k)
            ]
        fc1_w, fc1_b = params["fc1_w"], params["fc1_b"]
        hidden = []
        for u in range(fc1_w.shape[1]):
            pre = fc1_b[u] + sum(
                features[i] * fc1_w[i, u] for i in range(len(features))
            )
            hidden.append(max(pre, 0.0) if variant == "c" else math.tanh(pre))
        fc2_w, fc2_b = params["fc2_w"], params["fc2_b"]
        logits = [
            fc2_b[m] + sum(hidden[u] * fc2_w[u, m] for u in range(len(hidden)))
            for m in range(k)
        ]
        rows.append(_softmax(logits))
    return np.asarray(rows)


def en_oracle(
    x: np.ndarray,
    tags: Sequence[str],
    gammas: Sequence[np.ndarray],
    betas: Sequence[np.ndarray],
    ratios: np.ndarray,
    eps: float,
    single_affine: bool = False,
) -> np.ndarray:
    """Sum over k of gamma_k * (ratio_nk * x_hat_k) + beta_k, elementwise."""
    n, c, h, w = x.shape
    standardized = [standardize_loop(x, tag, eps) for tag in tags]
    out = np.zeros((n, c, h, w))
    for b in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    total = 0.0
                    for m in range(len(tags)):
                        term = ratios[b, m] * standardized[m][b, ch, i, j]
                        if single_affine:
                            total += term
                        else:
                            total += gammas[m][ch] * term + betas[m][ch]
                    if single_affine:
                        total = gammas[0][ch] * total + betas[0][ch]
                    out[b, ch, i, j] = total
    return out


def group_means(
    rows: Sequence[Tuple[object, Sequence[float]]],
) -> dict:
    """Average the vectors that share a key, one loop at a time."""
    sums: dict = {}
    counts: dict = {}
    for key, vector in rows:
        if key not in sums:
            sums[key] = [0.0] * len(vector)
            counts[key] = 0
        for i, v in enumerate(vector):
            sums[key][i] += v
        counts[key] += 1
    return {
        key: [v / counts[key] for v in total] for key, total in sums.items()
    }


def param_records(
    params: Sequence[object], exclude: Optional[str] = None
) -> int:
    """Count scalar parameters one record at a time."""
    total = 0
    for p in params:
        name = getattr(p, "name", None)
        if exclude is not None and name is not None and exclude in name:
            continue
        total += int(np.prod(getattr(p, "shape")))
    return total
