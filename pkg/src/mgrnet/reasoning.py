"""GCN propagation for local reasoning and for missing-modality recovery."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .core import (
    DIRECTION_SRC,
    MOD_INDEX,
    MODALITIES,
    ConfigError,
    ModelParams,
    Scenario,
    ShapeError,
)
from .graph import distance_matrix, recon_adjacency, row_normalize

# a GCN stack is any sequence of (D, D) matrices, or a (L, D, D) array
GcnStack = Sequence


@dataclass
class ReconOutput:
    recovered: np.ndarray
    adjacency: np.ndarray


def gcn_layer(adj, F, theta):
    """One propagation step, ``ReLU(adj @ F @ theta)``."""
    a, f, t = ad.value(adj).shape, ad.value(F).shape, ad.value(theta).shape
    if a[-1] != f[-2] or a[-2] != a[-1] or f[-1] != t[-2]:
        raise ShapeError(f"gcn_layer: incompatible shapes adj {a}, F {f}, theta {t}")
    return ad.relu(ad.matmul(ad.matmul(adj, F), theta))


def lgr_forward(adj, patches, stack: GcnStack):
    F = patches
    for theta in stack:
        F = gcn_layer(adj, F, theta)
    return F


def _layers(stack, axis_count: int):
    # split a stacked (..., L, D, D) parameter into per-layer (..., D, D) slices
    n = ad.value(stack).shape[axis_count]
    idx = (slice(None),) * axis_count
    return [stack[idx + (l,)] for l in range(n)]


def grmm_forward(source_tokens, t, stack: GcnStack, row_normalize_adjacency: bool = True, adjacency=None) -> ReconOutput:
    """Recover a target modality's tokens from one source modality.

    ``adjacency`` overrides the propagation matrix (used by tests); by default
    it is ``1 - sigmoid(t * dist)`` of the source tokens, row-normalized when
    requested.
    """
    src = np.asarray(source_tokens, dtype=np.float64)
    raw = recon_adjacency(distance_matrix(src), t)
    prop = raw if adjacency is None else np.asarray(adjacency, dtype=np.float64)
    if adjacency is None and row_normalize_adjacency:
        prop = row_normalize(raw)
    out = lgr_forward(prop, src, stack)
    return ReconOutput(recovered=ad.value(out), adjacency=ad.value(raw))


def head_forward(params: ModelParams, tokens, row_normalize_adjacency: bool = True):
    """All six heads at once.

    ``tokens`` is ``(B, 3, P+1, D)``; returns ``(recovered, raw_adj, dist)``
    with recovered ``(B, 6, P+1, D)`` in ``DIRECTIONS`` order, the raw
    reconstruction adjacency ``(B, 6, n, n)`` and the per-modality token
    distances ``(B, 3, n, n)``.
    """
    dist = distance_matrix(tokens)
    src = np.asarray(tokens)[:, DIRECTION_SRC]
    t = ad.reshape(params.recon_t, (1, 6, 1, 1))
    raw = recon_adjacency(dist[:, DIRECTION_SRC], t)
    prop = row_normalize(raw) if row_normalize_adjacency else raw
    out = lgr_forward(prop, src, _layers(params.recon, 1))
    return out, raw, dist


def recover_tokens(
    tokens: np.ndarray,
    scenario: Scenario,
    params: ModelParams | None = None,
    method: str = "grmm",
    seed: int = 0,
) -> np.ndarray:
    """Fill the missing modalities of a ``(B, 3, P+1, D)`` batch.

    ``grmm`` averages the heads of every present donor; ``zero`` writes
    zeros; ``random`` writes seeded Gaussian tokens whose scale matches the
    present modalities of the same sample.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    out = tokens.copy()
    if not scenario.missing:
        return out
    donors = scenario.present
    if not donors:
        raise ConfigError("recover: scenario leaves no modality present")
    if method == "zero":
        for m in scenario.missing:
            out[:, MOD_INDEX[m]] = 0.0
        return out
    if method == "random":
        rng = np.random.default_rng([seed, 17])
        scale = tokens[:, [MOD_INDEX[d] for d in donors]].reshape(len(tokens), -1).std(axis=1)
        for m in sorted(scenario.missing, key=MOD_INDEX.get):
            noise = rng.standard_normal(tokens[:, 0].shape)
            out[:, MOD_INDEX[m]] = noise * scale[:, None, None]
        return out
    if method != "grmm":
        raise ConfigError(f"unknown recovery method {method!r}")
    if params is None:
        raise ConfigError("grmm recovery needs model parameters")
    rown = params.config.row_normalize_adjacency
    for m in scenario.missing:
        acc = 0.0
        for d in donors:
            t, stack = params.head(f"{d}2{m}")
            src = tokens[:, MOD_INDEX[d]]
            raw = recon_adjacency(distance_matrix(src), t)
            prop = row_normalize(raw) if rown else raw
            acc = acc + lgr_forward(prop, src, stack)
        out[:, MOD_INDEX[m]] = acc / len(donors)
    return out


def recover_missing(sample, scenario: Scenario, params: ModelParams, method: str = "grmm", seed: int = 0) -> dict:
    """Token matrices for every modality of one sample under ``scenario``.

    ``sample`` is a :class:`~mgrnet.synth.Sample` or a ``(3, P+1, D)`` array.
    Present modalities pass through unchanged.
    """
    if isinstance(sample, np.ndarray):
        arr = np.asarray(sample, dtype=np.float64)
    else:
        first = next(iter(sample.features.values()))
        arr = np.zeros((3,) + first.as_array().shape)
        for m, tm in sample.features.items():
            arr[MOD_INDEX[m]] = tm.as_array()
        absent = set(MODALITIES) - set(sample.features)
        if absent - scenario.missing:
            raise ConfigError(f"recover_missing: sample lacks {sorted(absent)} not declared missing")
    filled = recover_tokens(arr[None], scenario, params, method, seed)[0]
    return {m: filled[j] for j, m in enumerate(MODALITIES)}
