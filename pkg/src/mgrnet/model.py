"""Batched forward pass: graph build, swap, local reasoning, attention, fusion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import fuse, mha_global
from .core import MOD_INDEX, ModelParams, PipelineOptions
from .graph import distance_matrix, local_adjacency, row_normalize
from .reasoning import _layers, lgr_forward
from .sgns import apply_sgns


@dataclass
class Encoded:
    z: object  # (B, 3D) array or Tensor
    per_modality: object  # (B, 3, D), MODALITIES order
    swap_reports: list | None


def encode(params: ModelParams, tokens, options: PipelineOptions = PipelineOptions(), k: int | None = None) -> Encoded:
    """Fused embeddings of a ``(B, 3, P+1, D)`` token batch.

    Local adjacency is built from the pre-swap patches unless
    ``options.recompute_adjacency_after_swap`` is set.
    """
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 4 or tokens.shape[1:] != (3, cfg.P + 1, cfg.D):
        raise ValueError(f"encode: expected tokens (B, 3, {cfg.P + 1}, {cfg.D}), got {tokens.shape}")
    k = cfg.k if k is None else k
    cls = tokens[:, :, 0]
    patches = tokens[:, :, 1:]
    reports = None
    if options.enable_lgr:
        alpha = ad.reshape(params.alpha, (1, 3, 1, 1))
        beta = ad.reshape(params.beta, (1, 3, 1, 1))
        raw = local_adjacency(distance_matrix(patches), alpha, beta)
        feats = patches
        if options.enable_sgns and k > 0:
            feats, reports = apply_sgns(cls, patches, ad.value(raw), k, options.widen, options.edge_score)
            if options.recompute_adjacency_after_swap:
                raw = local_adjacency(distance_matrix(feats), alpha, beta)
        adj = row_normalize(raw) if cfg.row_normalize_adjacency else raw
        F = lgr_forward(adj, feats, _layers(params.lgr, 1))
    else:
        F = patches
    out = mha_global(cls, F, params.w_q, params.w_k, params.w_v, cfg.H, cfg.tau)
    z = fuse(out[:, MOD_INDEX["N"]], out[:, MOD_INDEX["R"]], out[:, MOD_INDEX["T"]])
    return Encoded(z=z, per_modality=out, swap_reports=reports)


def classify(params: ModelParams, z):
    return ad.add(ad.matmul(z, params.cls_w), params.cls_b)
