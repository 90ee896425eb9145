"""Distance matrices and the three adjacency forms built from them.

All functions broadcast over leading axes and accept either arrays or
:class:`~mgrnet.autodiff.Tensor` values for their learnable arguments.
``1 - sigmoid(x)`` is evaluated as ``sigmoid(-x)`` so entries stay strictly
positive for large distances.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .core import NonFiniteError


@dataclass(frozen=True)
class ModalityGraph:
    dist: np.ndarray
    adj: np.ndarray


def distance_matrix(X):
    """Pairwise Euclidean distances between the rows of ``X``.

    ``X`` has shape ``(..., n, D)``; the result ``(..., n, n)`` is exactly
    symmetric with a zero diagonal.
    """
    v = ad.value(X)
    if v.ndim < 2:
        raise ValueError(f"distance_matrix expects (..., n, D), got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("distance_matrix: non-finite input")
    return ad.pairwise_distance(X)


def row_normalize(adj):
    return ad.div(adj, ad.sum_(adj, axis=-1, keepdims=True))


def local_adjacency(dist, alpha=0.0, beta=1.0, row_normalize_adjacency: bool = False):
    """``1 - sigmoid((dist + alpha) * beta)``, optionally row-normalized."""
    adj = ad.sigmoid(ad.mul(ad.mul(ad.add(dist, alpha), beta), -1.0))
    return row_normalize(adj) if row_normalize_adjacency else adj


def token_adjacency(dist):
    """Fixed structure map ``1 - sigmoid(dist)`` over all tokens."""
    return ad.sigmoid(ad.mul(dist, -1.0))


def recon_adjacency(dist, t):
    """Reconstruction structure map ``1 - sigmoid(t * dist)``."""
    return ad.sigmoid(ad.mul(ad.mul(dist, t), -1.0))


def build_graph(X, alpha: float = 0.0, beta: float = 1.0, row_normalize_adjacency: bool = False) -> ModalityGraph:
    dist = distance_matrix(np.asarray(X, dtype=np.float64))
    return ModalityGraph(dist=dist, adj=local_adjacency(dist, alpha, beta, row_normalize_adjacency))
