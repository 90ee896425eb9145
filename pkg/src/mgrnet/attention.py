"""Class-token-query multi-head attention and cross-modality fusion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .core import ShapeError


@dataclass
class FusedEmbedding:
    per_modality: dict  # modality -> (D,)
    fused: np.ndarray  # (3D,), order N | R | T


def attention_weights(class_token, patches, W_Q, W_K, H: int, tau: float):
    """Per-head attention of the class token over patches, ``(..., H, 1, P)``."""
    D = ad.value(class_token).shape[-1]
    if D % H:
        raise ShapeError(f"attention: D={D} not divisible by H={H}")
    dh = D // H
    P = ad.value(patches).shape[-2]
    q = ad.matmul(ad.reshape(class_token, ad.value(class_token).shape[:-1] + (1, D)), W_Q)
    k = ad.matmul(patches, W_K)
    lead = np.broadcast_shapes(ad.value(q).shape[:-2], ad.value(k).shape[:-2])
    q = ad.swapaxes(ad.reshape(q, lead + (1, H, dh)), -2, -3)  # (..., H, 1, dh)
    k = ad.swapaxes(ad.reshape(k, lead + (P, H, dh)), -2, -3)  # (..., H, P, dh)
    logits = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / tau)  # (..., H, 1, P)
    return ad.softmax(logits, axis=-1), lead


def mha_global(class_token, patches, W_Q, W_K, W_V, H: int, tau: float):
    """Aggregate patches into a new class token.

    ``class_token`` is ``(..., D)`` and ``patches`` ``(..., P, D)``; the
    projection matrices broadcast against the leading axes. Head outputs are
    concatenated without an output projection.
    """
    D = ad.value(class_token).shape[-1]
    if ad.value(patches).shape[-1] != D:
        raise ShapeError("mha_global: class token and patches disagree on D")
    attn, lead = attention_weights(class_token, patches, W_Q, W_K, H, tau)
    dh = D // H
    P = ad.value(patches).shape[-2]
    v = ad.matmul(patches, W_V)
    v = ad.swapaxes(ad.reshape(v, lead + (P, H, dh)), -2, -3)  # (..., H, P, dh)
    out = ad.matmul(attn, v)  # (..., H, 1, dh)
    return ad.reshape(out, lead + (D,))


def fuse(f_N, f_R, f_T):
    """Concatenate per-modality embeddings in N, R, T order."""
    shapes = {ad.value(x).shape[-1] for x in (f_N, f_R, f_T)}
    if len(shapes) != 1:
        raise ShapeError(f"fuse: length mismatch {sorted(shapes)}")
    return ad.concat([f_N, f_R, f_T], axis=-1)


def split_fused(z) -> tuple:
    z = np.asarray(z)
    D = z.shape[-1] // 3
    return z[..., :D], z[..., D : 2 * D], z[..., 2 * D :]
