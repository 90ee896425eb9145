"""Selective graph-node swap.

Low-quality patches are found per modality in two stages. First, nodes
whose adjacency row is weakest become candidates. Then the candidates
least tied to their modality's class token are kept. Each poor patch is
replaced by the same patch position of the other modalities. When every
donor is poor at that position too, the patch is zeroed and left to graph
propagation.

Selection is discrete and carries no gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import MODALITIES, TokenMatrix

# donors of each modality, in MODALITIES order (R, N, T)
_DONORS = {"R": ("N", "T"), "N": ("R",), "T": ("R",)}


@dataclass
class SwapReport:
    poor_indices: dict = field(default_factory=dict)  # modality -> list[int]
    actions: dict = field(default_factory=dict)  # modality -> list["swapped" | "zeroed"]
    sources: dict = field(default_factory=dict)  # modality -> list[str | None]

    def to_dict(self) -> dict:
        return {
            m: {
                "poor_indices": [int(i) for i in self.poor_indices.get(m, [])],
                "actions": list(self.actions.get(m, [])),
                "sources": list(self.sources.get(m, [])),
            }
            for m in MODALITIES
        }


def global_affinity(class_token, patches) -> np.ndarray:
    """``1 - softmax`` over patches of the class-token-to-patch distances."""
    cls = np.asarray(class_token, dtype=np.float64)
    pts = np.asarray(patches, dtype=np.float64)
    d = np.sqrt(np.sum((pts - cls[..., None, :]) ** 2, axis=-1))
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    return 1.0 - e / e.sum(axis=-1, keepdims=True)


def edge_scores(adj, how: str = "mean") -> np.ndarray:
    """Per-node score from the off-diagonal entries of each adjacency row."""
    adj = np.asarray(adj, dtype=np.float64)
    n = adj.shape[-1]
    off = ~np.eye(n, dtype=bool)
    if n == 1:
        return np.zeros(adj.shape[:-1])
    if how == "mean":
        return np.where(off, adj, 0.0).sum(axis=-1) / (n - 1)
    if how == "sum":
        return np.where(off, adj, 0.0).sum(axis=-1)
    if how == "min":
        return np.where(off, adj, np.inf).min(axis=-1)
    raise ValueError(f"unknown edge score {how!r}")


def select_poor_nodes(adj, W, k: int, widen: int = 2, edge_score: str = "mean") -> np.ndarray:
    """Indices of the ``k`` poor nodes of one graph, sorted ascending.

    Stage one keeps the ``widen * k`` nodes with the smallest edge score
    (capped at ``P``); stage two keeps the ``k`` of those with the smallest
    global affinity ``W``. Ties go to the lower index in both stages.
    """
    adj = np.asarray(adj, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    P = W.shape[0]
    if adj.shape != (P, P):
        raise ValueError(f"select_poor_nodes: adjacency {adj.shape} does not match W of length {P}")
    if k < 0 or k > P:
        raise ValueError(f"select_poor_nodes: k={k} outside [0, P={P}]")
    if widen < 1:
        raise ValueError(f"select_poor_nodes: widen must be >= 1, got {widen}")
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    s = edge_scores(adj, edge_score)
    m = min(widen * k, P)
    cand = np.argsort(s, kind="stable")[:m]
    cand = cand[np.lexsort((cand, W[cand]))][:k]
    return np.sort(cand).astype(np.int64)


def _swap_patches(patches: np.ndarray, poor: list) -> tuple[np.ndarray, SwapReport]:
    # patches: (3, P, D) in MODALITIES order; reads only pre-swap values
    out = patches.copy()
    poor_sets = {m: set(int(i) for i in poor[j]) for j, m in enumerate(MODALITIES)}
    report = SwapReport()
    for j, m in enumerate(MODALITIES):
        acts, srcs = [], []
        donors = _DONORS[m]
        for i in sorted(poor_sets[m]):
            good = [d for d in donors if i not in poor_sets[d]]
            if not good:
                out[j, i] = 0.0
                acts.append("zeroed")
                srcs.append(None)
                continue
            rows = [patches[MODALITIES.index(d), i] for d in good]
            out[j, i] = rows[0] if len(rows) == 1 else 0.5 * (rows[0] + rows[1])
            acts.append("swapped")
            srcs.append(good[0] if len(good) == 1 else "mean(" + ",".join(good) + ")")
        report.poor_indices[m] = sorted(poor_sets[m])
        report.actions[m] = acts
        report.sources[m] = srcs
    return out, report


def swap_nodes(R, N, T, poor_R, poor_N, poor_T):
    """Swap poor patches between modalities.

    ``R``, ``N`` and ``T`` are :class:`TokenMatrix` values or ``(P, D)``
    patch arrays; the result has the same kind. Returns ``(R', N', T', report)``.
    """
    inputs = (R, N, T)
    as_tokens = isinstance(R, TokenMatrix)
    patches = np.stack([x.patch_tokens if as_tokens else np.asarray(x, dtype=np.float64) for x in inputs])
    out, report = _swap_patches(patches, [poor_R, poor_N, poor_T])
    if as_tokens:
        res = tuple(TokenMatrix(x.class_token.copy(), out[j]) for j, x in enumerate(inputs))
    else:
        res = tuple(out[j] for j in range(3))
    return res + (report,)


def apply_sgns(class_tokens, patches, raw_adj, k: int, widen: int = 2, edge_score: str = "mean"):
    """Batched selection and swap.

    ``class_tokens`` (B, 3, D), ``patches`` (B, 3, P, D), ``raw_adj``
    (B, 3, P, P). Returns swapped patches and one report per sample.
    """
    W = global_affinity(class_tokens, patches)
    out = np.empty_like(patches)
    reports = []
    for b in range(patches.shape[0]):
        poor = [select_poor_nodes(raw_adj[b, j], W[b, j], k, widen, edge_score) for j in range(3)]
        out[b], rep = _swap_patches(patches[b], poor)
        reports.append(rep)
    return out, reports
