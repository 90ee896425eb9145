"""Embedding extraction and mAP / CMC evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core import MOD_INDEX, ConfigError, ModelParams, PipelineOptions, Scenario
from .model import encode
from .reasoning import recover_tokens
from .synth import FeatureBank

CMC_RANKS = (1, 5, 10)


@dataclass
class Metrics:
    mAP: float
    cmc: dict  # K -> fraction of queries with a positive in the top K
    per_query_ap: list = field(default_factory=list)

    def to_dict(self, include_per_query: bool = True) -> dict:
        out = {"mAP": self.mAP, "cmc": {str(k): v for k, v in self.cmc.items()}}
        if include_per_query:
            out["per_query_ap"] = list(self.per_query_ap)
        return out


@dataclass
class Embeddings:
    identities: np.ndarray
    groups: np.ndarray
    z: np.ndarray

    def __iter__(self):
        for i in range(len(self.identities)):
            yield int(self.identities[i]), int(self.groups[i]), self.z[i]

    def __len__(self):
        return len(self.identities)


def prepare_tokens(bank: FeatureBank, params: ModelParams, scenario: Scenario, options: PipelineOptions, seed: int = 0):
    """Bank tokens with the scenario's modalities removed and refilled."""
    for m in set("RNT") - scenario.missing:
        if not bank.present[:, MOD_INDEX[m]].all():
            raise ConfigError(f"modality {m} is absent from the bank but not listed as missing")
    tokens = bank.tokens.copy()
    for m in scenario.missing:
        tokens[:, MOD_INDEX[m]] = 0.0
    return recover_tokens(tokens, scenario, params, options.recovery, seed)


def embed(
    bank: FeatureBank,
    params: ModelParams,
    scenario: Scenario = Scenario(),
    toggles: PipelineOptions = PipelineOptions(),
    seed: int = 0,
    chunk: int = 256,
) -> Embeddings:
    tokens = prepare_tokens(bank, params, scenario, toggles, seed)
    zs = [np.asarray(encode(params, tokens[i : i + chunk], toggles).z) for i in range(0, len(tokens), chunk)]
    z = np.concatenate(zs) if zs else np.zeros((0, 3 * params.config.D))
    return Embeddings(bank.identities.copy(), bank.groups.copy(), z)


def _distances(query, gallery, metric: str):
    query = np.atleast_2d(np.asarray(query, dtype=np.float64))
    gallery = np.asarray(gallery, dtype=np.float64)
    if metric == "euclidean":
        diff = query[:, None, :] - gallery[None, :, :]
        return np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))
    if metric == "cosine":
        qn = query / np.maximum(np.linalg.norm(query, axis=1, keepdims=True), 1e-12)
        gn = gallery / np.maximum(np.linalg.norm(gallery, axis=1, keepdims=True), 1e-12)
        return 1.0 - qn @ gn.T
    raise ValueError(f"unknown metric {metric!r}")


def rank(
    query,
    gallery,
    query_id: int | None = None,
    query_group: int | None = None,
    gallery_ids=None,
    gallery_groups=None,
    metric: str = "euclidean",
) -> np.ndarray:
    """Gallery indices by ascending distance, ties to the lower index.

    When identity/group information is given, gallery entries with the
    query's identity and group are dropped first.
    """
    d = _distances(query, gallery, metric)[0]
    idx = np.arange(len(d))
    if query_id is not None and gallery_ids is not None:
        gallery_ids = np.asarray(gallery_ids)
        gallery_groups = np.asarray(gallery_groups)
        idx = idx[~((gallery_ids == query_id) & (gallery_groups == query_group))]
    return idx[np.argsort(d[idx], kind="stable")]


def map_cmc(ranked_matches, ks=CMC_RANKS) -> Metrics:
    """mAP and CMC from per-query relevance vectors in ranked order.

    Queries without any positive are excluded.
    """
    aps, first = [], []
    for rel in ranked_matches:
        rel = np.asarray(rel, dtype=bool)
        hits = np.nonzero(rel)[0]
        if hits.size == 0:
            continue
        aps.append(float(np.mean(np.arange(1, hits.size + 1) / (hits + 1.0))))
        first.append(int(hits[0]))
    return _metrics(np.asarray(aps), np.asarray(first, dtype=np.int64), ks)


def _metrics(ap: np.ndarray, first_hit: np.ndarray, ks) -> Metrics:
    if ap.size == 0:
        return Metrics(0.0, {k: 0.0 for k in ks}, [])
    cmc = {k: float(np.mean(first_hit < k)) for k in ks}
    return Metrics(float(np.mean(ap)), cmc, [float(a) for a in ap])


def evaluate_embeddings(emb: Embeddings, metric: str = "euclidean", ks=CMC_RANKS) -> Metrics:
    """Every sample queries all others (same identity and group excluded)."""
    if metric == "euclidean":
        dist = _kernels.pdist(emb.z[None])[0]
    else:
        dist = _distances(emb.z, emb.z, metric)
    ap, first = _kernels.retrieval(dist, emb.identities, emb.groups, emb.identities, emb.groups)
    keep = ~np.isnan(ap)
    return _metrics(ap[keep], first[keep], ks)


def evaluate(
    bank: FeatureBank,
    params: ModelParams,
    scenario: Scenario = Scenario(),
    toggles: PipelineOptions = PipelineOptions(),
    metric: str = "euclidean",
    seed: int = 0,
) -> Metrics:
    return evaluate_embeddings(embed(bank, params, scenario, toggles, seed), metric)


def reconstruction_mse(
    bank: FeatureBank,
    params: ModelParams,
    scenario: Scenario,
    method: str = "grmm",
    seed: int = 0,
) -> float:
    """Mean squared token error of the refilled modalities against the real ones."""
    if not scenario.missing:
        return 0.0
    filled = prepare_tokens(bank, params, scenario, PipelineOptions(recovery=method), seed)
    cols = [MOD_INDEX[m] for m in sorted(scenario.missing)]
    return float(np.mean((filled[:, cols] - bank.tokens[:, cols]) ** 2))
