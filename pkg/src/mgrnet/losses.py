"""Training objectives.

Reconstruction terms compare every head against the real tokens of its
target modality. Identity terms are label-smoothed cross-entropy on the
fused embedding and a batch-hard triplet margin loss standing in for the
multi-modal margin objective.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from . import autodiff as ad
from .core import DIRECTION_TGT, DIRECTIONS, MOD_INDEX, MODALITIES, ModelParams, PipelineOptions, ShapeError
from .graph import distance_matrix, token_adjacency
from .model import classify, encode
from .reasoning import head_forward


@dataclass
class LossReport:
    l_f: dict = field(default_factory=dict)  # direction -> feature term
    l_s: dict = field(default_factory=dict)  # direction -> structure term
    l_rec: dict = field(default_factory=dict)  # modality -> L^m
    l_mr: float = 0.0
    l_ce: float = 0.0
    l_3m: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _check_same(a, b, name):
    sa, sb = ad.value(a).shape, ad.value(b).shape
    if sa != sb:
        raise ShapeError(f"{name}: shape mismatch {sa} vs {sb}")


def recon_feature_loss(x_hat, x_real):
    """Squared Frobenius error divided by the token count (rows)."""
    _check_same(x_hat, x_real, "recon_feature_loss")
    n = ad.value(x_real).shape[-2]
    return ad.mul(ad.sum_(ad.square(ad.sub(x_hat, x_real)), axis=(-2, -1)), 1.0 / n)


def recon_structure_loss(a_hat, a_real):
    """Squared Frobenius error between adjacency maps divided by their size."""
    _check_same(a_hat, a_real, "recon_structure_loss")
    n = ad.value(a_real).shape[-1]
    return ad.mul(ad.sum_(ad.square(ad.sub(a_hat, a_real)), axis=(-2, -1)), 1.0 / n)


def grmm_terms(params: ModelParams, tokens):
    """Per-sample, per-direction feature and structure terms, each ``(B, 6)``."""
    tokens = np.asarray(tokens, dtype=np.float64)
    rec, raw, dist = head_forward(params, tokens, params.config.row_normalize_adjacency)
    target = tokens[:, DIRECTION_TGT]
    a_real = token_adjacency(dist)[:, DIRECTION_TGT]
    return recon_feature_loss(rec, target), recon_structure_loss(raw, a_real)


def _sample_tokens(sample) -> np.ndarray:
    if isinstance(sample, np.ndarray):
        return np.asarray(sample, dtype=np.float64)
    missing = set(MODALITIES) - set(sample.features)
    if missing:
        raise ValueError(f"reconstruction loss needs all modalities, sample lacks {sorted(missing)}")
    return np.stack([sample.features[m].as_array() for m in MODALITIES])


def modality_recon_loss(sample, params: ModelParams, target_modality: str, structure_weight: float = 1.0) -> float:
    """Feature plus structure terms of the two heads that rebuild ``target_modality``."""
    l_f, l_s = grmm_terms(params, _sample_tokens(sample)[None])
    cols = [i for i, t in enumerate(DIRECTION_TGT) if t == MOD_INDEX[target_modality]]
    return float(np.sum(l_f[0, cols]) + structure_weight * np.sum(l_s[0, cols]))


def multi_modal_recon_loss(sample, params: ModelParams, structure_weight: float = 1.0) -> float:
    return sum(modality_recon_loss(sample, params, m, structure_weight) for m in MODALITIES)


def ce_loss(logits, label, smoothing: float = 0.1):
    """Label-smoothed cross-entropy.

    ``logits`` is ``(C,)`` with an integer label, or ``(B, C)`` with a
    label array; the batch form returns the mean.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    v = ad.value(logits)
    C = v.shape[-1]
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    target = np.full((labels.size, C), smoothing / C)
    target[np.arange(labels.size), labels] += 1.0 - smoothing
    if v.ndim == 1:
        target = target[0]
    per = ad.mul(ad.sum_(ad.mul(ad.log_softmax(logits, axis=-1), target), axis=-1), -1.0)
    return per if v.ndim == 1 else ad.mean(per)


def margin_loss(z, labels, margin: float = 0.3):
    """Batch-hard triplet loss over the rows of ``z``.

    For each anchor with at least one negative: ``max(0, hardest positive
    distance - hardest negative distance + margin)``; averaged over anchors.
    The anchor counts as its own positive.
    """
    labels = np.asarray(labels, dtype=np.int64)
    dist = distance_matrix(z)
    hp, hn = _kernels.batch_hard(ad.value(dist), labels)
    rows = np.nonzero(hn >= 0)[0]
    if rows.size == 0:
        return 0.0
    d_ap = dist[rows, hp[rows]]
    d_an = dist[rows, hn[rows]]
    return ad.mean(ad.relu(ad.add(ad.sub(d_ap, d_an), margin)))


def loss_terms(params: ModelParams, tokens, labels, config, options: PipelineOptions | None = None):
    """Total loss (array or Tensor) plus its report.

    ``config`` supplies ``smoothing``, ``margin``, ``enable_margin``,
    ``enable_sgns``, ``enable_grmm`` and ``structure_loss_weight``.
    """
    options = options or PipelineOptions()
    if options.enable_sgns != config.enable_sgns:
        options = PipelineOptions(**{**asdict(options), "enable_sgns": config.enable_sgns})
    report = LossReport()
    enc = encode(params, tokens, options)
    l_ce = ce_loss(classify(params, enc.z), labels, config.smoothing)
    report.l_ce = float(ad.value(l_ce))
    l_3m = 0.0
    if config.enable_margin:
        l_3m = margin_loss(enc.z, labels, config.margin)
        report.l_3m = float(ad.value(l_3m))
    l_mr = 0.0
    if config.enable_grmm:
        l_f, l_s = grmm_terms(params, tokens)
        w = getattr(config, "structure_loss_weight", 1.0)
        per_dir = ad.add(ad.mean(l_f, axis=0), ad.mul(ad.mean(l_s, axis=0), w))  # (6,)
        l_mr = ad.sum_(per_dir)
        lf, ls, pd = ad.value(l_f).mean(axis=0), ad.value(l_s).mean(axis=0), ad.value(per_dir)
        report.l_f = {d: float(lf[i]) for i, d in enumerate(DIRECTIONS)}
        report.l_s = {d: float(ls[i]) for i, d in enumerate(DIRECTIONS)}
        report.l_rec = {
            m: float(sum(pd[i] for i, t in enumerate(DIRECTION_TGT) if t == MOD_INDEX[m])) for m in MODALITIES
        }
        report.l_mr = float(ad.value(l_mr))
    total = ad.add(ad.add(l_mr, l_ce), l_3m)
    report.total = float(ad.value(total))
    return total, report


def total_loss(batch, params: ModelParams, config, options: PipelineOptions | None = None) -> LossReport:
    """Loss report of a :class:`~mgrnet.synth.FeatureBank` batch."""
    _, report = loss_terms(params, batch.tokens, batch.identities, config, options)
    return report
