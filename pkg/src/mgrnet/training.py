"""Gradients, optimizer, schedule and training loop."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .core import ConfigError, ModelConfig, ModelParams, NonFiniteError, PipelineOptions, _from_mapping, init_params
from .losses import LossReport, loss_terms
from .synth import FeatureBank

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    batch_size: int = 64
    identities_per_batch: int = 4
    base_lr: float = 0.0066
    momentum: float = 0.9
    weight_decay: float = 1e-4
    smoothing: float = 0.1
    margin: float = 0.3
    enable_margin: bool = True
    enable_sgns: bool = True
    enable_grmm: bool = True
    seed: int = 0
    warmup_fraction: float = 0.1
    # 0 trains the heads on the feature term only
    structure_loss_weight: float = 1.0
    freeze_grmm: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.identities_per_batch < 1:
            raise ConfigError("TrainConfig: epochs >= 0, batch_size >= 1, identities_per_batch >= 1 required")
        if self.batch_size % self.identities_per_batch:
            raise ConfigError(
                f"TrainConfig: batch_size={self.batch_size} not divisible by "
                f"identities_per_batch={self.identities_per_batch}"
            )
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError("TrainConfig.smoothing must lie in [0, 1)")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("TrainConfig.warmup_fraction must lie in [0, 1]")

    @property
    def samples_per_identity(self) -> int:
        return self.batch_size // self.identities_per_batch

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return _from_mapping(cls, data, name="TrainConfig")

    @classmethod
    def paper_vit(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def paper_clip(cls, **kw) -> "TrainConfig":
        # Adam in the original setting; mapped onto SGD with the same scalars
        return cls(**{"epochs": 40, "base_lr": 0.00035, "enable_margin": False, **kw})

    @classmethod
    def toy(cls, **kw) -> "TrainConfig":
        return cls(**{"epochs": 20, "batch_size": 12, "identities_per_batch": 4, "base_lr": 0.05, **kw})


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _as_tensors(params: ModelParams) -> ModelParams:
    return params.replace(**{n: ad.Tensor(a) for n, a in params.arrays()})


def gradients(params: ModelParams, tokens, labels, config: TrainConfig, options: PipelineOptions | None = None):
    """Reverse-mode gradient of the total loss.

    Returns ``(grads, report)`` where ``grads`` is a :class:`ModelParams`
    holding d(total)/d(parameter) arrays. The poor-node selection is treated
    as piecewise constant.
    """
    tp = _as_tensors(params)
    total, report = loss_terms(tp, tokens, labels, config, options)
    if not math.isfinite(report.total):
        raise NonFiniteError(f"non-finite loss {report.total}")
    if isinstance(total, ad.Tensor):
        total.backward()
    grads = {}
    for name, t in tp.arrays():
        grads[name] = np.zeros_like(t.data) if t.grad is None else t.grad
    if config.freeze_grmm:
        grads["recon"] = np.zeros_like(grads["recon"])
        grads["recon_t"] = np.zeros_like(grads["recon_t"])
    return params.replace(**grads), report


def loss_value(params: ModelParams, tokens, labels, config: TrainConfig, options: PipelineOptions | None = None) -> float:
    total, _ = loss_terms(params, tokens, labels, config, options)
    return float(ad.value(total))


def loss_components(params: ModelParams, tokens, labels, config: TrainConfig, options: PipelineOptions | None = None) -> np.ndarray:
    """The additive pieces of the total loss: ce, margin, then per-direction feature and structure terms."""
    _, r = loss_terms(params, tokens, labels, config, options)
    w = config.structure_loss_weight
    parts = [r.l_ce, r.l_3m]
    parts += list(r.l_f.values()) + [w * v for v in r.l_s.values()]
    return np.asarray(parts)


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    num_checked: int
    per_param: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def relative_error(analytic, numeric, floor: float = 1e-6):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(
    params: ModelParams,
    tokens,
    labels,
    config: TrainConfig,
    options: PipelineOptions | None = None,
    step: float = 1e-5,
    floor: float = 1e-6,
) -> GradCheckResult:
    """Compare reverse-mode gradients with central differences on every entry.

    Differences are taken per additive loss component and summed, so pieces
    that do not depend on the perturbed entry cancel exactly instead of
    contributing rounding noise of the size of the whole loss. Relative
    error is ``|a - f| / max(|a|, |f|, floor)``.
    """
    grads, _ = gradients(params, tokens, labels, config, options)
    work = params.copy()
    worst = (0.0, "", ())
    per_param = {}
    count = 0
    for name, arr in work.arrays():
        g = getattr(grads, name)
        numeric = np.zeros_like(arr)
        for idx in np.ndindex(*arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            up = loss_components(work, tokens, labels, config, options)
            arr[idx] = orig - step
            down = loss_components(work, tokens, labels, config, options)
            arr[idx] = orig
            numeric[idx] = np.sum((up - down) / (2.0 * step))
            count += 1
        err = relative_error(g, numeric, floor)
        per_param[name] = float(err.max()) if err.size else 0.0
        if err.size and err.max() > worst[0]:
            worst = (float(err.max()), name, tuple(int(i) for i in np.unravel_index(err.argmax(), err.shape)))
    return GradCheckResult(worst[0], worst[1], worst[2], count, per_param)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    buffers: dict
    step: int
    base_lr: float
    warmup_steps: int
    total_steps: int
    momentum: float = 0.9
    weight_decay: float = 1e-4

    @classmethod
    def create(cls, params: ModelParams, base_lr, total_steps, warmup_steps=None, momentum=0.9, weight_decay=1e-4):
        if warmup_steps is None:
            warmup_steps = max(1, int(round(0.1 * total_steps)))
        return cls(
            buffers={n: np.zeros_like(a) for n, a in params.arrays()},
            step=0,
            base_lr=base_lr,
            warmup_steps=warmup_steps,
            total_steps=total_steps,
            momentum=momentum,
            weight_decay=weight_decay,
        )


def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup from ``base_lr / warmup_steps``, then cosine decay to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    frac = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * frac))


def sgd_step(params: ModelParams, grads: ModelParams, state: OptimState) -> tuple[ModelParams, OptimState]:
    """Momentum SGD with coupled weight decay; returns new params and state."""
    lr = lr_at(state.step, state.base_lr, state.warmup_steps, state.total_steps)
    new_arrays, new_buf = {}, {}
    for name, p in params.arrays():
        g = getattr(grads, name)
        v = state.buffers[name]
        if g.shape != p.shape or v.shape != p.shape:
            raise ConfigError(f"sgd_step: shape mismatch for {name}: param {p.shape}, grad {g.shape}, buffer {v.shape}")
        v = state.momentum * v + g + state.weight_decay * p
        new_buf[name] = v
        new_arrays[name] = p - lr * v
    return params.replace(**new_arrays), dataclasses.replace(state, buffers=new_buf, step=state.step + 1)


# ---------------------------------------------------------------------------
# sampling and loop
# ---------------------------------------------------------------------------


def pk_epoch(identities: np.ndarray, ids_per_batch: int, per_id: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of identity-balanced batches (row indices into the bank).

    Each identity's samples are shuffled and cut into groups of ``per_id``;
    identities with fewer samples are topped up by resampling, and an
    incomplete trailing group is dropped.
    """
    ids = np.unique(identities)
    if len(ids) < ids_per_batch:
        raise ConfigError(f"bank has {len(ids)} identities, batches need {ids_per_batch}")
    chunks: dict[int, list] = {}
    for ident in ids:
        rows = np.nonzero(identities == ident)[0]
        if len(rows) < per_id:
            rows = rng.choice(rows, size=per_id, replace=True)
        rows = rng.permutation(rows)
        chunks[int(ident)] = [rows[i : i + per_id] for i in range(0, len(rows) - per_id + 1, per_id)]
    batches = []
    available = sorted(i for i, c in chunks.items() if c)
    while len(available) >= ids_per_batch:
        picked = rng.choice(available, size=ids_per_batch, replace=False)
        batches.append(np.concatenate([chunks[int(i)].pop(0) for i in picked]))
        available = sorted(i for i, c in chunks.items() if c)
    return batches


def evaluation_snapshot(params, eval_bank, options):
    from .core import Scenario
    from .retrieval import evaluate

    return evaluate(eval_bank, params, Scenario(), options).to_dict(include_per_query=False)


def train(
    bank: FeatureBank,
    config: TrainConfig,
    model_config: ModelConfig,
    options: PipelineOptions | None = None,
    eval_bank: FeatureBank | None = None,
    init: ModelParams | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Train from ``init`` (default: ``init_params(model_config, config.seed)``).

    Returns the final parameters and a list of JSON-ready log records: one
    per step (``kind="step"``) and one per epoch (``kind="epoch"``).
    """
    if not bank.present.all():
        raise ConfigError("training bank must have every modality present")
    if bank.P != model_config.P or bank.D != model_config.D:
        raise ConfigError(f"bank shape P={bank.P}, D={bank.D} does not match model P={model_config.P}, D={model_config.D}")
    options = options or PipelineOptions()
    options = dataclasses.replace(options, enable_sgns=config.enable_sgns)
    params = init if init is not None else init_params(model_config, config.seed)
    rng = np.random.default_rng([config.seed, 99])
    plan = [pk_epoch(bank.identities, config.identities_per_batch, config.samples_per_identity, rng) for _ in range(config.epochs)]
    total_steps = sum(len(p) for p in plan)
    warmup = max(1, int(round(config.warmup_fraction * total_steps))) if total_steps else 0
    state = OptimState.create(params, config.base_lr, total_steps, warmup, config.momentum, config.weight_decay)
    records: list[dict] = []
    for epoch, batches in enumerate(plan):
        reports: list[LossReport] = []
        for rows in batches:
            lr = lr_at(state.step, state.base_lr, state.warmup_steps, state.total_steps)
            grads, report = gradients(params, bank.tokens[rows], bank.identities[rows], config, options)
            params, state = sgd_step(params, grads, state)
            reports.append(report)
            records.append(
                {
                    "kind": "step",
                    "epoch": epoch,
                    "step": state.step - 1,
                    "lr": lr,
                    "l_mr": report.l_mr,
                    "l_ce": report.l_ce,
                    "l_3m": report.l_3m,
                    "total": report.total,
                }
            )
        summary = {
            "kind": "epoch",
            "epoch": epoch,
            "step": state.step,
            "l_mr": float(np.mean([r.l_mr for r in reports])) if reports else 0.0,
            "l_ce": float(np.mean([r.l_ce for r in reports])) if reports else 0.0,
            "l_3m": float(np.mean([r.l_3m for r in reports])) if reports else 0.0,
            "total": float(np.mean([r.total for r in reports])) if reports else 0.0,
        }
        if eval_bank is not None:
            summary["metrics"] = evaluation_snapshot(params, eval_bank, options)
        records.append(summary)
        log.debug("epoch %d loss %.4f", epoch, summary["total"])
    return params, records
