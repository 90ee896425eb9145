"""Shared domain types, configuration and parameter (de)serialization."""
from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

MODALITIES = ("R", "N", "T")
MOD_INDEX = {m: i for i, m in enumerate(MODALITIES)}
# fused-embedding order: N, R, T
FUSE_ORDER = (MOD_INDEX["N"], MOD_INDEX["R"], MOD_INDEX["T"])

# directed reconstruction heads, source -> target
DIRECTIONS = ("N2R", "T2R", "R2N", "T2N", "R2T", "N2T")
DIRECTION_SRC = tuple(MOD_INDEX[d[0]] for d in DIRECTIONS)
DIRECTION_TGT = tuple(MOD_INDEX[d[2]] for d in DIRECTIONS)


class MGRNetError(Exception):
    """Base class for library errors."""


class ConfigError(MGRNetError, ValueError):
    pass


class ShapeError(MGRNetError, ValueError):
    pass


class FormatError(MGRNetError, ValueError):
    """Bad magic, unsupported version, or otherwise malformed file."""


class TruncatedFileError(FormatError):
    pass


class NonFiniteError(MGRNetError, ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _from_mapping(cls, data: dict, *, name: str):
    names = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{name}: unknown field(s) {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from None


@dataclass(frozen=True)
class ModelConfig:
    P: int = 8
    D: int = 16
    H: int = 4
    L_lgr: int = 2
    L_grmm: int = 2
    k: int = 2
    tau: float | None = None
    row_normalize_adjacency: bool = True
    num_classes: int = 8

    def __post_init__(self):
        for f in ("P", "D", "H", "L_lgr", "L_grmm", "num_classes"):
            v = getattr(self, f)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"ModelConfig.{f} must be a positive integer, got {v!r}")
        if self.D % self.H:
            raise ConfigError(f"ModelConfig: D={self.D} is not divisible by H={self.H}")
        if not 0 <= self.k <= self.P:
            raise ConfigError(f"ModelConfig.k must satisfy 0 <= k <= P={self.P}, got {self.k}")
        if self.tau is None:
            object.__setattr__(self, "tau", math.sqrt(self.D / self.H))
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ConfigError(f"ModelConfig.tau must be positive, got {self.tau}")

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        required = {f.name for f in dataclasses.fields(cls)}
        missing = sorted(required - set(data))
        if missing:
            raise ConfigError(f"ModelConfig: missing field(s) {missing}")
        return _from_mapping(cls, data, name="ModelConfig")

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class PipelineOptions:
    """Runtime switches of the forward pipeline (ablation surface).

    ``widen=1`` reduces the poor-node funnel to the edge-score stage only.
    ``recovery`` selects how missing modalities are filled at inference.
    """

    enable_lgr: bool = True
    enable_sgns: bool = True
    widen: int = 2
    edge_score: str = "mean"
    recompute_adjacency_after_swap: bool = False
    recovery: str = "grmm"

    def __post_init__(self):
        if self.widen < 1:
            raise ConfigError(f"PipelineOptions.widen must be >= 1, got {self.widen}")
        if self.edge_score not in ("mean", "min", "sum"):
            raise ConfigError(f"PipelineOptions.edge_score must be mean|min|sum, got {self.edge_score!r}")
        if self.recovery not in ("grmm", "zero", "random"):
            raise ConfigError(f"PipelineOptions.recovery must be grmm|zero|random, got {self.recovery!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineOptions":
        return _from_mapping(cls, data, name="PipelineOptions")


@dataclass(frozen=True)
class Scenario:
    """Set of modalities absent at inference time."""

    missing: frozenset = frozenset()

    def __post_init__(self):
        missing = frozenset(self.missing)
        bad = missing - set(MODALITIES)
        if bad:
            raise ConfigError(f"Scenario: unknown modality {sorted(bad)}")
        if len(missing) > 2:
            raise ConfigError("Scenario: at least one modality must remain present")
        object.__setattr__(self, "missing", missing)

    @classmethod
    def parse(cls, text: str | None) -> "Scenario":
        text = (text or "").strip().upper()
        if text in ("", "ALL", "NONE"):
            return cls()
        if len(set(text)) != len(text):
            raise ConfigError(f"Scenario: repeated modality in {text!r}")
        return cls(frozenset(text))

    @property
    def present(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if m not in self.missing)

    @property
    def label(self) -> str:
        if not self.missing:
            return "ALL"
        return "M(" + "".join(m for m in MODALITIES if m in self.missing) + ")"

    @property
    def code(self) -> str:
        return "".join(m for m in MODALITIES if m in self.missing)


@dataclass(frozen=True)
class TokenMatrix:
    class_token: np.ndarray
    patch_tokens: np.ndarray

    def __post_init__(self):
        if self.class_token.ndim != 1 or self.patch_tokens.ndim != 2:
            raise ShapeError("TokenMatrix: class_token must be 1-D and patch_tokens 2-D")
        if self.patch_tokens.shape[1] != self.class_token.shape[0]:
            raise ShapeError(
                f"TokenMatrix: D mismatch, class_token {self.class_token.shape[0]} "
                f"vs patch_tokens {self.patch_tokens.shape[1]}"
            )
        if not (np.all(np.isfinite(self.class_token)) and np.all(np.isfinite(self.patch_tokens))):
            raise NonFiniteError("TokenMatrix: non-finite entries")

    @classmethod
    def from_array(cls, tokens: np.ndarray) -> "TokenMatrix":
        tokens = np.asarray(tokens, dtype=np.float64)
        return cls(tokens[0].copy(), tokens[1:].copy())

    def as_array(self) -> np.ndarray:
        return np.vstack([self.class_token[None, :], self.patch_tokens])

    @property
    def P(self) -> int:
        return self.patch_tokens.shape[0]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class ModelParams:
    """All learnable quantities.

    Per-modality arrays are stacked on a leading axis in ``MODALITIES``
    order; the six reconstruction heads are stacked in ``DIRECTIONS`` order.
    Fields may hold :class:`mgrnet.autodiff.Tensor` objects while a
    gradient is being traced.
    """

    config: ModelConfig
    alpha: np.ndarray  # (3,)
    beta: np.ndarray  # (3,)
    lgr: np.ndarray  # (3, L_lgr, D, D)
    w_q: np.ndarray  # (3, D, D)
    w_k: np.ndarray  # (3, D, D)
    w_v: np.ndarray  # (3, D, D)
    recon_t: np.ndarray  # (6,)
    recon: np.ndarray  # (6, L_grmm, D, D)
    cls_w: np.ndarray  # (3D, num_classes)
    cls_b: np.ndarray  # (num_classes,)

    ARRAY_FIELDS = ("alpha", "beta", "lgr", "w_q", "w_k", "w_v", "recon_t", "recon", "cls_w", "cls_b")

    def __post_init__(self):
        expected = self.expected_shapes(self.config)
        for name in self.ARRAY_FIELDS:
            arr = getattr(self, name)
            shape = tuple(arr.shape)
            if shape != expected[name]:
                raise ShapeError(f"ModelParams.{name}: expected shape {expected[name]}, found {shape}")

    @staticmethod
    def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        D = cfg.D
        return {
            "alpha": (3,),
            "beta": (3,),
            "lgr": (3, cfg.L_lgr, D, D),
            "w_q": (3, D, D),
            "w_k": (3, D, D),
            "w_v": (3, D, D),
            "recon_t": (6,),
            "recon": (6, cfg.L_grmm, D, D),
            "cls_w": (3 * D, cfg.num_classes),
            "cls_b": (cfg.num_classes,),
        }

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in self.ARRAY_FIELDS:
            yield name, getattr(self, name)

    def replace(self, **arrays) -> "ModelParams":
        return dataclasses.replace(self, **arrays)

    def copy(self) -> "ModelParams":
        return self.replace(**{n: np.array(a, copy=True) for n, a in self.arrays()})

    def num_parameters(self) -> int:
        return sum(int(np.size(a)) for _, a in self.arrays())

    def head(self, direction: str) -> tuple:
        """``(t, stack)`` of one reconstruction head."""
        i = DIRECTIONS.index(direction)
        return self.recon_t[i], self.recon[i]

    def equals(self, other: "ModelParams") -> bool:
        if self.config != other.config:
            return False
        return all(np.array_equal(a, getattr(other, n)) for n, a in self.arrays())


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic initialization: alpha 0, beta 1, t 1, weights U(-1/sqrt(D), 1/sqrt(D))."""
    rng = np.random.default_rng(np.uint64(seed))
    shapes = ModelParams.expected_shapes(config)
    bound = 1.0 / math.sqrt(config.D)

    def uniform(name):
        return rng.uniform(-bound, bound, size=shapes[name])

    return ModelParams(
        config=config,
        alpha=np.zeros(3),
        beta=np.ones(3),
        lgr=uniform("lgr"),
        w_q=uniform("w_q"),
        w_k=uniform("w_k"),
        w_v=uniform("w_v"),
        recon_t=np.ones(6),
        recon=uniform("recon"),
        cls_w=uniform("cls_w"),
        cls_b=np.zeros(config.num_classes),
    )


PARAM_MAGIC = b"MGRP"
PARAM_VERSION = 1
_HEADER = struct.Struct("<4sI7IdB")


def params_to_bytes(params: ModelParams) -> bytes:
    c = params.config
    header = _HEADER.pack(
        PARAM_MAGIC,
        PARAM_VERSION,
        c.P,
        c.D,
        c.H,
        c.L_lgr,
        c.L_grmm,
        c.k,
        c.num_classes,
        float(c.tau),
        int(bool(c.row_normalize_adjacency)),
    )
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in params.arrays())
    return header + body


def params_from_bytes(buf: bytes, config: ModelConfig | None = None) -> ModelParams:
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(f"parameter file truncated: {len(buf)} bytes, header needs {_HEADER.size}")
    magic, version, P, D, H, L_lgr, L_grmm, k, ncls, tau, rown = _HEADER.unpack_from(buf)
    if magic != PARAM_MAGIC:
        raise FormatError(f"parameter file: bad magic {magic!r}, expected {PARAM_MAGIC!r}")
    if version != PARAM_VERSION:
        raise FormatError(f"parameter file: unsupported version {version}, expected {PARAM_VERSION}")
    found = ModelConfig(
        P=P, D=D, H=H, L_lgr=L_lgr, L_grmm=L_grmm, k=k, tau=tau,
        row_normalize_adjacency=bool(rown), num_classes=ncls,
    )
    if config is not None:
        for name in ("P", "D", "H", "L_lgr", "L_grmm", "num_classes"):
            exp, got = getattr(config, name), getattr(found, name)
            if exp != got:
                raise ShapeError(f"parameter file: field {name} expected {exp}, found {got}")
    shapes = ModelParams.expected_shapes(found)
    offset = _HEADER.size
    arrays = {}
    for name in ModelParams.ARRAY_FIELDS:
        n = int(np.prod(shapes[name]))
        end = offset + 8 * n
        if end > len(buf):
            raise TruncatedFileError(f"parameter file truncated inside {name}")
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shapes[name])
        offset = end
    if offset != len(buf):
        raise FormatError(f"parameter file: {len(buf) - offset} trailing bytes")
    return ModelParams(config=config if config is not None else found, **arrays)


def save_params(params: ModelParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path, config: ModelConfig | None = None) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes(), config)


def flatten(params: ModelParams) -> np.ndarray:
    return np.concatenate([np.ravel(a) for _, a in params.arrays()])


def iter_entries(params: ModelParams) -> Iterable[tuple[str, tuple[int, ...]]]:
    for name, arr in params.arrays():
        for idx in np.ndindex(*arr.shape):
            yield name, idx
