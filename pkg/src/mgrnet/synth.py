"""Synthetic multi-modal feature banks and their binary file format.

Each identity owns a latent vector per patch position. A modality's patch
token is a fixed per-modality linear map of that latent plus Gaussian noise,
so the three modalities are structurally redundant, which is what the
reconstruction heads rely on. An optional per-group offset plays the role of
a camera bias that retrieval has to see through. Corrupted patches are replaced by wide noise
and recorded, which gives the swap stage something real to find.
"""
from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    MOD_INDEX,
    MODALITIES,
    ConfigError,
    FormatError,
    ShapeError,
    TokenMatrix,
    TruncatedFileError,
    _from_mapping,
)

NUM_GROUPS = 4


@dataclass(frozen=True)
class DatasetSpec:
    num_identities: int = 8
    samples_per_identity: int = 10
    P: int = 8
    D: int = 16
    noise_sigma: float = 0.5
    corruption_rate: float = 0.0
    corrupted_modalities: tuple = ()
    seed: int = 0
    # spread of the per-modality maps around the identity
    modality_shift: float = 0.3
    # std of the noise that replaces a corrupted patch
    corruption_scale: float = 3.0
    # std of a per-(group, modality) offset added to every token of the group
    group_shift: float = 0.0
    # weight of an identity vector shared by all patch positions
    identity_shared: float = 0.0
    # mean of the identity latents; encoder features are rarely centred
    latent_mean: float = 0.0
    # multiplies every generated token (sets the distance scale of the graphs)
    feature_scale: float = 1.0

    def __post_init__(self):
        for f in ("num_identities", "samples_per_identity", "P", "D"):
            if int(getattr(self, f)) < 1:
                raise ConfigError(f"DatasetSpec.{f} must be positive")
        for f in ("noise_sigma", "modality_shift", "corruption_scale", "group_shift", "identity_shared"):
            if getattr(self, f) < 0:
                raise ConfigError(f"DatasetSpec.{f} must be >= 0")
        if not self.feature_scale > 0:
            raise ConfigError("DatasetSpec.feature_scale must be positive")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ConfigError("DatasetSpec.corruption_rate must lie in [0, 1]")
        mods = tuple(m for m in MODALITIES if m in set(self.corrupted_modalities))
        if len(mods) != len(set(self.corrupted_modalities)):
            raise ConfigError(f"DatasetSpec.corrupted_modalities: unknown entries in {self.corrupted_modalities}")
        object.__setattr__(self, "corrupted_modalities", mods)

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetSpec":
        data = dict(data)
        if "corrupted_modalities" in data:
            data["corrupted_modalities"] = tuple(data["corrupted_modalities"])
        return _from_mapping(cls, data, name="DatasetSpec")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["corrupted_modalities"] = list(self.corrupted_modalities)
        return d


@dataclass
class Sample:
    identity: int
    group: int
    features: dict  # modality -> TokenMatrix, present modalities only
    present: frozenset
    corrupted_patches: dict  # modality -> tuple of patch indices


@dataclass
class FeatureBank:
    """Column-oriented bank of multi-modal samples.

    ``tokens[i, m]`` holds the ``(P+1, D)`` token matrix of modality ``m``
    (class token first). Absent modalities are stored as zeros with
    ``present[i, m] = False``.
    """

    identities: np.ndarray  # (N,) int64
    groups: np.ndarray  # (N,) int64
    tokens: np.ndarray  # (N, 3, P+1, D) float64
    present: np.ndarray  # (N, 3) bool
    corrupted: list  # per sample: tuple of 3 index arrays

    def __post_init__(self):
        n = len(self.identities)
        if self.tokens.ndim != 4 or self.tokens.shape[:2] != (n, 3):
            raise ShapeError(f"FeatureBank.tokens: expected (N={n}, 3, P+1, D), found {self.tokens.shape}")
        if self.present.shape != (n, 3) or len(self.groups) != n or len(self.corrupted) != n:
            raise ShapeError("FeatureBank: per-sample field lengths disagree")

    def __len__(self):
        return len(self.identities)

    @property
    def P(self) -> int:
        return self.tokens.shape[2] - 1

    @property
    def D(self) -> int:
        return self.tokens.shape[3]

    @property
    def num_identities(self) -> int:
        return int(self.identities.max()) + 1 if len(self) else 0

    def sample(self, i: int) -> Sample:
        feats = {
            m: TokenMatrix.from_array(self.tokens[i, j])
            for j, m in enumerate(MODALITIES)
            if self.present[i, j]
        }
        return Sample(
            identity=int(self.identities[i]),
            group=int(self.groups[i]),
            features=feats,
            present=frozenset(m for j, m in enumerate(MODALITIES) if self.present[i, j]),
            corrupted_patches={m: tuple(int(v) for v in self.corrupted[i][j]) for j, m in enumerate(MODALITIES)},
        )

    def subset(self, idx) -> "FeatureBank":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureBank(
            identities=self.identities[idx].copy(),
            groups=self.groups[idx].copy(),
            tokens=self.tokens[idx].copy(),
            present=self.present[idx].copy(),
            corrupted=[self.corrupted[i] for i in idx],
        )

    def with_missing(self, modalities) -> "FeatureBank":
        """Copy with the named modalities zeroed and marked absent."""
        out = self.subset(np.arange(len(self)))
        for m in modalities:
            j = MOD_INDEX[m]
            out.tokens[:, j] = 0.0
            out.present[:, j] = False
        return out

    def equals(self, other: "FeatureBank") -> bool:
        return (
            np.array_equal(self.identities, other.identities)
            and np.array_equal(self.groups, other.groups)
            and np.array_equal(self.present, other.present)
            and self.tokens.shape == other.tokens.shape
            and np.array_equal(self.tokens, other.tokens)
            and all(
                all(np.array_equal(a, b) for a, b in zip(ca, cb))
                for ca, cb in zip(self.corrupted, other.corrupted)
            )
        )


def modality_transforms(spec: DatasetSpec) -> np.ndarray:
    """The fixed ``(3, D, D)`` per-modality maps applied to the latents."""
    rng = np.random.default_rng([spec.seed, 1])
    g = rng.standard_normal((3, spec.D, spec.D)) / math.sqrt(spec.D)
    return np.eye(spec.D)[None] + spec.modality_shift * g


def gen_bank(spec: DatasetSpec) -> FeatureBank:
    P, D = spec.P, spec.D
    n_id, n_per = spec.num_identities, spec.samples_per_identity
    maps = modality_transforms(spec)
    latent_rng = np.random.default_rng([spec.seed, 2])
    latents = spec.latent_mean + latent_rng.standard_normal((n_id, P, D))
    if spec.identity_shared:
        latents = latents + spec.identity_shared * np.random.default_rng([spec.seed, 5]).standard_normal((n_id, 1, D))
    offsets = spec.group_shift * np.random.default_rng([spec.seed, 4]).standard_normal((NUM_GROUPS, 3, D))
    n_bad = math.ceil(spec.corruption_rate * P)
    bad_mods = [MOD_INDEX[m] for m in spec.corrupted_modalities]

    total = n_id * n_per
    tokens = np.zeros((total, 3, P + 1, D))
    corrupted = []
    identities = np.repeat(np.arange(n_id, dtype=np.int64), n_per)
    groups = np.tile(np.arange(n_per, dtype=np.int64) % NUM_GROUPS, n_id)
    for s in range(total):
        # per-sample stream: output independent of generation order
        rng = np.random.default_rng([spec.seed, 3, s])
        ident = identities[s]
        clean = np.einsum("pd,mde->mpe", latents[ident], maps) + offsets[groups[s]][:, None, :]
        patches = clean + spec.noise_sigma * rng.standard_normal((3, P, D))
        cls = patches.mean(axis=1) + spec.noise_sigma * rng.standard_normal((3, D))
        idx_per_mod = [np.zeros(0, dtype=np.int64) for _ in range(3)]
        for m in bad_mods:
            idx = np.sort(rng.choice(P, size=n_bad, replace=False)).astype(np.int64)
            patches[m, idx] = spec.corruption_scale * rng.standard_normal((n_bad, D))
            idx_per_mod[m] = idx
        tokens[s, :, 0] = cls
        tokens[s, :, 1:] = patches
        corrupted.append(tuple(idx_per_mod))
    tokens *= spec.feature_scale
    # stored as float32 on disk; round now so files round-trip exactly
    tokens = tokens.astype(np.float32).astype(np.float64)
    return FeatureBank(
        identities=identities,
        groups=groups,
        tokens=tokens,
        present=np.ones((total, 3), dtype=bool),
        corrupted=corrupted,
    )


def split_bank(bank: FeatureBank, holdout_per_identity: int) -> tuple[FeatureBank, FeatureBank]:
    """Split every identity's samples: the last ``holdout_per_identity`` go to the held-out bank."""
    train_idx, test_idx = [], []
    for ident in np.unique(bank.identities):
        rows = np.nonzero(bank.identities == ident)[0]
        if holdout_per_identity >= len(rows):
            raise ConfigError(
                f"identity {ident} has {len(rows)} samples, cannot hold out {holdout_per_identity}"
            )
        cut = len(rows) - holdout_per_identity
        train_idx.extend(rows[:cut])
        test_idx.extend(rows[cut:])
    return bank.subset(train_idx), bank.subset(test_idx)


# ---------------------------------------------------------------------------
# binary format
# ---------------------------------------------------------------------------

BANK_MAGIC = b"MGFB"
BANK_VERSION = 1
_BANK_HEADER = struct.Struct("<4s4I")


def bank_to_bytes(bank: FeatureBank) -> bytes:
    P, D = bank.P, bank.D
    parts = [_BANK_HEADER.pack(BANK_MAGIC, BANK_VERSION, len(bank), P, D)]
    for i in range(len(bank)):
        mask = sum(1 << j for j in range(3) if bank.present[i, j])
        parts.append(struct.pack("<IIB", int(bank.identities[i]), int(bank.groups[i]), mask))
        for j in range(3):
            if bank.present[i, j]:
                parts.append(np.ascontiguousarray(bank.tokens[i, j], dtype="<f4").tobytes())
        for j in range(3):
            idx = np.asarray(bank.corrupted[i][j], dtype="<u4")
            parts.append(struct.pack("<I", idx.size))
            parts.append(idx.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise TruncatedFileError(
                f"feature bank truncated while reading {what}: need {n} bytes at offset {self.pos}, "
                f"{len(self.buf) - self.pos} left"
            )
        out = self.buf[self.pos:end]
        self.pos = end
        return out


def bank_from_bytes(buf: bytes) -> FeatureBank:
    r = _Reader(buf)
    magic, version, n, P, D = _BANK_HEADER.unpack(r.take(_BANK_HEADER.size, "header"))
    if magic != BANK_MAGIC:
        raise FormatError(f"feature bank: bad magic {magic!r}, expected {BANK_MAGIC!r}")
    if version != BANK_VERSION:
        raise FormatError(f"feature bank: unsupported version {version}, expected {BANK_VERSION}")
    identities = np.zeros(n, dtype=np.int64)
    groups = np.zeros(n, dtype=np.int64)
    tokens = np.zeros((n, 3, P + 1, D))
    present = np.zeros((n, 3), dtype=bool)
    corrupted = []
    mat_bytes = 4 * (P + 1) * D
    for i in range(n):
        ident, grp, mask = struct.unpack("<IIB", r.take(9, f"sample {i} header"))
        if mask & ~0b111:
            raise FormatError(f"feature bank: sample {i} has invalid modality mask {mask:#x}")
        identities[i], groups[i] = ident, grp
        for j, m in enumerate(MODALITIES):
            if mask >> j & 1:
                present[i, j] = True
                raw = r.take(mat_bytes, f"sample {i} modality {m} tokens")
                tokens[i, j] = np.frombuffer(raw, dtype="<f4").reshape(P + 1, D)
        per_mod = []
        for j, m in enumerate(MODALITIES):
            (count,) = struct.unpack("<I", r.take(4, f"sample {i} modality {m} corrupted count"))
            idx = np.frombuffer(r.take(4 * count, f"sample {i} modality {m} corrupted indices"), dtype="<u4")
            if idx.size and idx.max() >= P:
                raise ShapeError(f"feature bank: sample {i} corrupted index {int(idx.max())} out of range P={P}")
            per_mod.append(idx.astype(np.int64))
        corrupted.append(tuple(per_mod))
    if r.pos != len(buf):
        raise FormatError(f"feature bank: {len(buf) - r.pos} trailing bytes")
    return FeatureBank(identities, groups, tokens, present, corrupted)


def write_bank(bank: FeatureBank, path) -> None:
    Path(path).write_bytes(bank_to_bytes(bank))


def read_bank(path) -> FeatureBank:
    return bank_from_bytes(Path(path).read_bytes())
