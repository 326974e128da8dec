"""Codebook and codebook-free quantizers.

Plain VQ (nearest entry, lowest-index tie break), greedy residual VQ,
finite scalar quantization, plus EMA / multi-modal-EMA codebook
maintenance and the commitment loss. Quantization itself operates on
numpy arrays; the straight-through hook into the autodiff graph lives in
`ste_apply` / `commitment_loss`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numgrad
from .numgrad import Tensor

BETA_DEFAULT = 0.25
EMA_DECAY_DEFAULT = 0.99
LAPLACE_EPS_DEFAULT = 1e-5
DEAD_CODE_COUNT_FLOOR = 1e-3


class QuantizeError(Exception):
    pass


@dataclass
class Codebook:
    """One quantizer layer: L entries of dim D plus EMA running statistics."""

    entries: np.ndarray            # (L, D)
    layer_index: int = 0
    decay: float = EMA_DECAY_DEFAULT
    laplace_eps: float = LAPLACE_EPS_DEFAULT
    ema_counts: np.ndarray = None  # (L,)
    ema_sums: np.ndarray = None    # (L, D)

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2 or self.entries.shape[0] < 1:
            raise QuantizeError(f"codebook entries must be (L,D), got {self.entries.shape}")
        if not (0.0 < self.decay <= 1.0):
            raise QuantizeError(f"decay must be in (0,1), got {self.decay}")
        if self.ema_counts is None:
            self.ema_counts = np.ones(self.size, dtype=np.float64)
        if self.ema_sums is None:
            self.ema_sums = self.entries * self.ema_counts[:, None]
        self.ema_counts = np.asarray(self.ema_counts, dtype=np.float64)
        self.ema_sums = np.asarray(self.ema_sums, dtype=np.float64)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def random(cls, size: int, dim: int, rng, scale: float = 1.0, layer_index: int = 0,
               decay: float = EMA_DECAY_DEFAULT) -> "Codebook":
        entries = rng.normal(0.0, scale, size=(size, dim))
        return cls(entries=entries, layer_index=layer_index, decay=decay)


@dataclass
class FsqSpec:
    """Per-dimension odd level counts; implicit codebook = product of levels."""

    levels: list

    def __post_init__(self):
        for lv in self.levels:
            if lv < 3 or lv % 2 == 0:
                raise QuantizeError(f"FSQ levels must be odd and >= 3, got {lv}")

    @property
    def implicit_size(self) -> int:
        return int(np.prod(self.levels))


@dataclass
class QuantizationResult:
    codes: np.ndarray              # (T,) for VQ/FSQ, (K_r, T) stacked for RVQ
    quantized: np.ndarray          # (T, D)
    residual: np.ndarray           # (T, D), zero for plain VQ
    commitment_loss: float
    quantization_mse: float
    stage_codes: list = field(default_factory=list)


def _check_input(z: np.ndarray, dim: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != dim:
        raise QuantizeError(f"input shape {z.shape} incompatible with codebook dim {dim}")
    return z


def nearest_codes(z: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Argmin over squared L2 distance; ties go to the lowest index."""
    # ||z - e||^2 = ||z||^2 - 2 z.e + ||e||^2 ; the z term is constant per row
    d = -2.0 * z @ entries.T + (entries ** 2).sum(axis=1)[None, :]
    return np.argmin(d, axis=1)


def vq_quantize(z: np.ndarray, cb: Codebook, beta: float = BETA_DEFAULT) -> QuantizationResult:
    z = _check_input(z, cb.dim)
    codes = nearest_codes(z, cb.entries)
    quantized = cb.entries[codes]
    diff = z - quantized
    mse = float((diff ** 2).mean()) if z.size else 0.0
    return QuantizationResult(
        codes=codes,
        quantized=quantized,
        residual=np.zeros_like(z),
        commitment_loss=beta * mse,
        quantization_mse=mse,
        stage_codes=[codes],
    )


def rvq_quantize(z: np.ndarray, stages, beta: float = BETA_DEFAULT) -> QuantizationResult:
    """Greedy residual quantization across a list of stage codebooks."""
    if not stages:
        raise QuantizeError("rvq needs at least one stage")
    dim = stages[0].dim
    for cb in stages:
        if cb.dim != dim:
            raise QuantizeError("all RVQ stages must share the same dim")
    z = _check_input(z, dim)
    residual = z.copy()
    quantized = np.zeros_like(z)
    stage_codes = []
    for cb in stages:
        codes = nearest_codes(residual, cb.entries)
        picked = cb.entries[codes]
        quantized += picked
        residual -= picked
        stage_codes.append(codes)
    diff = z - quantized
    mse = float((diff ** 2).mean()) if z.size else 0.0
    return QuantizationResult(
        codes=np.stack(stage_codes),
        quantized=quantized,
        residual=residual,
        commitment_loss=beta * mse,
        quantization_mse=mse,
        stage_codes=stage_codes,
    )


def fsq_quantize(z: np.ndarray, spec: FsqSpec, beta: float = BETA_DEFAULT) -> QuantizationResult:
    """Bounded per-dimension rounding: q_d = round(h_d * tanh(z_d)) / h_d."""
    levels = np.asarray(spec.levels, dtype=np.int64)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != len(levels):
        raise QuantizeError(f"input shape {z.shape} incompatible with levels {list(levels)}")
    half = levels // 2
    q = np.round(half * np.tanh(z))
    quantized = q / half
    # mixed-radix code over dimensions; digit d in [0, levels_d)
    digits = (q + half).astype(np.int64)
    codes = np.zeros(z.shape[0], dtype=np.int64)
    for d in range(len(levels)):
        codes = codes * levels[d] + digits[:, d]
    diff = z - quantized
    mse = float((diff ** 2).mean()) if z.size else 0.0
    return QuantizationResult(
        codes=codes,
        quantized=quantized,
        residual=np.zeros_like(z),
        commitment_loss=beta * mse,
        quantization_mse=mse,
        stage_codes=[codes],
    )


# ---- autodiff hooks ------------------------------------------------------


def ste_apply(z: Tensor, quantized: np.ndarray) -> Tensor:
    """Straight-through: forward the quantized values, identity backward."""
    return numgrad.ste_to(z, quantized)


def commitment_loss(z: Tensor, quantized: np.ndarray, beta: float = BETA_DEFAULT) -> Tensor:
    """beta * mean ||z - sg[quantized]||^2; gradient reaches only z."""
    diff = z - numgrad.constant(quantized)
    return numgrad.tmean(numgrad.square(diff)) * beta


# ---- EMA / MMEMA codebook maintenance ------------------------------------


def _smoothed_entries(counts: np.ndarray, sums: np.ndarray, eps: float) -> np.ndarray:
    # Laplace-smoothed normalization: each count is replaced by
    #   (count_l + eps) / (total + L*eps) * total
    # so empty codes divide by a small positive floor instead of zero.
    total = counts.sum()
    L = counts.shape[0]
    smoothed = (counts + eps) / (total + L * eps) * total
    return sums / smoothed[:, None]


def _batch_stats(cb: Codebook, assigned: dict) -> tuple[np.ndarray, np.ndarray]:
    n = np.zeros(cb.size, dtype=np.float64)
    s = np.zeros_like(cb.ema_sums)
    for code, vectors in assigned.items():
        vecs = np.asarray(vectors, dtype=np.float64).reshape(-1, cb.dim)
        n[code] += vecs.shape[0]
        s[code] += vecs.sum(axis=0)
    return n, s


def ema_update(cb: Codebook, assigned: dict) -> Codebook:
    """Decay counts/sums toward this batch's assignment statistics.

    `assigned` maps code index -> list of vectors quantized to it.
    Mutates and returns cb.
    """
    n, s = _batch_stats(cb, assigned)
    g = cb.decay
    cb.ema_counts = g * cb.ema_counts + (1.0 - g) * n
    cb.ema_sums = g * cb.ema_sums + (1.0 - g) * s
    cb.entries = _smoothed_entries(cb.ema_counts, cb.ema_sums, cb.laplace_eps)
    return cb


def mmema_update(cb: Codebook, per_modality_assignments: dict, weights: dict) -> Codebook:
    """EMA over the weighted union of all modalities' assignments.

    Weights must be nonnegative and sum to 1; a single modality at weight 1
    reproduces ema_update bit-exactly.
    """
    wsum = sum(weights.values())
    if abs(wsum - 1.0) > 1e-9:
        raise QuantizeError(f"modality weights must sum to 1, got {wsum}")
    n = np.zeros(cb.size, dtype=np.float64)
    s = np.zeros_like(cb.ema_sums)
    for mod, assigned in per_modality_assignments.items():
        w = weights[mod]
        if w < 0:
            raise QuantizeError(f"negative weight for modality {mod}")
        nm, sm = _batch_stats(cb, assigned)
        n += w * nm
        s += w * sm
    g = cb.decay
    cb.ema_counts = g * cb.ema_counts + (1.0 - g) * n
    cb.ema_sums = g * cb.ema_sums + (1.0 - g) * s
    cb.entries = _smoothed_entries(cb.ema_counts, cb.ema_sums, cb.laplace_eps)
    return cb


def reseed_dead_codes(cb: Codebook, recent_inputs: np.ndarray, rng) -> int:
    """Reset entries whose EMA count collapsed to a random recent input."""
    dead = np.flatnonzero(cb.ema_counts < DEAD_CODE_COUNT_FLOOR)
    if dead.size == 0 or recent_inputs.shape[0] == 0:
        return 0
    picks = rng.integers(0, recent_inputs.shape[0], size=dead.size)
    cb.entries[dead] = recent_inputs[picks]
    cb.ema_counts[dead] = 1.0
    cb.ema_sums[dead] = cb.entries[dead]
    return int(dead.size)


def codebook_perplexity(codes: np.ndarray, size: int) -> float:
    """exp(entropy of the empirical code histogram); in [1, size]."""
    codes = np.asarray(codes).reshape(-1)
    if codes.size == 0:
        raise QuantizeError("perplexity of empty code sequence")
    hist = np.bincount(codes, minlength=size).astype(np.float64)
    p = hist / hist.sum()
    nz = p[p > 0]
    return float(np.exp(-(nz * np.log(nz)).sum()))


# ---- serialization -------------------------------------------------------

_CODEBOOK_MAGIC = "srcid-codebook-v1"


def save_codebook(cb: Codebook, path) -> None:
    """Plain-text format, one hexfloat per value so round-trips are exact.

    Header: magic, L, D, layer_index, decay, laplace_eps. Then L entry rows,
    one counts row, L sum rows.
    """
    with open(path, "w") as f:
        f.write(f"{_CODEBOOK_MAGIC} {cb.size} {cb.dim} {cb.layer_index} "
                f"{cb.decay.hex() if isinstance(cb.decay, float) else float(cb.decay).hex()} "
                f"{float(cb.laplace_eps).hex()}\n")
        for row in cb.entries:
            f.write(" ".join(v.hex() for v in row) + "\n")
        f.write(" ".join(v.hex() for v in cb.ema_counts) + "\n")
        for row in cb.ema_sums:
            f.write(" ".join(v.hex() for v in row) + "\n")


def load_codebook(path) -> Codebook:
    with open(path) as f:
        header = f.readline().split()
        if header[0] != _CODEBOOK_MAGIC:
            raise QuantizeError(f"not a codebook file: {path}")
        L, D, k = int(header[1]), int(header[2]), int(header[3])
        decay, eps = float.fromhex(header[4]), float.fromhex(header[5])
        rows = [[float.fromhex(v) for v in f.readline().split()] for _ in range(L)]
        counts = [float.fromhex(v) for v in f.readline().split()]
        sums = [[float.fromhex(v) for v in f.readline().split()] for _ in range(L)]
    return Codebook(entries=np.array(rows), layer_index=k, decay=decay,
                    laplace_eps=eps, ema_counts=np.array(counts),
                    ema_sums=np.array(sums))
