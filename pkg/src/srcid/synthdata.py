"""Synthetic paired tri-modal sequences with known shared semantics.

Each sample carries one coarse label per clip and a per-step fine-label
chain (fine labels partition under coarse parents); all three modalities
render the same label sequence through fixed random mixing maps, plus an
independently drawn per-modality nuisance factor and Gaussian noise. The
nuisance is independent of the semantics by construction, which is what
makes disentanglement measurable.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, asdict

import numpy as np


class DataError(Exception):
    pass


@dataclass
class GeneratorSpec:
    n_coarse: int = 10
    n_fine: int = 25
    seq_len: int = 10
    modality_dims: dict = field(default_factory=lambda: {"a": 48, "b": 32, "c": 24})
    nuisance_classes: int = 6
    nuisance_weight: float = 0.7
    coarse_scale: float = 1.0      # strength of the coarse part of the semantic embedding
    fine_scale: float = 0.5        # strength of the fine residual part
    transition_temp: float = 1.0   # Markov chain concentration for fine labels
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not (self.n_fine >= self.n_coarse >= 2):
            raise DataError("need n_fine >= n_coarse >= 2")

    def fine_parent(self, fine: int) -> int:
        return fine % self.n_coarse


@dataclass
class SyntheticDataset:
    spec: GeneratorSpec
    features: dict                 # modality -> (N, T, D_m)
    coarse: np.ndarray             # (N,)
    fine: np.ndarray               # (N, T)
    nuisance: dict                 # modality -> (N,)
    split_tags: np.ndarray = None  # (N,) str, "" until split() assigns

    def __len__(self):
        return self.coarse.shape[0]

    def subset(self, idx) -> "SyntheticDataset":
        return SyntheticDataset(
            spec=self.spec,
            features={m: x[idx] for m, x in self.features.items()},
            coarse=self.coarse[idx],
            fine=self.fine[idx],
            nuisance={m: v[idx] for m, v in self.nuisance.items()},
            split_tags=self.split_tags[idx] if self.split_tags is not None else None,
        )

    def batch(self, idx) -> dict:
        return {m: x[idx] for m, x in self.features.items()}


def _semantic_embeddings(spec: GeneratorSpec, dim: int, rng) -> np.ndarray:
    """One embedding per fine label: shared coarse direction + fine residual."""
    coarse_emb = rng.normal(0.0, 1.0, size=(spec.n_coarse, dim))
    fine_emb = rng.normal(0.0, 1.0, size=(spec.n_fine, dim))
    out = np.empty((spec.n_fine, dim))
    for f in range(spec.n_fine):
        out[f] = spec.coarse_scale * coarse_emb[spec.fine_parent(f)] + spec.fine_scale * fine_emb[f]
    return out


def _fine_chain(spec: GeneratorSpec, coarse: int, rng) -> np.ndarray:
    """Markov chain over the fine labels whose parent is `coarse`."""
    allowed = [f for f in range(spec.n_fine) if spec.fine_parent(f) == coarse]
    k = len(allowed)
    if k == 1:
        return np.full(spec.seq_len, allowed[0], dtype=np.int64)
    # sticky transitions; temperature spreads mass over the siblings
    stay = np.exp(1.0 / spec.transition_temp)
    probs = np.full(k, 1.0)
    seq = np.empty(spec.seq_len, dtype=np.int64)
    state = rng.integers(0, k)
    for t in range(spec.seq_len):
        seq[t] = allowed[state]
        p = probs.copy()
        p[state] = stay
        p /= p.sum()
        state = rng.choice(k, p=p)
    return seq


def generate(spec: GeneratorSpec, n_samples: int) -> SyntheticDataset:
    if n_samples < 1:
        raise DataError("n_samples must be >= 1")
    master = np.random.default_rng(spec.seed)
    # fixed structural randomness, drawn once per seed
    struct = np.random.default_rng(master.integers(2 ** 63))
    latent_dim = max(8, spec.n_fine // 2)
    sem = _semantic_embeddings(spec, latent_dim, struct)
    mixing, nuis_mixing, nuis_emb = {}, {}, {}
    for m, dm in spec.modality_dims.items():
        mixing[m] = struct.normal(0.0, 1.0 / np.sqrt(latent_dim), size=(latent_dim, dm))
        nuis_emb[m] = struct.normal(0.0, 1.0, size=(spec.nuisance_classes, latent_dim))
        nuis_mixing[m] = struct.normal(0.0, 1.0 / np.sqrt(latent_dim), size=(latent_dim, dm))

    coarse = np.empty(n_samples, dtype=np.int64)
    fine = np.empty((n_samples, spec.seq_len), dtype=np.int64)
    nuisance = {m: np.empty(n_samples, dtype=np.int64) for m in spec.modality_dims}
    feats = {m: np.empty((n_samples, spec.seq_len, dm))
             for m, dm in spec.modality_dims.items()}

    sample_seeds = master.integers(2 ** 63, size=n_samples)
    for i in range(n_samples):
        rng = np.random.default_rng(sample_seeds[i])
        c = int(rng.integers(0, spec.n_coarse))
        coarse[i] = c
        fine[i] = _fine_chain(spec, c, rng)
        sem_seq = sem[fine[i]]                      # (T, latent)
        for m, dm in spec.modality_dims.items():
            nu = int(rng.integers(0, spec.nuisance_classes))
            nuisance[m][i] = nu
            clean = sem_seq @ mixing[m]
            nuis = spec.nuisance_weight * (nuis_emb[m][nu] @ nuis_mixing[m])
            noise = spec.noise_sigma * rng.normal(0.0, 1.0, size=(spec.seq_len, dm))
            feats[m][i] = clean + nuis[None, :] + noise
    return SyntheticDataset(spec=spec, features=feats, coarse=coarse, fine=fine,
                            nuisance=nuisance,
                            split_tags=np.array([""] * n_samples, dtype=object))


def split(dataset: SyntheticDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Stratified (by coarse label) disjoint train/val/test cover."""
    fractions = tuple(fractions)
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must be nonnegative and sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    tags = np.array([""] * n, dtype=object)
    names = ("train", "val", "test")
    for c in np.unique(dataset.coarse):
        idx = np.flatnonzero(dataset.coarse == c)
        rng.shuffle(idx)
        k = idx.size
        n_train = int(round(fractions[0] * k))
        n_val = int(round(fractions[1] * k))
        n_val = min(n_val, k - n_train)
        bounds = [0, n_train, n_train + n_val, k]
        for s in range(3):
            tags[idx[bounds[s]:bounds[s + 1]]] = names[s]
    dataset.split_tags = tags
    parts = {name: dataset.subset(np.flatnonzero(tags == name)) for name in names}
    return parts["train"], parts["val"], parts["test"]


# ---- file format ---------------------------------------------------------

_MAGIC = b"SRCIDDATA1\n"


def save_dataset(dataset: SyntheticDataset, path) -> None:
    """Self-describing container: JSON spec header + npz arrays."""
    meta = {"version": 1, "spec": asdict(dataset.spec)}
    arrs = {"coarse": dataset.coarse, "fine": dataset.fine,
            "split_tags": dataset.split_tags.astype(str)}
    for m, x in dataset.features.items():
        arrs[f"features/{m}"] = x
        arrs[f"nuisance/{m}"] = dataset.nuisance[m]
    buf = io.BytesIO()
    np.savez(buf, **arrs)
    with open(path, "wb") as f:
        header = json.dumps(meta, sort_keys=True).encode()
        f.write(_MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        f.write(buf.getvalue())


def load_dataset(path) -> SyntheticDataset:
    with open(path, "rb") as f:
        if f.readline() != _MAGIC:
            raise DataError(f"not a dataset file: {path}")
        n = int.from_bytes(f.read(8), "little")
        meta = json.loads(f.read(n).decode())
        arrs = dict(np.load(io.BytesIO(f.read()), allow_pickle=False))
    spec = GeneratorSpec(**meta["spec"])
    feats = {m: arrs[f"features/{m}"] for m in spec.modality_dims}
    nuis = {m: arrs[f"nuisance/{m}"] for m in spec.modality_dims}
    return SyntheticDataset(spec=spec, features=feats, coarse=arrs["coarse"],
                            fine=arrs["fine"], nuisance=nuis,
                            split_tags=arrs["split_tags"].astype(object))
