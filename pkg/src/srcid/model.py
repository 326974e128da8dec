"""Two-layer semantic-residual model and its warm-start trainer.

Layer 1 splits each modality into a quantized general part (shared
codebook) and a specific remainder; layer 2 re-disentangles the layer-1
specific output, extracting the semantics it still carries. Layer-2
losses stay switched off until layer-1's CLUB estimate has settled near
zero (the warm-start gate).

Batch layout convention: encoded feature matrices are (T*N, D) with row
index t*N + i (time-major), so per-time-step slices are contiguous.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import mi, nets, numgrad, quantize
from .numgrad import ParamStore, Tensor

MODALITIES = ("a", "b", "c")
LAYERS = (1, 2)

# temperature for the cross-modal matching loss: sharpens the cosine
# batch-contrastive logits
CMCM_NCE_TEMP = 0.1


class ModelError(Exception):
    pass


class NumericalAbort(RuntimeError):
    """Raised when a loss term goes non-finite; names the offending term."""

    def __init__(self, term: str, epoch: int = -1):
        self.term = term
        self.epoch = epoch
        super().__init__(f"non-finite loss term '{term}'"
                         + (f" at epoch {epoch}" if epoch >= 0 else ""))


@dataclass
class TrainConfig:
    beta: float = 0.25
    codebook_size: int = 64
    d_latent: int = 16
    hidden: int = 64
    lambda_recon: float = 1.0
    lambda_commit: float = 1.0
    lambda_cpc: float = 1.0
    lambda_cmcm: float = 4.0
    lambda_mi: float = 2.0
    warm_min_epochs: int = 20
    mi_threshold: float = 3.0
    mi_patience: int = 3
    lr: float = 3e-3
    club_lr: float = 3e-3
    club_steps: int = 3
    optimizer: str = "adam"   # adam | sgd
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    quantizer: str = "vq"          # vq | rvq-<k> | fsq
    cpc_horizon: int = 3
    ema_decay: float = 0.99
    fsq_levels: tuple = (5, 5, 5, 5)
    club_disable_layers: tuple = (2,)  # ablation hook; desk default skips layer 2

    def validate(self):
        for name in ("lambda_recon", "lambda_commit", "lambda_cpc",
                     "lambda_cmcm", "lambda_mi"):
            if getattr(self, name) < 0:
                raise ModelError(f"{name} must be nonnegative")
        if self.mi_threshold <= 0:
            raise ModelError("mi_threshold must be positive")
        kind, _ = parse_quantizer(self.quantizer)
        return self


def parse_quantizer(name: str) -> tuple[str, int]:
    if name == "vq":
        return "vq", 1
    if name == "fsq":
        return "fsq", 1
    if name.startswith("rvq-"):
        k = int(name.split("-", 1)[1])
        if k < 1:
            raise ModelError(f"rvq stage count must be >= 1: {name}")
        return "rvq", k
    raise ModelError(f"unknown quantizer kind: {name}")


@dataclass
class GateState:
    epoch: int = 0
    mi_history: list = field(default_factory=list)
    layer2_active: bool = False
    activation_epoch: int = -1


def update_gate(gate: GateState, mi_layer1: float, cfg: TrainConfig) -> GateState:
    """Activate layer 2 once layer-1 MI has stayed below the threshold for
    `mi_patience` consecutive epoch means (never deactivates)."""
    gate.mi_history.append(float(mi_layer1))
    gate.epoch += 1
    if not gate.layer2_active and gate.epoch >= cfg.warm_min_epochs:
        recent = gate.mi_history[-cfg.mi_patience:]
        if len(recent) >= cfg.mi_patience and all(abs(v) < cfg.mi_threshold for v in recent):
            gate.layer2_active = True
            gate.activation_epoch = gate.epoch
    return gate


class SrcidModel:
    """Per-modality general/specific encoders and decoders for two layers,
    shared per-layer codebooks, CLUB nets and CPC state."""

    def __init__(self, modality_dims: dict, cfg: TrainConfig, rng=None):
        cfg.validate()
        self.cfg = cfg
        self.modality_dims = dict(modality_dims)
        self.rng = rng or np.random.default_rng(cfg.seed)
        d = cfg.d_latent
        self.kind, self.n_stages = parse_quantizer(cfg.quantizer)

        self.params = ParamStore()
        for m, dm in self.modality_dims.items():
            in_dims = {1: dm, 2: d}
            for k in LAYERS:
                # near-zero output init: every modality's general features
                # start (and therefore grow) from the same point, so the
                # cross-modal pulls of the contrastive loss keep them in one
                # shared geometry instead of having to merge disjoint clouds
                nets.init_mlp(self.params, f"gen.{m}.{k}", in_dims[k], d, cfg.hidden,
                              self.rng, out_scale=0.01)
                nets.init_mlp(self.params, f"spec.{m}.{k}", in_dims[k], d, cfg.hidden, self.rng)
                nets.init_mlp(self.params, f"dec.{m}.{k}", 2 * d, in_dims[k], cfg.hidden, self.rng)

        # shared codebooks: one list of stages per layer (1 stage unless rvq)
        self.codebooks: dict[int, list[quantize.Codebook]] = {}
        self.fsq_spec = None
        if self.kind == "fsq":
            self.fsq_spec = quantize.FsqSpec(list(cfg.fsq_levels))
            nd = len(cfg.fsq_levels)
            for k in LAYERS:
                s = 1.0 / np.sqrt(d)
                self.params.add(f"fsq.down.{k}", self.rng.normal(0.0, s, size=(d, nd)))
                self.params.add(f"fsq.up.{k}", self.rng.normal(0.0, 1.0 / np.sqrt(nd), size=(nd, d)))
            self.codebooks = {k: [] for k in LAYERS}
        else:
            for k in LAYERS:
                self.codebooks[k] = [
                    quantize.Codebook.random(cfg.codebook_size, d, self.rng,
                                             scale=0.05, layer_index=k, decay=cfg.ema_decay)
                    for _ in range(self.n_stages)
                ]

        self.club_nets = {
            (m, k): mi.ClubNet(d, d, self.rng, hidden=cfg.hidden)
            for m in self.modality_dims for k in LAYERS
        }
        self.cpc = {
            k: mi.CpcState(self.modality_dims.keys(), d, d, cfg.cpc_horizon, self.rng)
            for k in LAYERS
        }

    # ---- forward ---------------------------------------------------------

    def main_stores(self, layers=LAYERS):
        stores = [self.params]
        for k in layers:
            stores.append(self.cpc[k].store)
        return stores

    def _quantize_general(self, k: int, z: Tensor):
        """Quantize general features against the shared layer-k codebook.

        Returns (z_hat Tensor wired straight-through, codes (stages, rows),
        per-stage assignment vectors for the EMA update)."""
        if self.kind == "fsq":
            y = numgrad.tanh(z @ self.params[f"fsq.down.{k}"])
            levels = np.asarray(self.fsq_spec.levels)
            half = levels // 2
            q = np.round(half * y.value)
            v = numgrad.ste_to(y, q / half)
            res = quantize.fsq_quantize(z.value @ self.params[f"fsq.down.{k}"].value,
                                        self.fsq_spec, beta=self.cfg.beta)
            z_hat = v @ self.params[f"fsq.up.{k}"]
            return z_hat, res.codes[None, :], None
        stages = self.codebooks[k]
        res = quantize.rvq_quantize(z.value, stages, beta=self.cfg.beta) \
            if self.kind == "rvq" else quantize.vq_quantize(z.value, stages[0], beta=self.cfg.beta)
        codes = res.codes if res.codes.ndim == 2 else res.codes[None, :]
        # per-stage residual inputs, needed for staged EMA
        stage_inputs = []
        r = z.value.copy()
        for s, cb in enumerate(stages):
            stage_inputs.append(r.copy())
            r = r - cb.entries[codes[s]]
        z_hat = quantize.ste_apply(z, res.quantized)
        return z_hat, codes, stage_inputs

    def encode_all(self, batch: dict, layers=LAYERS) -> dict:
        """Run encoders + quantization for the requested layers.

        batch maps modality -> (N, T, D_m) array. Returns per (m, k) dict
        with Tensors z, z_bar, z_hat, x (layer input), numpy codes and the
        per-stage vectors used by the codebook update.
        """
        missing = [m for m in self.modality_dims if m not in batch]
        if missing:
            raise ModelError(f"batch missing modalities: {missing}")
        out = {}
        flat = {}
        shapes = {}
        for m in self.modality_dims:
            x = np.asarray(batch[m], dtype=np.float64)
            n, t, dm = x.shape
            shapes[m] = (n, t)
            flat[m] = numgrad.constant(x.transpose(1, 0, 2).reshape(t * n, dm))
        self.last_batch_shape = shapes[next(iter(shapes))]
        for k in layers:
            for m in self.modality_dims:
                if k == 1:
                    x_in = flat[m]
                else:
                    # the layer-1 residual drifts to large norms dominated by
                    # a constant offset; standardize it per batch so the
                    # per-sample variation reaches layer 2 at unit scale
                    # gradient stops at the layer boundary: layer 2 trains
                    # on layer 1's output without perturbing it
                    prev = numgrad.stop_gradient(out[(m, 1)]["z_bar"])
                    mu = numgrad.tmean(prev, axis=0, keepdims=True)
                    var = numgrad.tmean(numgrad.square(prev - mu), axis=0,
                                        keepdims=True)
                    x_in = (prev - mu) * numgrad.exp(numgrad.log(var + 1e-6) * -0.5)
                z = nets.mlp_apply(self.params, f"gen.{m}.{k}", x_in)
                z_bar = nets.mlp_apply(self.params, f"spec.{m}.{k}", x_in)
                z_hat, codes, stage_inputs = self._quantize_general(k, z)
                out[(m, k)] = {
                    "x": x_in, "z": z, "z_bar": z_bar, "z_hat": z_hat,
                    "codes": codes, "stage_inputs": stage_inputs,
                }
        return out

    # ---- losses ----------------------------------------------------------

    def layer_losses(self, enc: dict, k: int, cpc_t: int, n: int, t_len: int) -> dict:
        """Per-term losses for one layer; every value is a scalar Tensor."""
        cfg = self.cfg
        recon = None
        commit = None
        mi_term = None
        for m in self.modality_dims:
            e = enc[(m, k)]
            x_rec = nets.mlp_apply(self.params, f"dec.{m}.{k}",
                                   numgrad.concat([e["z_hat"], e["z_bar"]], axis=1))
            r = numgrad.tmean(numgrad.square(e["x"] - x_rec))
            recon = r if recon is None else recon + r
            c = quantize.commitment_loss(e["z"], e["z_hat"].value, beta=cfg.beta)
            commit = c if commit is None else commit + c
            if k not in cfg.club_disable_layers:
                # clamp at zero so a lagging variational net cannot be
                # exploited as a negative-loss direction
                est = numgrad.relu(mi.club_mi_estimate(self.club_nets[(m, k)], e["z"], e["z_bar"]))
                mi_term = est if mi_term is None else mi_term + est
        if mi_term is None:
            mi_term = numgrad.constant(0.0)
        z_by_mod = {m: enc[(m, k)]["z"] for m in self.modality_dims}
        cpc = mi.cpc_total_loss(self.cpc[k], z_by_mod, n, t_len, cpc_t)
        cmcm = numgrad.constant(0.0)
        if cfg.lambda_cmcm > 0 and self.cmcm_hook is not None:
            cmcm = self.cmcm_hook(self, enc, k, n, t_len)
        return {"recon": recon, "commit": commit, "cpc": cpc,
                "cmcm": cmcm, "mi": mi_term}

    def code_matching_loss(self, enc: dict, k: int, n: int, t_len: int) -> Tensor:
        """Cross-modal matching: paired time steps from different modalities
        should be nearest neighbours in the shared general-feature space.

        Symmetric batch-contrastive loss on cosine similarity, per time step
        and unordered modality pair.  Pulling paired features together in
        the space the shared codebook lives in is what makes the modalities
        agree on discrete codes.
        """
        mods = list(self.modality_dims)
        unit = {}
        for m in mods:
            z = enc[(m, k)]["z"]
            sumsq = numgrad.tsum(numgrad.square(z), axis=1, keepdims=True)
            inv_norm = numgrad.exp(numgrad.log(sumsq + 1e-8) * -0.5)
            unit[m] = z * inv_norm
        labels = np.arange(n)
        total = None
        count = 0
        for i, m1 in enumerate(mods):
            for m2 in mods[i + 1:]:
                for t in range(t_len):
                    rows = slice(t * n, (t + 1) * n)
                    sim = unit[m1][rows, :] @ numgrad.transpose(unit[m2][rows, :])
                    logits = sim * (1.0 / CMCM_NCE_TEMP)
                    term = numgrad.softmax_cross_entropy(logits, labels) \
                        + numgrad.softmax_cross_entropy(numgrad.transpose(logits), labels)
                    total = term if total is None else total + term
                    count += 2
        return total * (1.0 / count)

    # pluggable cross-modal alignment hook; the bundled implementation is
    # the code-matching loss above.  Stored unbound so a replacement hook
    # is called the same way: hook(model, enc, layer, batch, seq_len).
    cmcm_hook = staticmethod(code_matching_loss)

    def total_loss(self, batch: dict, gate: GateState, cpc_t: int = 1) -> tuple[Tensor, dict]:
        """Weighted per-layer sum; inactive layers contribute nothing
        (no value and no gradient, not merely detached)."""
        layers = LAYERS if gate.layer2_active else (1,)
        enc = self.encode_all(batch, layers=layers)
        n, t_len = self.last_batch_shape
        cfg = self.cfg
        total = None
        terms = {}
        for k in layers:
            ls = self.layer_losses(enc, k, cpc_t, n, t_len)
            for name, tens in ls.items():
                if not np.isfinite(tens.value).all():
                    raise NumericalAbort(f"{name}[layer{k}]")
                terms[f"{name}[{k}]"] = tens.item()
            layer_total = (ls["recon"] * cfg.lambda_recon
                           + ls["commit"] * cfg.lambda_commit
                           + ls["cpc"] * cfg.lambda_cpc
                           + ls["cmcm"] * cfg.lambda_cmcm
                           + ls["mi"] * cfg.lambda_mi)
            total = layer_total if total is None else total + layer_total
        return total, {"terms": terms, "enc": enc, "layers": layers}


    # ---- training --------------------------------------------------------

    def train_step(self, batch: dict, gate: GateState, step_rng) -> dict:
        """One step: CLUB adversarial update, main gradient step, EMA
        codebook update for the active layers."""
        cfg = self.cfg
        layers = LAYERS if gate.layer2_active else (1,)
        enc = self.encode_all(batch, layers=layers)
        n, t_len = self.last_batch_shape

        mi_estimates = {}
        for k in layers:
            if k in cfg.club_disable_layers:
                continue
            for m in self.modality_dims:
                e = enc[(m, k)]
                for _ in range(max(1, cfg.club_steps)):
                    est = mi.train_club_adversarial_step(
                        self.club_nets[(m, k)], e["z"].value, e["z_bar"].value, cfg.club_lr)
                mi_estimates[(m, k)] = est

        hi = t_len - cfg.cpc_horizon
        cpc_t = int(step_rng.integers(1, hi + 1))
        total, info = self.total_loss(batch, gate, cpc_t=cpc_t)
        stores = self.main_stores(layers)
        for s in stores:
            s.zero_grads()
        numgrad.backward(total)
        for s in stores:
            if cfg.optimizer == "adam":
                s.adam_step(cfg.lr)
            else:
                s.sgd_step(cfg.lr)

        # codebook maintenance from this batch's assignments, pooled over
        # modalities with uniform weights
        if self.kind != "fsq":
            w = 1.0 / len(self.modality_dims)
            weights = {m: w for m in self.modality_dims}
            for k in layers:
                for s, cb in enumerate(self.codebooks[k]):
                    per_mod = {}
                    pooled_inputs = []
                    for m in self.modality_dims:
                        e = enc[(m, k)]
                        codes = e["codes"][s]
                        vecs = e["stage_inputs"][s]
                        pooled_inputs.append(vecs)
                        assigned = {}
                        for code in np.unique(codes):
                            assigned[int(code)] = vecs[codes == code]
                        per_mod[m] = assigned
                    quantize.mmema_update(cb, per_mod, weights)
                    quantize.reseed_dead_codes(cb, np.concatenate(pooled_inputs), step_rng)

        metrics = {"total": float(total.value)}
        metrics.update(info["terms"])
        for (m, k), est in mi_estimates.items():
            metrics[f"club_mi[{m},{k}]"] = est
        return metrics

    # ---- inference -------------------------------------------------------

    def extract_general_codes(self, batch: dict, mode: str = "only1"):
        """Discrete general codes (+ quantized embeddings) per modality.

        only1: layer-1 codes, (N, T, stages) and embeddings (N, T, D).
        both: layers concatenated, (N, T, 2*stages) and (N, T, 2*D).
        """
        if mode not in ("only1", "both"):
            raise ModelError(f"unknown inference mode: {mode}")
        layers = (1,) if mode == "only1" else LAYERS
        enc = self.encode_all(batch, layers=LAYERS if mode == "both" else (1,))
        n, t = self.last_batch_shape
        codes_out, emb_out = {}, {}
        for m in self.modality_dims:
            code_parts, emb_parts = [], []
            for k in layers:
                e = enc[(m, k)]
                c = e["codes"].T.reshape(t, n, -1).transpose(1, 0, 2)
                q = e["z_hat"].value.reshape(t, n, -1).transpose(1, 0, 2)
                code_parts.append(c)
                emb_parts.append(q)
            codes_out[m] = np.concatenate(code_parts, axis=2)
            emb_out[m] = np.concatenate(emb_parts, axis=2)
        return codes_out, emb_out

    # ---- checkpointing ---------------------------------------------------

    def state_arrays(self) -> dict:
        arrs = {}
        for name, t in self.params.items():
            arrs[f"params/{name}"] = t.value
        for (m, k), net in self.club_nets.items():
            for name, t in net.store.items():
                arrs[f"club/{m}/{k}/{name}"] = t.value
        for k, st in self.cpc.items():
            for name, t in st.store.items():
                arrs[f"cpc/{k}/{name}"] = t.value
        for k, stages in self.codebooks.items():
            for s, cb in enumerate(stages):
                arrs[f"cb/{k}/{s}/entries"] = cb.entries
                arrs[f"cb/{k}/{s}/counts"] = cb.ema_counts
                arrs[f"cb/{k}/{s}/sums"] = cb.ema_sums
        return arrs

    def save(self, path, gate: GateState) -> None:
        arrs = self.state_arrays()
        meta = {
            "version": 1,
            "config": asdict(self.cfg),
            "modality_dims": self.modality_dims,
            "gate": {"epoch": gate.epoch, "mi_history": gate.mi_history,
                     "layer2_active": gate.layer2_active,
                     "activation_epoch": gate.activation_epoch},
        }
        buf = io.BytesIO()
        np.savez(buf, **arrs)
        with open(path, "wb") as f:
            header = json.dumps(meta).encode()
            f.write(b"SRCIDCKPT1\n")
            f.write(len(header).to_bytes(8, "little"))
            f.write(header)
            f.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> tuple["SrcidModel", GateState]:
        with open(path, "rb") as f:
            magic = f.readline()
            if magic != b"SRCIDCKPT1\n":
                raise ModelError(f"not a checkpoint file: {path}")
            n = int.from_bytes(f.read(8), "little")
            meta = json.loads(f.read(n).decode())
            arrs = dict(np.load(io.BytesIO(f.read())))
        cfg_d = meta["config"]
        cfg_d["fsq_levels"] = tuple(cfg_d["fsq_levels"])
        cfg_d["club_disable_layers"] = tuple(cfg_d["club_disable_layers"])
        cfg = TrainConfig(**cfg_d)
        model = cls(meta["modality_dims"], cfg)
        for key, val in arrs.items():
            parts = key.split("/")
            if parts[0] == "params":
                model.params["/".join(parts[1:])].value = val
            elif parts[0] == "club":
                m, k, name = parts[1], int(parts[2]), "/".join(parts[3:])
                model.club_nets[(m, k)].store[name].value = val
            elif parts[0] == "cpc":
                k, name = int(parts[1]), "/".join(parts[2:])
                model.cpc[k].store[name].value = val
            elif parts[0] == "cb":
                k, s, what = int(parts[1]), int(parts[2]), parts[3]
                cb = model.codebooks[k][s]
                if what == "entries":
                    cb.entries = val
                elif what == "counts":
                    cb.ema_counts = val
                else:
                    cb.ema_sums = val
        g = meta["gate"]
        gate = GateState(epoch=g["epoch"], mi_history=list(g["mi_history"]),
                         layer2_active=g["layer2_active"],
                         activation_epoch=g["activation_epoch"])
        return model, gate


# ---- epoch-level trainer -------------------------------------------------


def train_model(model: SrcidModel, train_batch_source, cfg: TrainConfig,
                n_samples: int, on_epoch=None) -> list[dict]:
    """Run the warm-start training loop.

    `train_batch_source(indices)` returns a batch dict for the given sample
    indices. Returns the per-epoch metric trace; gate lives on the model as
    `model.gate` afterwards.
    """
    gate = GateState()
    rng = np.random.default_rng(cfg.seed + 1)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_samples)
        step_metrics = []
        for start in range(0, n_samples, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if idx.size < 2:
                continue
            batch = train_batch_source(idx)
            try:
                step_metrics.append(model.train_step(batch, gate, rng))
            except NumericalAbort as e:
                raise NumericalAbort(e.term, epoch) from e
        keys = set()
        for sm in step_metrics:
            keys.update(sm)
        row = {"epoch": epoch}
        for key in sorted(keys):
            vals = [sm[key] for sm in step_metrics if key in sm]
            row[key] = float(np.mean(vals))
        mi_cols = [v for k, v in row.items() if k.startswith("club_mi[") and k.endswith(",1]")]
        epoch_mi = float(np.mean(mi_cols)) if mi_cols else 0.0
        was_active = gate.layer2_active
        update_gate(gate, epoch_mi, cfg)
        row["mi_layer1"] = epoch_mi
        row["gate_active"] = int(gate.layer2_active)
        row["gate_activated_now"] = int(gate.layer2_active and not was_active)
        if model.kind != "fsq":
            for k in LAYERS:
                row[f"perplexity[{k}]"] = _codebook_perplexity_safe(model, k)
        trace.append(row)
        if on_epoch is not None:
            on_epoch(row)
    model.gate = gate
    return trace


def _codebook_perplexity_safe(model: SrcidModel, k: int) -> float:
    cb = model.codebooks[k][0]
    p = cb.ema_counts / cb.ema_counts.sum()
    nz = p[p > 0]
    return float(np.exp(-(nz * np.log(nz)).sum()))
