"""Downstream evaluation: cross-modal probes, zero-shot retrieval,
quantizer benchmarking and codebook diagnostics.

The probe is a multinomial logistic regression fit to convergence with
fixed hyperparameters; representation quality is read off its transfer
accuracy, never its absolute fit.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict

import numpy as np
from sklearn.linear_model import LogisticRegression

from . import model as model_mod
from . import quantize, synthdata


class EvalError(Exception):
    pass


@dataclass
class EvalReport:
    task: str
    direction: str          # "a->b" style
    metric: str
    value: float
    config_digest: str = ""
    seed: int = 0
    mode: str = ""
    extra: dict = None

    def __post_init__(self):
        if not (0.0 <= self.value <= 1.0):
            raise EvalError(f"metric {self.metric} out of [0,1]: {self.value}")

    def row(self) -> dict:
        d = asdict(self)
        d.pop("extra")
        return d


def _fit_probe(x: np.ndarray, y: np.ndarray, seed: int = 0) -> LogisticRegression:
    clf = LogisticRegression(max_iter=2000, C=10.0, random_state=seed)
    clf.fit(x, y)
    return clf


def _embeddings(model, dataset: synthdata.SyntheticDataset, mode: str):
    _, emb = model.extract_general_codes(dataset.batch(np.arange(len(dataset))), mode=mode)
    return emb  # modality -> (N, T, D_e)


def cross_modal_eval(model, train_ds, eval_ds, train_mod: str, test_mod: str,
                     label_kind: str = "coarse", mode: str = "only1",
                     seed: int = 0, label_override=None) -> EvalReport:
    """Fit a linear probe on one modality's quantized general embeddings,
    report its accuracy on another modality's embeddings.

    label_kind "coarse" uses time-averaged embeddings and per-clip labels;
    "fine" uses per-step embeddings and per-step labels. `label_override`
    substitutes custom labels (used for the nuisance-leak check).
    """
    if label_kind not in ("coarse", "fine"):
        raise EvalError(f"unknown label kind: {label_kind}")
    emb_tr = _embeddings(model, train_ds, mode)[train_mod]
    emb_te = _embeddings(model, eval_ds, mode)[test_mod]

    def labels(ds, modality):
        if label_override is not None:
            return label_override(ds, modality)
        return ds.coarse if label_kind == "coarse" else ds.fine

    y_tr, y_te = labels(train_ds, train_mod), labels(eval_ds, test_mod)
    if label_kind == "coarse" and label_override is None:
        x_tr, x_te = emb_tr.mean(axis=1), emb_te.mean(axis=1)
    elif label_override is not None:
        x_tr, x_te = emb_tr.mean(axis=1), emb_te.mean(axis=1)
    else:
        x_tr = emb_tr.reshape(-1, emb_tr.shape[-1])
        x_te = emb_te.reshape(-1, emb_te.shape[-1])
        y_tr, y_te = y_tr.reshape(-1), y_te.reshape(-1)
    clf = _fit_probe(x_tr, np.asarray(y_tr, dtype=np.int64), seed=seed)
    acc = float((clf.predict(x_te) == np.asarray(y_te, dtype=np.int64)).mean())
    return EvalReport(task=f"crossmodal-{label_kind}",
                      direction=f"{train_mod}->{test_mod}", metric="accuracy",
                      value=acc, seed=seed, mode=mode)


def retrieval_eval(model, eval_ds, query_mod: str, gallery_mod: str,
                   ks=(1, 5, 10), mode: str = "only1", seed: int = 0) -> list[EvalReport]:
    """Cosine-similarity retrieval over time-averaged quantized embeddings.

    Emits recall@k for both directions plus their mean."""
    n = len(eval_ds)
    if n < max(ks):
        raise EvalError(f"gallery of {n} smaller than max k {max(ks)}")
    emb = _embeddings(model, eval_ds, mode)
    vecs = {}
    for m in (query_mod, gallery_mod):
        v = emb[m].mean(axis=1)
        vecs[m] = v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)

    def recalls(q, g):
        sims = vecs[q] @ vecs[g].T
        # rank of the true pair (diagonal) per query
        order = np.argsort(-sims, axis=1)
        ranks = np.argmax(order == np.arange(n)[:, None], axis=1)
        return {k: float((ranks < k).mean()) for k in ks}

    fwd = recalls(query_mod, gallery_mod)
    bwd = recalls(gallery_mod, query_mod)
    reports = []
    for k in ks:
        reports.append(EvalReport(task="retrieval", direction=f"{query_mod}->{gallery_mod}",
                                  metric=f"recall@{k}", value=fwd[k], seed=seed, mode=mode))
        reports.append(EvalReport(task="retrieval", direction=f"{gallery_mod}->{query_mod}",
                                  metric=f"recall@{k}", value=bwd[k], seed=seed, mode=mode))
        reports.append(EvalReport(task="retrieval", direction=f"{query_mod}<->{gallery_mod}",
                                  metric=f"recall@{k}", value=(fwd[k] + bwd[k]) / 2.0,
                                  seed=seed, mode=mode))
    return reports


def codebook_stats(model, eval_ds) -> dict:
    """Per-layer perplexity, usage histogram and cross-modal agreement."""
    codes, _ = model.extract_general_codes(eval_ds.batch(np.arange(len(eval_ds))),
                                           mode="both")
    mods = list(codes.keys())
    stats = {}
    n_layers = codes[mods[0]].shape[2]
    size = model.cfg.codebook_size if model.kind != "fsq" else model.fsq_spec.implicit_size
    for k in range(n_layers):
        layer = {}
        flat = {m: codes[m][:, :, k].reshape(-1) for m in mods}
        all_codes = np.concatenate(list(flat.values()))
        layer["perplexity"] = quantize.codebook_perplexity(all_codes, size)
        layer["usage_histogram"] = np.bincount(all_codes, minlength=size).tolist()
        agree = []
        for i, m1 in enumerate(mods):
            for m2 in mods[i + 1:]:
                agree.append(float((flat[m1] == flat[m2]).mean()))
        layer["agreement_rate"] = float(np.mean(agree))
        stats[f"layer{k + 1}"] = layer
    return stats


def all_direction_accuracy(model, train_ds, eval_ds, label_kind="coarse",
                           mode="only1", seed=0):
    """Accuracy per ordered modality pair plus m->m rows and the cross avg."""
    mods = list(model.modality_dims.keys())
    reports = []
    cross = []
    for m1 in mods:
        for m2 in mods:
            rep = cross_modal_eval(model, train_ds, eval_ds, m1, m2,
                                   label_kind=label_kind, mode=mode, seed=seed)
            reports.append(rep)
            if m1 != m2:
                cross.append(rep.value)
    return reports, float(np.mean(cross))


def quant_method_bench(dataset_splits, cfg: model_mod.TrainConfig,
                       methods=("vq", "fsq", "rvq-2", "rvq-3", "rvq-4"),
                       seeds=(0,), on_progress=None) -> list[dict]:
    """Train one model per quantizer kind (identical seed/config otherwise);
    report cross-modal / intra-modal accuracy and reconstruction MSE."""
    train_ds, _, test_ds = dataset_splits
    rows = []
    for method in methods:
        model_mod.parse_quantizer(method)  # validate early
        for seed in seeds:
            import dataclasses
            c = dataclasses.replace(cfg, quantizer=method, seed=seed)
            mdl = model_mod.SrcidModel({m: d for m, d in train_ds.spec.modality_dims.items()}, c)
            model_mod.train_model(mdl, train_ds.batch, c, len(train_ds))
            reports, cross_avg = all_direction_accuracy(mdl, train_ds, test_ds,
                                                        mode="both", seed=seed)
            intra = [r.value for r in reports if r.direction[0] == r.direction[-1]]
            mse = reconstruction_mse(mdl, test_ds)
            row = {"method": method, "seed": seed,
                   "cross_modal_accuracy": cross_avg,
                   "intra_modal_accuracy": float(np.mean(intra)),
                   "reconstruction_mse": mse,
                   "reports": [r.row() for r in reports]}
            stats = codebook_stats(mdl, test_ds) if mdl.kind != "fsq" else {}
            if stats:
                row["agreement_rate"] = stats["layer1"]["agreement_rate"]
            rows.append(row)
            if on_progress is not None:
                on_progress(row)
    return rows


def reconstruction_mse(mdl, ds) -> float:
    """Layer-1 reconstruction error, averaged over modalities."""
    enc = mdl.encode_all(ds.batch(np.arange(len(ds))), layers=(1,))
    from . import nets, numgrad
    errs = []
    for m in mdl.modality_dims:
        e = enc[(m, 1)]
        x_rec = nets.mlp_apply(mdl.params, f"dec.{m}.1",
                               numgrad.concat([e["z_hat"], e["z_bar"]], axis=1))
        errs.append(float(((e["x"].value - x_rec.value) ** 2).mean()))
    return float(np.mean(errs))


# ---- report output -------------------------------------------------------


def write_reports_csv(reports, path) -> None:
    fields = ["task", "direction", "metric", "value", "mode", "seed", "config_digest"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for r in reports:
            row = r.row() if isinstance(r, EvalReport) else {k: r[k] for k in fields}
            w.writerow(row)


def write_reports_jsonl(reports, path) -> None:
    with open(path, "w") as f:
        for r in reports:
            row = r.row() if isinstance(r, EvalReport) else r
            f.write(json.dumps(row, sort_keys=True) + "\n")
