"""Mutual-information machinery.

Two estimators with opposite roles: a variational Gaussian upper bound
(CLUB) used to *minimize* dependence between the general and specific
features of one modality, and contrastive predictive coding with an
InfoNCE objective used to *maximize* agreement of general features across
modalities.
"""

from __future__ import annotations

import math

import numpy as np

from . import nets, numgrad
from .numgrad import ParamStore, Tensor

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
LN_2PI = math.log(2.0 * math.pi)


class MiError(Exception):
    pass


class ClubNet:
    """MLP producing (mu, logvar) of a diagonal Gaussian q(y|x).

    logvar is clamped to [-10, 10] so log-densities stay finite.
    """

    def __init__(self, x_dim: int, y_dim: int, rng, hidden: int = nets.HIDDEN_DEFAULT):
        self.x_dim = x_dim
        self.y_dim = y_dim
        self.store = ParamStore()
        nets.init_mlp(self.store, "club", x_dim, 2 * y_dim, hidden, rng)

    def mu_logvar(self, x: Tensor) -> tuple[Tensor, Tensor]:
        out = nets.mlp_apply(self.store, "club", x)
        mu = out[:, : self.y_dim]
        logvar = numgrad.clip(out[:, self.y_dim:], LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else numgrad.constant(np.asarray(x, dtype=np.float64))


def club_loglik(net: ClubNet, z, z_bar) -> Tensor:
    """Mean Gaussian log-density of paired z_bar rows under q(.|z)."""
    z, z_bar = _lift(z), _lift(z_bar)
    mu, logvar = net.mu_logvar(z)
    inv_var = numgrad.exp(-logvar)
    sq = numgrad.square(z_bar - mu)
    per_row = numgrad.tsum(sq * inv_var + logvar, axis=1)
    d = net.y_dim
    return numgrad.tmean(per_row) * -0.5 + numgrad.constant(-0.5 * d * LN_2PI)


def club_mi_estimate(net: ClubNet, z, z_bar) -> Tensor:
    """Sampled upper-bound estimator: positive-pair log-density minus the
    all-pairs mean (the full double sum, j == i included)."""
    z, z_bar = _lift(z), _lift(z_bar)
    n = z.shape[0]
    if n < 2:
        raise MiError("CLUB estimate needs a batch of at least 2")
    mu, logvar = net.mu_logvar(z)
    inv_var = numgrad.exp(-logvar)

    pos_sq = numgrad.square(z_bar - mu)
    positive = numgrad.tmean(numgrad.tsum(pos_sq * inv_var, axis=1)) * -0.5

    # sum_{i,j} (zbar_jd - mu_id)^2 / var_id expands so only the per-dim
    # moments of zbar are needed: A_d = sum_j zbar_jd^2, B_d = sum_j zbar_jd.
    A = numgrad.tsum(numgrad.square(z_bar), axis=0, keepdims=True)
    B = numgrad.tsum(z_bar, axis=0, keepdims=True)
    cross = A - mu * B * 2.0 + numgrad.square(mu) * float(n)
    negative = numgrad.tsum(cross * inv_var) * (-0.5 / (n * n))

    # the logvar and 2pi normalizers cancel between the two expectations
    return positive - negative


def train_club_adversarial_step(net: ClubNet, z, z_bar, lr: float) -> float:
    """Ascend club_loglik in the net's parameters (tightening q), then
    return the detached MI estimate under the updated net."""
    if lr < 0:
        raise MiError("lr must be nonnegative")
    z = np.asarray(z.value if isinstance(z, Tensor) else z, dtype=np.float64)
    z_bar = np.asarray(z_bar.value if isinstance(z_bar, Tensor) else z_bar, dtype=np.float64)
    net.store.zero_grads()
    loglik = club_loglik(net, z, z_bar)
    numgrad.backward(loglik)
    net.store.adam_step(lr, sign=-1.0)
    return club_mi_estimate(net, z, z_bar).item()


# ---- contrastive predictive coding ---------------------------------------


class CpcState:
    """Per-modality causal summarizers plus bilinear prediction maps.

    One tanh recurrence per modality and one matrix W[m, r] per predicting
    modality m and future offset r in [1, horizon]. Negatives are the other
    batch rows at the same time index, so N_neg = batch - 1.
    """

    def __init__(self, modalities, z_dim: int, context_dim: int, horizon: int, rng):
        if horizon < 1:
            raise MiError("horizon must be >= 1")
        self.modalities = list(modalities)
        self.z_dim = z_dim
        self.context_dim = context_dim
        self.horizon = horizon
        self.store = ParamStore()
        for m in self.modalities:
            nets.init_rnn(self.store, f"rnn.{m}", z_dim, context_dim, rng)
            for r in range(1, horizon + 1):
                s = 1.0 / np.sqrt(context_dim)
                self.store.add(f"W.{m}.{r}", rng.normal(0.0, s, size=(z_dim, context_dim)))


def cpc_context(state: CpcState, modality: str, z_seq: Tensor) -> Tensor:
    """Causal context sequence; c_t depends on z_{1..t} only."""
    return nets.rnn_scan(state.store, f"rnn.{modality}", z_seq)


def cpc_infonce_loss(state: CpcState, m: str, c_t: Tensor, z_future_by_r: dict) -> Tensor:
    """InfoNCE for one ordered pair at one anchor time.

    c_t: (N, context_dim) contexts of modality m. z_future_by_r maps offset
    r -> (N, z_dim) target-modality features at t+r; row i is the positive
    for query i, the other rows are the negatives.
    """
    n = c_t.shape[0]
    if n < 2:
        raise MiError("InfoNCE needs at least one negative (batch >= 2)")
    labels = np.arange(n)
    total = None
    count = 0
    for r in sorted(z_future_by_r.keys()):
        if not (1 <= r <= state.horizon):
            raise MiError(f"offset {r} outside horizon [1, {state.horizon}]")
        W = state.store[f"W.{m}.{r}"]
        # score(query i, candidate j) = z_j W c_i
        logits = c_t @ numgrad.transpose(W) @ numgrad.transpose(z_future_by_r[r])
        term = numgrad.softmax_cross_entropy(logits, labels)
        total = term if total is None else total + term
        count += 1
    if count == 0:
        raise MiError("no future offsets supplied")
    return total * (1.0 / count)


def cpc_total_loss(state: CpcState, z_by_modality: dict, n_samples: int,
                   seq_len: int, t: int) -> Tensor:
    """Mean InfoNCE over all ordered modality pairs at anchor time t.

    z_by_modality maps modality -> (T*N, z_dim) Tensor laid out time-major
    (row t*N + i). t must satisfy 0 < t <= T - horizon.
    """
    R = state.horizon
    if not (0 < t <= seq_len - R):
        raise MiError(f"anchor t={t} outside (0, {seq_len - R}]")
    contexts = {}
    for m in self_mods(state, z_by_modality):
        # scan only the needed prefix; c at index t-1 summarizes z_{<=t}
        prefix = z_by_modality[m][: t * n_samples, :]
        per_step = [prefix[s * n_samples:(s + 1) * n_samples, :] for s in range(t)]
        ctx = None
        Wx = state.store[f"rnn.{m}.Wx"]
        Wc = state.store[f"rnn.{m}.Wc"]
        b = state.store[f"rnn.{m}.b"]
        for zt in per_step:
            pre = zt @ Wx + b
            ctx = numgrad.tanh(pre) if ctx is None else numgrad.tanh(pre + ctx @ Wc)
        contexts[m] = ctx
    total = None
    pairs = 0
    for m in contexts:
        for nmod in contexts:
            if nmod == m:
                continue
            futures = {
                r: z_by_modality[nmod][(t + r - 1) * n_samples:(t + r) * n_samples, :]
                for r in range(1, R + 1)
            }
            term = cpc_infonce_loss(state, m, contexts[m], futures)
            total = term if total is None else total + term
            pairs += 1
    return total * (1.0 / pairs)


def self_mods(state: CpcState, z_by_modality: dict):
    missing = [m for m in z_by_modality if m not in state.modalities]
    if missing:
        raise MiError(f"unknown modalities {missing}")
    return [m for m in state.modalities if m in z_by_modality]
