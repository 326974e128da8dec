"""Tests for the dependence estimators: the Gaussian variational upper
bound used for minimization and the contrastive predictive objective used
for cross-modal maximization."""

import math

import numpy as np
import pytest

from srcid import mi, numgrad
from srcid.mi import ClubNet, CpcState, MiError
from srcid.numgrad import Tensor


def _make_net(x_dim=3, y_dim=2, seed=0, hidden=16):
    return ClubNet(x_dim, y_dim, np.random.default_rng(seed), hidden=hidden)


def _gaussian_pairs(rng, n, d, rho):
    """Correlated pair (x, y) with per-dim correlation rho; the true MI is
    -d/2 * log(1 - rho^2)."""
    x = rng.normal(size=(n, d))
    y = rho * x + math.sqrt(1.0 - rho * rho) * rng.normal(size=(n, d))
    return x, y


def _reference_estimate(net, z, z_bar):
    """Slow double loop over all (i, j) pairs, straight from the estimator
    definition, using densities computed row by row."""
    mu_t, logvar_t = net.mu_logvar(numgrad.constant(z))
    mu, logvar = mu_t.value, logvar_t.value
    n = z.shape[0]

    def logpdf(i, j):
        # log q(z_bar_j | z_i), dropping terms that cancel in the estimate
        return -0.5 * np.sum((z_bar[j] - mu[i]) ** 2 * np.exp(-logvar[i]))

    pos = np.mean([logpdf(i, i) for i in range(n)])
    neg = np.mean([logpdf(i, j) for i in range(n) for j in range(n)])
    return pos - neg


class TestClub:
    def test_matches_double_loop_reference(self):
        rng = np.random.default_rng(3)
        net = _make_net(4, 3, seed=5)
        z = rng.normal(size=(17, 4))
        z_bar = rng.normal(size=(17, 3))
        est = mi.club_mi_estimate(net, z, z_bar).item()
        ref = _reference_estimate(net, z, z_bar)
        assert abs(est - ref) < 1e-10

    def test_reference_match_many_random_nets(self):
        rng = np.random.default_rng(11)
        for trial in range(20):
            net = _make_net(3, 2, seed=100 + trial, hidden=8)
            n = int(rng.integers(2, 12))
            z = rng.normal(scale=2.0, size=(n, 3))
            z_bar = rng.normal(scale=2.0, size=(n, 2))
            est = mi.club_mi_estimate(net, z, z_bar).item()
            ref = _reference_estimate(net, z, z_bar)
            assert abs(est - ref) < 1e-9

    def test_estimate_gradient_finite_difference(self):
        rng = np.random.default_rng(7)
        net = _make_net(3, 2, seed=9, hidden=8)
        z = rng.normal(size=(6, 3))
        z_bar = rng.normal(size=(6, 2))

        def loss_fn():
            return mi.club_mi_estimate(net, z, z_bar)

        report = numgrad.finite_diff_check(loss_fn, net.store)
        assert report["max_rel_error"] < 1e-5

    def test_loglik_gradient_finite_difference(self):
        rng = np.random.default_rng(8)
        net = _make_net(3, 2, seed=10, hidden=8)
        z = rng.normal(size=(5, 3))
        z_bar = rng.normal(size=(5, 2))

        def loss_fn():
            return mi.club_loglik(net, z, z_bar)

        report = numgrad.finite_diff_check(loss_fn, net.store)
        assert report["max_rel_error"] < 1e-5

    def test_batch_of_one_rejected(self):
        net = _make_net(2, 2)
        with pytest.raises(MiError):
            mi.club_mi_estimate(net, np.zeros((1, 2)), np.zeros((1, 2)))

    def test_negative_lr_rejected(self):
        net = _make_net(2, 2)
        z = np.zeros((4, 2))
        with pytest.raises(MiError):
            mi.train_club_adversarial_step(net, z, z, lr=-0.1)

    @pytest.mark.parametrize("rho", [0.3, 0.6, 0.9])
    def test_calibration_correlated_gaussians(self, rho):
        """After fitting q on correlated Gaussian pairs the estimate should
        come in near the analytic MI (it is an upper bound under a perfect
        q; with a fitted q we accept a small shortfall)."""
        d = 2
        true_mi = -0.5 * d * math.log(1.0 - rho * rho)
        rng = np.random.default_rng(42)
        net = _make_net(d, d, seed=1, hidden=32)
        for step in range(400):
            z, z_bar = _gaussian_pairs(rng, 128, d, rho)
            est = mi.train_club_adversarial_step(net, z, z_bar, lr=3e-3)
        z, z_bar = _gaussian_pairs(rng, 2000, d, rho)
        est = mi.club_mi_estimate(net, z, z_bar).item()
        assert est > true_mi - 0.1

    def test_independent_inputs_estimate_near_zero(self):
        rng = np.random.default_rng(6)
        net = _make_net(2, 2, seed=2, hidden=32)
        for step in range(400):
            z = rng.normal(size=(128, 2))
            z_bar = rng.normal(size=(128, 2))
            mi.train_club_adversarial_step(net, z, z_bar, lr=3e-3)
        z = rng.normal(size=(2000, 2))
        z_bar = rng.normal(size=(2000, 2))
        est = mi.club_mi_estimate(net, z, z_bar).item()
        assert abs(est) < 0.05

    def test_adversarial_step_increases_loglik(self):
        rng = np.random.default_rng(12)
        net = _make_net(2, 2, seed=3, hidden=16)
        z, z_bar = _gaussian_pairs(rng, 64, 2, 0.5)
        before = mi.club_loglik(net, z, z_bar).item()
        for _ in range(20):
            mi.train_club_adversarial_step(net, z, z_bar, lr=1e-2)
        after = mi.club_loglik(net, z, z_bar).item()
        assert after > before


class TestCpc:
    def _state(self, seed=0, z_dim=4, ctx=6, horizon=2):
        return CpcState(["a", "b"], z_dim, ctx, horizon, np.random.default_rng(seed))

    def test_uniform_logits_give_log_n(self):
        """With a zeroed prediction map every candidate scores the same, so
        the contrastive loss equals log(batch)."""
        st = self._state()
        for r in (1, 2):
            st.store[f"W.a.{r}"].value[:] = 0.0
        rng = np.random.default_rng(0)
        n = 8
        c = numgrad.constant(rng.normal(size=(n, 6)))
        futures = {1: numgrad.constant(rng.normal(size=(n, 4)))}
        loss = mi.cpc_infonce_loss(st, "a", c, futures).item()
        assert abs(loss - math.log(n)) < 1e-12

    def test_loss_nonnegative_mi_bound(self):
        """log(N) - loss is the contrastive dependence bound and can never
        exceed log(N); equivalently the loss is positive for soft logits."""
        st = self._state(seed=4)
        rng = np.random.default_rng(1)
        n = 16
        c = numgrad.constant(rng.normal(size=(n, 6)))
        futures = {1: numgrad.constant(rng.normal(size=(n, 4))),
                   2: numgrad.constant(rng.normal(size=(n, 4)))}
        loss = mi.cpc_infonce_loss(st, "a", c, futures).item()
        assert loss > 0.0

    def test_loss_decreases_with_training(self):
        """On pairs with real structure a few hundred ascent steps should cut
        the contrastive loss well below its starting point."""
        st = self._state(seed=2, z_dim=3, ctx=5, horizon=1)
        rng = np.random.default_rng(9)
        n, T = 16, 4

        def batch():
            base = rng.normal(size=(n, 3))
            seq = [base + 0.1 * rng.normal(size=(n, 3)) for _ in range(T)]
            return np.concatenate(seq, axis=0)

        def step(update):
            za = batch()
            zb = za + 0.05 * rng.normal(size=za.shape)
            loss = mi.cpc_total_loss(
                st, {"a": numgrad.constant(za), "b": numgrad.constant(zb)},
                n, T, t=2)
            if update:
                st.store.zero_grads()
                numgrad.backward(loss)
                st.store.adam_step(1e-2)
            return loss.item()

        first = np.mean([step(False) for _ in range(5)])
        for _ in range(300):
            step(True)
        last = np.mean([step(False) for _ in range(5)])
        assert last < 0.7 * first

    def test_context_is_causal(self):
        """c_t must not move when a strictly later input row changes."""
        st = self._state(seed=3, z_dim=3, ctx=4, horizon=1)
        rng = np.random.default_rng(5)
        n, T = 4, 5
        z = rng.normal(size=(T * n, 3))
        t = 2

        def contexts(zarr):
            loss_inputs = {"a": numgrad.constant(zarr), "b": numgrad.constant(zarr)}
            # reuse the public scan on the prefix the loss would consume
            prefix = numgrad.constant(zarr[: t * n, :])
            out = []
            ctx = None
            Wx = st.store["rnn.a.Wx"]
            Wc = st.store["rnn.a.Wc"]
            b = st.store["rnn.a.b"]
            for s in range(t):
                zt = prefix[s * n:(s + 1) * n, :]
                pre = zt @ Wx + b
                ctx = numgrad.tanh(pre) if ctx is None else numgrad.tanh(pre + ctx @ Wc)
            return ctx.value

        base = contexts(z)
        z_perturbed = z.copy()
        z_perturbed[t * n:, :] += 10.0  # only rows at times >= t
        assert np.array_equal(base, contexts(z_perturbed))

    def test_anchor_bounds_validated(self):
        st = self._state(horizon=2)
        rng = np.random.default_rng(0)
        z = {m: numgrad.constant(rng.normal(size=(5 * 4, 4))) for m in "ab"}
        with pytest.raises(MiError):
            mi.cpc_total_loss(st, z, 4, 5, t=0)
        with pytest.raises(MiError):
            mi.cpc_total_loss(st, z, 4, 5, t=4)

    def test_offset_outside_horizon_rejected(self):
        st = self._state(horizon=1)
        c = numgrad.constant(np.zeros((3, 6)))
        futures = {2: numgrad.constant(np.zeros((3, 4)))}
        with pytest.raises(MiError):
            mi.cpc_infonce_loss(st, "a", c, futures)

    def test_batch_of_one_rejected(self):
        st = self._state()
        c = numgrad.constant(np.zeros((1, 6)))
        with pytest.raises(MiError):
            mi.cpc_infonce_loss(st, "a", c, {1: numgrad.constant(np.zeros((1, 4)))})

    def test_total_loss_gradient_finite_difference(self):
        st = self._state(seed=6, z_dim=2, ctx=3, horizon=1)
        rng = np.random.default_rng(7)
        n, T = 3, 3
        za = rng.normal(size=(T * n, 2))
        zb = rng.normal(size=(T * n, 2))

        def loss_fn():
            return mi.cpc_total_loss(
                st, {"a": numgrad.constant(za), "b": numgrad.constant(zb)},
                n, T, t=2)

        report = numgrad.finite_diff_check(loss_fn, st.store)
        assert report["max_rel_error"] < 1e-5
