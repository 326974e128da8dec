"""Tests for the evaluation harness: probes, retrieval, codebook stats and
report serialization."""

import csv
import json
import warnings

import numpy as np
import pytest

from srcid import evalharness, synthdata
from srcid.evalharness import EvalError, EvalReport
from srcid.model import SrcidModel, TrainConfig


@pytest.fixture(scope="module")
def tiny_setup():
    spec = synthdata.GeneratorSpec(
        n_coarse=3, n_fine=6, seq_len=4,
        modality_dims={"a": 6, "b": 5, "c": 4}, seed=0)
    ds = synthdata.generate(spec, 60)
    tr, _, te = synthdata.split(ds, (0.7, 0.0, 0.3), seed=0)
    cfg = TrainConfig(d_latent=4, hidden=8, codebook_size=6, cpc_horizon=1, seed=0)
    model = SrcidModel(spec.modality_dims, cfg)  # untrained on purpose
    return model, tr, te


class TestEvalReport:
    def test_out_of_range_value_rejected(self):
        with pytest.raises(EvalError):
            EvalReport(task="t", direction="a->b", metric="accuracy", value=1.5)

    def test_row_drops_extra(self):
        r = EvalReport(task="t", direction="a->b", metric="accuracy",
                       value=0.5, extra={"junk": 1})
        assert "extra" not in r.row()


class TestCrossModalEval:
    def test_untrained_model_near_chance(self, tiny_setup):
        """An untrained model's general features carry little label signal,
        so the probe should sit near the 1/n_coarse chance band."""
        model, tr, te = tiny_setup
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rep = evalharness.cross_modal_eval(model, tr, te, "a", "b")
        assert rep.task == "crossmodal-coarse"
        assert rep.direction == "a->b"
        assert rep.value < 0.75  # well below a trained model, above 0 noise

    def test_label_override_used(self, tiny_setup):
        model, tr, te = tiny_setup
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rep = evalharness.cross_modal_eval(
                model, tr, te, "a", "a",
                label_override=lambda ds, mod: ds.nuisance[mod])
        assert 0.0 <= rep.value <= 1.0

    def test_unknown_label_kind_rejected(self, tiny_setup):
        model, tr, te = tiny_setup
        with pytest.raises(EvalError):
            evalharness.cross_modal_eval(model, tr, te, "a", "b", label_kind="medium")

    def test_all_direction_covers_nine_pairs(self, tiny_setup):
        model, tr, te = tiny_setup
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            reports, cross = evalharness.all_direction_accuracy(model, tr, te)
        assert len(reports) == 9
        dirs = {r.direction for r in reports}
        assert dirs == {f"{m1}->{m2}" for m1 in "abc" for m2 in "abc"}
        off = [r.value for r in reports if r.direction[0] != r.direction[-1]]
        assert abs(cross - np.mean(off)) < 1e-12


class TestRetrieval:
    def test_recall_monotone_in_k_and_bounded(self, tiny_setup):
        model, tr, te = tiny_setup
        reports = evalharness.retrieval_eval(model, te, "a", "b", ks=(1, 5, 10))
        by_dir = {}
        for r in reports:
            k = int(r.metric.split("@")[1])
            by_dir.setdefault(r.direction, {})[k] = r.value
        for vals in by_dir.values():
            assert vals[1] <= vals[5] <= vals[10]
            assert all(0.0 <= v <= 1.0 for v in vals.values())

    def test_mean_direction_is_average(self, tiny_setup):
        model, tr, te = tiny_setup
        reports = evalharness.retrieval_eval(model, te, "a", "c", ks=(5,))
        vals = {r.direction: r.value for r in reports}
        assert abs(vals["a<->c"] - (vals["a->c"] + vals["c->a"]) / 2) < 1e-12

    def test_small_gallery_rejected(self, tiny_setup):
        model, tr, te = tiny_setup
        with pytest.raises(EvalError):
            evalharness.retrieval_eval(model, te.subset(np.arange(4)), "a", "b",
                                       ks=(1, 10))


class TestCodebookStats:
    def test_structure_and_conservation(self, tiny_setup):
        model, tr, te = tiny_setup
        stats = evalharness.codebook_stats(model, te)
        assert set(stats) == {"layer1", "layer2"}
        n_expected = 3 * len(te) * te.spec.seq_len  # three modalities
        for layer in stats.values():
            assert 1.0 <= layer["perplexity"] <= model.cfg.codebook_size
            assert sum(layer["usage_histogram"]) == n_expected
            assert 0.0 <= layer["agreement_rate"] <= 1.0


class TestReconstructionMse:
    def test_nonnegative_and_finite(self, tiny_setup):
        model, tr, te = tiny_setup
        mse = evalharness.reconstruction_mse(model, te)
        assert np.isfinite(mse) and mse >= 0.0


class TestReportFiles:
    def _reports(self):
        return [EvalReport(task="t", direction="a->b", metric="accuracy",
                           value=0.25 * i, seed=i, mode="only1")
                for i in range(4)]

    def test_csv_round_trip(self, tmp_path):
        reports = self._reports()
        path = tmp_path / "reports.csv"
        evalharness.write_reports_csv(reports, path)
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 4
        for r, row in zip(reports, rows):
            assert row["direction"] == r.direction
            assert float(row["value"]) == r.value
            assert int(row["seed"]) == r.seed

    def test_jsonl_round_trip(self, tmp_path):
        reports = self._reports()
        path = tmp_path / "reports.jsonl"
        evalharness.write_reports_jsonl(reports, path)
        rows = [json.loads(line) for line in open(path)]
        assert rows == [r.row() for r in reports]
