import math

import numpy as np
import pytest

from prodembed.objectives import (
    LossReport,
    LossWeights,
    compute_losses,
    gmim_loss,
    gmlm_loss,
    itm_loss,
    mim_loss,
    mlm_loss,
    total_loss,
)


class TestWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.itm, w.mlm, w.gmlm, w.mim, w.gmim) == (1.0, 0.1, 0.1, 0.01, 0.01)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(mim=-0.01)


class TestCrossEntropyLosses:
    def test_uniform_binary_logits_give_ln2(self):
        logits = np.zeros((8, 2))
        labels = np.array([0, 1] * 4)
        assert itm_loss(logits, labels) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_handcomputed_value(self):
        # Single row, logits (1, 0), target 0:
        # loss = -1 + log(e^1 + e^0) = log(1 + e^-1).
        logits = np.array([[1.0, 0.0]])
        want = math.log(1.0 + math.exp(-1.0))
        assert itm_loss(logits, [0]) == pytest.approx(want, abs=1e-12)

    def test_mlm_matches_manual_mean(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(5, 7))
        targets = rng.integers(0, 7, size=5)
        manual = []
        for i in range(5):
            z = logits[i] - logits[i].max()
            manual.append(-(z[targets[i]] - math.log(np.exp(z).sum())))
        assert mlm_loss(logits, targets) == pytest.approx(np.mean(manual), abs=1e-12)

    def test_gmlm_is_same_functional(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(4, 9))
        targets = rng.integers(0, 9, size=4)
        assert gmlm_loss(logits, targets) == mlm_loss(logits, targets)

    def test_perfect_prediction_loss_near_zero(self):
        logits = np.full((3, 5), -30.0)
        targets = np.array([2, 0, 4])
        logits[np.arange(3), targets] = 30.0
        assert mlm_loss(logits, targets) < 1e-12


class TestPatchLosses:
    def test_summed_l2_contract(self):
        # Constant offset eps on every element of a D-dim patch gives
        # loss = D * eps^2 per patch (summed, not element-averaged).
        d = 768
        recon = np.zeros((4, d))
        targets = np.full((4, d), 0.1)
        assert mim_loss(recon, targets) == pytest.approx(d * 0.01, rel=1e-9)

    def test_example_value(self):
        # One masked patch, uniform error 0.1 over 768 elements -> 7.68.
        recon = np.zeros((1, 768))
        targets = np.full((1, 768), 0.1)
        assert mim_loss(recon, targets) == pytest.approx(7.68, rel=1e-9)

    def test_mean_over_patches(self):
        recon = np.zeros((2, 4))
        targets = np.array([[1.0, 0, 0, 0], [0, 0, 0, 3.0]])
        # Rows contribute 1.0 and 9.0; mean 5.0.
        assert mim_loss(recon, targets) == pytest.approx(5.0, abs=1e-12)

    def test_gmim_is_same_functional(self):
        rng = np.random.default_rng(2)
        recon, targets = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
        assert gmim_loss(recon, targets) == mim_loss(recon, targets)

    def test_zero_for_exact_reconstruction(self):
        x = np.random.default_rng(3).normal(size=(5, 8))
        assert mim_loss(x, x.copy()) == 0.0


class TestTotalLoss:
    def test_all_ones(self):
        assert total_loss((1.0, 1.0, 1.0, 1.0, 1.0),
                          LossWeights()) == pytest.approx(1.22, abs=1e-9)

    def test_handcomputed_mixture(self):
        # 0.7 + 0.1*5 + 0.1*5 + 0.01*0.02 + 0.01*0.02 = 1.7004
        got = total_loss((0.7, 5.0, 5.0, 0.02, 0.02), LossWeights())
        assert got == pytest.approx(1.7004, abs=1e-9)

    def test_zeros(self):
        assert total_loss((0.0,) * 5, LossWeights()) == 0.0

    def test_respects_custom_weights(self):
        w = LossWeights(itm=2.0, mlm=0.0, gmlm=0.0, mim=1.0, gmim=0.0)
        assert total_loss((1.0, 9.0, 9.0, 3.0, 9.0), w) == pytest.approx(5.0)


class _FakeBatch:
    """Just the fields compute_losses touches."""

    def __init__(self, itm_labels, tok_t_ex, tok_t_id, pat_t_ex, pat_t_vec):
        self.itm_labels = np.asarray(itm_labels)
        self.tok_t_ex = np.asarray(tok_t_ex, dtype=np.int64)
        self.tok_t_id = np.asarray(tok_t_id, dtype=np.int64)
        self.pat_t_ex = np.asarray(pat_t_ex, dtype=np.int64)
        self.pat_t_vec = np.asarray(pat_t_vec, dtype=np.float32)


class _FakeOutputs:
    def __init__(self, itm_logits, mlm_logits, mim_recon):
        self.itm_logits = itm_logits
        self.mlm_logits = mlm_logits
        self.gmlm_logits = mlm_logits.copy()
        self.mim_recon = mim_recon
        self.gmim_recon = mim_recon.copy()


def _toy():
    batch = _FakeBatch(
        itm_labels=[1, 0],
        tok_t_ex=[0, 1], tok_t_id=[2, 3],
        pat_t_ex=[1], pat_t_vec=np.full((1, 4), 0.5),
    )
    outputs = _FakeOutputs(
        itm_logits=np.zeros((2, 2)),
        mlm_logits=np.zeros((2, 5)),
        mim_recon=np.zeros((1, 4)),
    )
    return outputs, batch


class TestComputeLosses:
    def test_report_values(self):
        outputs, batch = _toy()
        report, grads = compute_losses(outputs, batch)
        assert report.itm == pytest.approx(math.log(2.0))
        assert report.mlm == pytest.approx(math.log(5.0))
        assert report.gmlm == pytest.approx(math.log(5.0))
        assert report.mim == pytest.approx(4 * 0.25)
        assert report.gmim == pytest.approx(4 * 0.25)
        want_total = total_loss((report.itm, report.mlm, report.gmlm,
                                 report.mim, report.gmim), LossWeights())
        assert report.total == pytest.approx(want_total, abs=1e-12)
        assert report.masked_tokens == 2
        assert report.masked_patches == 1

    def test_grad_order_and_weighting(self):
        outputs, batch = _toy()
        w = LossWeights(itm=0.0, mlm=1.0, gmlm=0.0, mim=2.0, gmim=0.0)
        _, (d_itm, d_mlm, d_mim, d_gmlm, d_gmim) = compute_losses(outputs, batch, w)
        assert not d_itm.any() and not d_gmlm.any() and not d_gmim.any()
        # d_mim = w * (2/count) * (recon - target) = 2 * 2 * (-0.5) elementwise
        np.testing.assert_allclose(d_mim, -2.0, atol=1e-7)
        # mlm grad rows sum to zero (softmax property), scaled by 1/count
        np.testing.assert_allclose(d_mlm.sum(axis=1), 0.0, atol=1e-12)
        assert d_mlm[0, 2] == pytest.approx((0.2 - 1.0) / 2)

    def test_matched_only_drops_mismatched_rows(self):
        outputs, batch = _toy()
        report, grads = compute_losses(outputs, batch, matched_only=True)
        # Token target 1 and the only patch target sit on example 1 (label 0).
        assert report.mlm == pytest.approx(math.log(5.0))  # one row kept
        assert report.mim == 0.0
        _, d_mlm, d_mim, _, _ = grads
        assert not d_mlm[1].any()
        assert not d_mim.any()
        # ITM itself always uses every example.
        assert report.itm == pytest.approx(math.log(2.0))

    def test_no_masked_positions_gives_zero(self):
        batch = _FakeBatch(itm_labels=[1], tok_t_ex=[], tok_t_id=[],
                           pat_t_ex=[], pat_t_vec=np.zeros((0, 4)))
        outputs = _FakeOutputs(itm_logits=np.zeros((1, 2)),
                               mlm_logits=np.zeros((0, 5)),
                               mim_recon=np.zeros((0, 4)))
        report, grads = compute_losses(outputs, batch)
        assert report.mlm == 0.0 and report.mim == 0.0
        assert report.masked_tokens == 0 and report.masked_patches == 0

    def test_report_json_round_trips(self):
        import json
        report = LossReport(itm=0.5, mlm=1.0, gmlm=1.5, mim=2.0, gmim=2.5,
                            total=3.0, masked_tokens=7, masked_patches=3)
        rec = json.loads(report.to_json(step=12, lr=1e-4))
        assert rec["step"] == 12
        assert rec["total"] == 3.0
        assert rec["masked_patches"] == 3
