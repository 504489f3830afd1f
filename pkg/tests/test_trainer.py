import json
import math

import numpy as np
import pytest

from prodembed.bpe import train_bpe
from prodembed.model import ModelConfig, init_params, load_checkpoint
from prodembed.synth import SynthConfig, generate_catalog
from prodembed.trainer import (
    FinetuneConfig,
    OptimConfig,
    adamw_step,
    clip_gradients,
    init_adam_state,
    lr_at,
    pretrain,
    select_checkpoint,
)


class TestSchedule:
    def test_paper_peak_at_warmup_end(self):
        cfg = OptimConfig()  # peak 1e-4, warmup 4000, total 100000
        assert lr_at(4000, cfg) == pytest.approx(1e-4, abs=0.0)

    def test_midpoint_of_decay(self):
        cfg = OptimConfig()
        # At step 52000: (100000-52000)/(100000-4000) = 0.5 of peak.
        assert lr_at(52000, cfg) == pytest.approx(5e-5, rel=1e-12)

    def test_warmup_is_linear_from_zero(self):
        cfg = OptimConfig(peak_lr=3e-4, warmup_steps=200, total_steps=2000)
        assert lr_at(0, cfg) == 0.0
        assert lr_at(50, cfg) == pytest.approx(3e-4 * 0.25)
        assert lr_at(100, cfg) == pytest.approx(1.5e-4)

    def test_decays_to_zero_at_total(self):
        cfg = OptimConfig(peak_lr=1e-3, warmup_steps=10, total_steps=100)
        assert lr_at(100, cfg) == 0.0
        assert lr_at(1000, cfg) == 0.0  # clamped past the end

    def test_continuous_at_peak(self):
        cfg = OptimConfig(peak_lr=2e-4, warmup_steps=100, total_steps=1000)
        left = lr_at(100, cfg)
        right = lr_at(101, cfg)
        assert left == pytest.approx(2e-4)
        assert right < left
        assert left - right == pytest.approx(2e-4 / 900, rel=1e-9)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            OptimConfig(warmup_steps=100, total_steps=100)
        with pytest.raises(ValueError):
            OptimConfig(batch_size=0)


class TestAdamW:
    def test_single_param_hand_arithmetic(self):
        # One scalar-ish parameter, one step, hand-checked against the
        # update rule: m=0.1g, v=0.02g^2, with bias correction at t=1
        # m_hat = g, v_hat = g^2 -> delta = lr * g/(|g|+eps), plus decay.
        cfg = OptimConfig(beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=0.1,
                          warmup_steps=1, total_steps=2)
        params = {"w": np.array([2.0], dtype=np.float64)}
        grads = {"w": np.array([0.5], dtype=np.float64)}
        state = init_adam_state(params)
        lr = 0.01
        adamw_step(params, grads, state, lr, cfg)
        decayed = 2.0 - lr * 0.1 * 2.0
        want = decayed - lr * 0.5 / (math.sqrt(0.25) + 1e-8)
        assert params["w"][0] == pytest.approx(want, abs=1e-7)
        # Moments stored un-corrected.
        assert state["m"]["w"][0] == pytest.approx(0.05, abs=1e-12)
        assert state["v"]["w"][0] == pytest.approx(0.005, abs=1e-12)

    def test_two_steps_hand_arithmetic(self):
        cfg = OptimConfig(beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=0.0,
                          warmup_steps=1, total_steps=2)
        params = {"w": np.array([1.0], dtype=np.float64)}
        state = init_adam_state(params)
        lr = 0.1
        g1, g2 = 1.0, -2.0
        adamw_step(params, {"w": np.array([g1])}, state, lr, cfg)
        m = 0.1 * g1
        v = 0.02 * g1 * g1
        w = 1.0 - lr * (m / 0.1) / (math.sqrt(v / 0.02) + 1e-8)
        assert params["w"][0] == pytest.approx(w, abs=1e-7)
        adamw_step(params, {"w": np.array([g2])}, state, lr, cfg)
        m = 0.9 * m + 0.1 * g2
        v = 0.98 * v + 0.02 * g2 * g2
        bc1 = 1 - 0.9 ** 2
        bc2 = 1 - 0.98 ** 2
        w = w - lr * (m / bc1) / (math.sqrt(v / bc2) + 1e-8)
        assert params["w"][0] == pytest.approx(w, abs=1e-7)

    def test_decay_skips_exempt_names(self):
        cfg = OptimConfig(weight_decay=0.5, warmup_steps=1, total_steps=2)
        params = {"layer0.ln1_g": np.array([3.0]), "itm_b": np.array([3.0]),
                  "mask_bias": np.array([3.0]), "itm_w": np.array([3.0])}
        zero = {k: np.zeros(1) for k in params}
        state = init_adam_state(params)
        adamw_step(params, zero, state, 0.1, cfg)
        # Zero grads: only decay moves anything.
        assert params["layer0.ln1_g"][0] == 3.0
        assert params["itm_b"][0] == 3.0
        assert params["mask_bias"][0] == 3.0
        assert params["itm_w"][0] == pytest.approx(3.0 * (1 - 0.1 * 0.5))

    def test_zero_grad_zero_decay_is_identity(self):
        cfg = OptimConfig(weight_decay=0.0, warmup_steps=1, total_steps=2)
        params = {"w": np.array([1.5, -2.5])}
        state = init_adam_state(params)
        adamw_step(params, {"w": np.zeros(2)}, state, 0.1, cfg)
        np.testing.assert_array_equal(params["w"], [1.5, -2.5])

    def test_clip_gradients(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        norm = clip_gradients(grads, 1.0)
        assert norm == pytest.approx(5.0)
        assert math.sqrt(sum(float((g * g).sum()) for g in grads.values())) == \
            pytest.approx(1.0)
        # Under the limit: untouched.
        grads = {"a": np.array([0.3])}
        clip_gradients(grads, 1.0)
        assert grads["a"][0] == 0.3


class TestSelectCheckpoint:
    def test_argmin(self):
        assert select_checkpoint([3.0, 2.0, 2.5]) == 1

    def test_earliest_tie(self):
        assert select_checkpoint([2.0, 1.5, 1.5, 3.0]) == 1

    def test_single(self):
        assert select_checkpoint([7.0]) == 0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            select_checkpoint([])

    def test_matches_numpy_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            losses = rng.integers(0, 5, size=rng.integers(1, 12)).astype(float)
            assert select_checkpoint(losses) == int(np.argmin(losses))


@pytest.fixture(scope="module")
def micro_world():
    index, _ = generate_catalog(SynthConfig(
        n_meta=2, n_leaf=4, n_index_products=60, n_queries=3, image_side=32,
        seed=0))
    train, valid = index[:48], index[48:]
    vocab = train_bpe([r.title for r in train], 300)
    mcfg = ModelConfig(vocab_size=vocab.size, layers=2, hidden_dim=32, heads=2,
                       ffn_dim=64, max_title_len=16, image_side=32,
                       patch_size=16, dropout=0.0)
    return train, valid, vocab, mcfg


def _micro_optim(**kw):
    base = dict(peak_lr=1e-3, warmup_steps=5, total_steps=30, batch_size=8,
                eval_every=10, log_every=5)
    base.update(kw)
    return OptimConfig(**base)


class TestPretrainLoop:
    def test_end_to_end_artifacts(self, micro_world, tmp_path):
        train, valid, vocab, mcfg = micro_world
        out = tmp_path / "run"
        path = pretrain(train, valid, vocab, mcfg, _micro_optim(), 0, out)
        params, cfg2, extra = load_checkpoint(path)
        assert cfg2 == mcfg
        assert extra["step"] in {10, 20, 30}
        assert "valid_total" in extra

        train_rows = [json.loads(l) for l in open(out / "train_log.jsonl")]
        assert [r["step"] for r in train_rows] == [1, 5, 10, 15, 20, 25, 30]
        want_keys = {"step", "lr", "itm", "mlm", "gmlm", "mim", "gmim", "total",
                     "masked_tokens", "masked_patches"}
        assert want_keys <= set(train_rows[0])
        valid_rows = [json.loads(l) for l in open(out / "valid_log.jsonl")]
        assert [r["step"] for r in valid_rows] == [10, 20, 30]
        assert all("itm_acc" in r for r in valid_rows)

    def test_best_checkpoint_is_argmin_of_valid_log(self, micro_world, tmp_path):
        train, valid, vocab, mcfg = micro_world
        out = tmp_path / "run"
        path = pretrain(train, valid, vocab, mcfg, _micro_optim(), 1, out)
        _, _, extra = load_checkpoint(path)
        rows = [json.loads(l) for l in open(out / "valid_log.jsonl")]
        best = select_checkpoint([r["total"] for r in rows])
        assert extra["step"] == rows[best]["step"]
        assert extra["valid_total"] == pytest.approx(rows[best]["total"])

    def test_bitwise_determinism(self, micro_world, tmp_path):
        train, valid, vocab, mcfg = micro_world
        p1 = pretrain(train, valid, vocab, mcfg, _micro_optim(), 7, tmp_path / "a")
        p2 = pretrain(train, valid, vocab, mcfg, _micro_optim(), 7, tmp_path / "b")
        a, _, ea = load_checkpoint(p1)
        b, _, eb = load_checkpoint(p2)
        assert ea == eb
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])
        assert (tmp_path / "a" / "train_log.jsonl").read_bytes() == \
            (tmp_path / "b" / "train_log.jsonl").read_bytes()

    def test_seed_changes_training(self, micro_world, tmp_path):
        train, valid, vocab, mcfg = micro_world
        p1 = pretrain(train, valid, vocab, mcfg, _micro_optim(), 0, tmp_path / "a")
        p2 = pretrain(train, valid, vocab, mcfg, _micro_optim(), 1, tmp_path / "b")
        a, _, _ = load_checkpoint(p1)
        b, _, _ = load_checkpoint(p2)
        assert any(not np.array_equal(a[k], b[k]) for k in a)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_guard(self, micro_world, tmp_path):
        train, valid, vocab, mcfg = micro_world
        bad = _micro_optim(peak_lr=1e30)  # absurd lr overflows float32
        with pytest.raises(RuntimeError, match="diverged"):
            pretrain(train, valid, vocab, mcfg, bad, 0, tmp_path / "run")

    def test_no_partial_files_left(self, micro_world, tmp_path):
        train, valid, vocab, mcfg = micro_world
        out = tmp_path / "run"
        pretrain(train, valid, vocab, mcfg, _micro_optim(), 0, out)
        assert list(out.glob("*.partial")) == []


class TestFinetune:
    def test_linear_head_learns_separable_labels(self, micro_world, tmp_path):
        from prodembed.trainer import classifier_accuracy, finetune_classifier

        train, valid, vocab, mcfg = micro_world
        params = init_params(mcfg, 0)
        ft = FinetuneConfig(lr=3e-3, batch_size=16, max_epochs=4)
        best, best_epoch, history = finetune_classifier(
            params, mcfg, train, valid, vocab, 4, ft, 0)
        assert len(history) == 4
        assert 1 <= best_epoch <= 4
        assert history[best_epoch - 1] == max(history)
        # Even from a random encoder a few epochs beat the 1/4 class prior.
        acc = classifier_accuracy(best, mcfg, valid, vocab, k=1)
        assert acc >= 0.25
        assert "cls_w" in best and best["cls_w"].shape == (32, 4)

    def test_earliest_best_epoch_on_ties(self, micro_world):
        from prodembed.trainer import finetune_classifier

        train, valid, vocab, mcfg = micro_world
        params = init_params(mcfg, 0)
        # Zero lr: accuracy identical every epoch, so the earliest wins.
        ft = FinetuneConfig(lr=1e-30, batch_size=16, max_epochs=3)
        _, best_epoch, history = finetune_classifier(
            params, mcfg, train, valid, vocab, 4, ft, 0)
        assert best_epoch == 1
        assert len(set(history)) == 1
