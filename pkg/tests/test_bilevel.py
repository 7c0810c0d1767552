import numpy as np
import pytest

from conftest import make_blobs, tiny_model
from ossl import nn, tensor as T
from ossl.bilevel import (NumericError, SgdConfig, baseline_step, lower_step,
                          should_evaluate, train, upper_step)
from ossl.losses import lower_loss, one_hot, semantic_loss, upper_loss
from ossl.nn import ModelError, params_equal, snapshot_params
from ossl.tensor import Tensor


def rand_batch(n=8, seed=0):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(size=(n, 1, 8, 8)).astype(np.float32))
    y = one_hot(rng.integers(0, 2, size=n), 2)
    return x, y


def straight_line_sgd(model, loss_fn, group_names, l_r):
    """Independent SGD reference: one backward, one update, nothing else."""
    T.reset_tape()
    model.zero_grad()
    T.backward(loss_fn(model))
    for name in group_names:
        for p in model.group(name).params:
            if p.grad is not None:
                p.data = p.data - (p.grad * l_r).astype(p.data.dtype)


class TestSgdConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            SgdConfig(l_r=0.0)
        with pytest.raises(ValueError):
            SgdConfig(mode="adam")
        with pytest.raises(ValueError):
            SgdConfig(lower_variant="xx")


class TestSteps:
    def test_upper_masks_auxiliary(self):
        model = tiny_model(seed=1)
        x, y = rand_batch()
        snap = snapshot_params(model.group("auxiliary_head"))
        upper_step(model, x, y, SgdConfig())
        assert params_equal(model.group("auxiliary_head"), snap)

    def test_lower_masks_semantic_and_rotation(self):
        model = tiny_model(seed=1)
        x, y = rand_batch()
        sc = snapshot_params(model.group("semantic_head"))
        ss = snapshot_params(model.group("rotation_head"))
        lower_step(model, x, y, SgdConfig())
        assert params_equal(model.group("semantic_head"), sc)
        assert params_equal(model.group("rotation_head"), ss)

    def test_upper_changes_its_groups(self):
        model = tiny_model(seed=1)
        x, y = rand_batch()
        snaps = {n: snapshot_params(model.group(n))
                 for n in ("semantic_head", "rotation_head", "backbone")}
        upper_step(model, x, y, SgdConfig())
        for n, snap in snaps.items():
            assert not params_equal(model.group(n), snap)

    def test_tiny_lr_leaves_params_close(self):
        # l_r can't be 0 by config contract; a frozen group shows the masking
        model = tiny_model(seed=1)
        x, y = rand_batch()
        for name in ("semantic_head", "rotation_head", "backbone"):
            model.group(name).frozen = True
        snaps = {n: snapshot_params(model.group(n))
                 for n in ("semantic_head", "rotation_head", "backbone")}
        upper_step(model, x, y, SgdConfig())
        for n, snap in snaps.items():
            assert params_equal(model.group(n), snap)

    def test_upper_matches_straight_line_sgd(self):
        x, y = rand_batch(seed=3)
        a = tiny_model(seed=5)
        b = tiny_model(seed=5)
        upper_step(a, x, y, SgdConfig(l_r=0.05))
        straight_line_sgd(b, lambda m: upper_loss(m, x, y),
                          ("semantic_head", "rotation_head", "backbone"), 0.05)
        for pa, pb in zip(a.all_params(), b.all_params()):
            assert np.max(np.abs(pa.data - pb.data)) < 1e-6

    def test_lower_matches_straight_line_sgd(self):
        x, y = rand_batch(seed=4)
        a = tiny_model(seed=6)
        b = tiny_model(seed=6)
        lower_step(a, x, y, SgdConfig(l_r=0.05))
        straight_line_sgd(b, lambda m: lower_loss(m, x, y),
                          ("auxiliary_head", "backbone"), 0.05)
        for pa, pb in zip(a.all_params(), b.all_params()):
            assert np.max(np.abs(pa.data - pb.data)) < 1e-6

    def test_lower_backbone_update_two_pass_decomposition(self):
        x, y = rand_batch(seed=9)
        model = tiny_model(seed=7)
        ref = tiny_model(seed=7)
        before = snapshot_params(model.group("backbone"))
        lower_step(model, x, y, SgdConfig(l_r=0.05))

        T.reset_tape()
        ref.zero_grad()
        T.backward(semantic_loss(ref, x, y))
        g_ch = [None if p.grad is None else p.grad.copy()
                for p in ref.group("backbone").params]
        T.reset_tape()
        ref.zero_grad()
        from ossl.losses import auxiliary_loss
        T.backward(auxiliary_loss(ref, x, y))
        g_ah = [None if p.grad is None else p.grad.copy()
                for p in ref.group("backbone").params]

        for p, b0, gc, ga in zip(model.group("backbone").params, before,
                                 g_ch, g_ah):
            want = b0 - 0.05 * (gc - ga)
            assert np.max(np.abs(p.data - want)) < 1e-6

    def test_lower_equal_heads_loss_zero_but_step_nonzero(self):
        from conftest import copy_group
        model = tiny_model(seed=2)
        copy_group(model.group("semantic_head"), model.group("auxiliary_head"))
        x, y = rand_batch(seed=1)
        before = snapshot_params(model.group("auxiliary_head"))
        rep = lower_step(model, x, y, SgdConfig())
        assert rep.l_ch - rep.l_ah == 0.0
        assert not params_equal(model.group("auxiliary_head"), before)

    def test_non_finite_abort(self):
        model = tiny_model(seed=1)
        w = model.group("semantic_head").params[0]
        w.data = np.full_like(w.data, np.nan)
        x, y = rand_batch()
        with pytest.raises(NumericError):
            upper_step(model, x, y, SgdConfig())

    def test_baseline_ch_only_touches_semantic_and_backbone(self):
        model = tiny_model(seed=1)
        x, y = rand_batch()
        ss = snapshot_params(model.group("rotation_head"))
        sa = snapshot_params(model.group("auxiliary_head"))
        baseline_step(model, x, y, SgdConfig(mode="baseline_ch"))
        assert params_equal(model.group("rotation_head"), ss)
        assert params_equal(model.group("auxiliary_head"), sa)


class TestEvalSchedule:
    def test_final_version_schedule(self):
        evals = [p for p in range(1, 101) if should_evaluate(p, 100)]
        assert evals == [50, 60, 70, 80, 90, 100]

    def test_final_epoch_always_evaluated(self):
        assert should_evaluate(30, 30)
        assert not should_evaluate(30, 31)


class TestTrain:
    def test_zero_epochs(self, tmp_path):
        model = tiny_model()
        blobs = make_blobs(n_per_class=8)
        ckpt = tmp_path / "ck.ossl"
        record = train(model, blobs, {}, SgdConfig(n_epoch=0),
                       checkpoint_path=ckpt)
        assert record.epochs == []
        assert ckpt.exists()
        loaded = nn.load_checkpoint(ckpt)
        for pa, pb in zip(model.all_params(), loaded.all_params()):
            assert pa.data.tobytes() == pb.data.tobytes()

    def test_baseline_ch_learns_separable_blobs(self):
        model = tiny_model(seed=0)
        blobs = make_blobs(n_per_class=32)
        cfg = SgdConfig(l_r=0.05, batch_size=16, n_epoch=30,
                        mode="baseline_ch")
        record = train(model, blobs, {}, cfg)
        assert record.epochs[-1].train_acc >= 0.99

    def test_baseline_ch_never_touches_other_heads(self):
        model = tiny_model(seed=0)
        ss = snapshot_params(model.group("rotation_head"))
        sa = snapshot_params(model.group("auxiliary_head"))
        blobs = make_blobs(n_per_class=16)
        train(model, blobs, {}, SgdConfig(batch_size=16, n_epoch=5,
                                          mode="baseline_ch"))
        assert params_equal(model.group("rotation_head"), ss)
        assert params_equal(model.group("auxiliary_head"), sa)

    def test_ossl_records_all_losses(self):
        model = tiny_model(seed=0)
        blobs = make_blobs(n_per_class=8)
        record = train(model, blobs, {}, SgdConfig(batch_size=8, n_epoch=2))
        ep = record.epochs[0]
        assert ep.l_ch is not None and ep.l_rh is not None and ep.l_ah is not None

    def test_baseline_ch_leaves_undefined_losses_none(self):
        model = tiny_model(seed=0)
        blobs = make_blobs(n_per_class=8)
        record = train(model, blobs, {}, SgdConfig(batch_size=8, n_epoch=1,
                                                   mode="baseline_ch"))
        assert record.epochs[0].l_rh is None
        assert record.epochs[0].l_ah is None

    def test_determinism(self):
        blobs = make_blobs(n_per_class=16)
        ood = make_blobs(n_per_class=8, seed=5, shift=0.2, role="ood_test")
        cfg = SgdConfig(batch_size=16, n_epoch=3, shuffle_seed=11)
        records = []
        for _ in range(2):
            model = tiny_model(seed=21)
            records.append(train(model, blobs, {"ood": ood}, cfg))
        assert records[0].epochs[-1].l_ch == records[1].epochs[-1].l_ch
        assert records[0].epochs[-1].train_acc == records[1].epochs[-1].train_acc
        assert records[0].epochs[-1].test_acc == records[1].epochs[-1].test_acc

    def test_dataset_model_mismatch(self):
        model = tiny_model()
        bad = make_blobs(n_per_class=4, size=12)
        with pytest.raises(ModelError, match="input spec"):
            train(model, bad, {}, SgdConfig(n_epoch=1))
