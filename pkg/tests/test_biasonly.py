import math

import numpy as np
import pytest

from dsalab import biasonly as B
from dsalab import tensor as T
from dsalab import vit
from dsalab.tensor import Tensor

TINY = vit.ViTConfig(image_hw=(32, 32), channels=3, patch_size=8, embed_dim=16, num_layers=1,
                     num_heads=2, ffn_hidden=32, head_hidden=16)


def _acts_from_logits(ls, lt):
    return vit.ViTActivations(attn=[], features=None, logits_target=Tensor(lt), logits_sensitive=Tensor(ls))


def test_confident_correct_logits_give_near_zero_loss():
    logits = np.array([[40.0, -40.0], [-40.0, 40.0]])
    acts = _acts_from_logits(logits, logits)
    assert B.loss_sensitive(acts, [0, 1]).item() < 1e-30


def test_uniform_logits_give_ln2():
    acts = _acts_from_logits(np.zeros((5, 2)), np.zeros((5, 2)))
    assert B.loss_sensitive(acts, np.ones(5, int)).item() == pytest.approx(math.log(2), abs=1e-15)


def test_batch_loss_is_mean_of_example_losses(rng):
    logits = rng.normal(size=(6, 2))
    s = rng.integers(0, 2, 6)
    batch = B.loss_sensitive(_acts_from_logits(logits, logits), s).item()
    single = [B.loss_sensitive(_acts_from_logits(logits[i:i + 1], logits[i:i + 1]), s[i:i + 1]).item()
              for i in range(6)]
    assert batch == pytest.approx(np.mean(single), abs=1e-14)


def _ce_logits(target_loss):
    # binary logits whose cross-entropy against label 0 is exactly target_loss
    p = math.exp(-target_loss)
    return np.array([[math.log(p), math.log(1 - p)]])


def test_bias_only_loss_arithmetic():
    acts = _acts_from_logits(_ce_logits(0.2), _ce_logits(0.7))
    lb, ls, lt = B.loss_bias_only(acts, [0], [0])
    assert ls.item() == pytest.approx(0.2, abs=1e-12)
    assert lt.item() == pytest.approx(0.7, abs=1e-12)
    assert lb.item() == pytest.approx(-0.5, abs=1e-12)


def test_ascended_term_is_clamped():
    acts = _acts_from_logits(_ce_logits(0.2), np.array([[-60.0, 60.0]]))
    lb, ls, lt = B.loss_bias_only(acts, [0], [0], clamp=20.0)
    assert lt.item() > 20
    assert lb.item() == pytest.approx(0.2 - 20.0, abs=1e-12)


def _grads(params, loss, names):
    return dict(zip(names, T.grad(loss, [params[n] for n in names])))


def test_head_isolation(micro_cfg, micro_params, rng):
    x = rng.random((4, 3, 8, 8))
    s, y = np.array([0, 1, 1, 0]), np.array([1, 1, 0, 0])
    acts = vit.forward(micro_params, micro_cfg, x)
    head_s = vit.head_param_names(micro_cfg, "head_s")
    head_t = vit.head_param_names(micro_cfg, "head_t")
    lb, ls, lt = B.loss_bias_only(acts, s, y)
    for g in _grads(micro_params, lt, head_s).values():
        assert np.all(g == 0)
    for g in _grads(micro_params, ls, head_t).values():
        assert np.all(g == 0)
    # on the sensitive head L_B and L_S have the same gradient
    g_b = _grads(micro_params, lb, head_s)
    g_s = _grads(micro_params, ls, head_s)
    for n in head_s:
        np.testing.assert_array_equal(g_b[n], g_s[n])


@pytest.mark.parametrize("lam", [0.5, 1.0, 3.0])
def test_grl_flips_and_scales_extractor_gradient(micro_cfg, micro_params, rng, lam):
    x = rng.random((4, 3, 8, 8))
    y = np.array([1, 0, 1, 0])
    shared = [n for n in micro_params if not n.startswith(("head_s.", "head_t."))]
    plain = B.loss_target(vit.forward(micro_params, micro_cfg, x), y)
    g_plain = _grads(micro_params, plain, shared)
    T.reset_tape()
    rev = B.loss_target(vit.forward(micro_params, micro_cfg, x, reverse_target=lam), y)
    g_rev = _grads(micro_params, rev, shared)
    for n in shared:
        np.testing.assert_allclose(g_rev[n], -lam * g_plain[n], rtol=1e-12, atol=1e-15)
    # the head itself is untouched by the reversal
    for n in vit.head_param_names(micro_cfg, "head_t"):
        T.reset_tape()
        a = _grads(micro_params, B.loss_target(vit.forward(micro_params, micro_cfg, x), y), [n])[n]
        T.reset_tape()
        b = _grads(micro_params, B.loss_target(vit.forward(micro_params, micro_cfg, x, lam), y), [n])[n]
        np.testing.assert_allclose(a, b, rtol=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        B.BiasOnlyConfig(reversal_mode="nope")
    with pytest.raises(ValueError):
        B.BiasOnlyConfig(reversal_mode="grl", grl_lambda=0.0)
    with pytest.raises(ValueError):
        B.BiasOnlyConfig(epochs=0)


def test_one_epoch_smoke_emits_one_log_row(small_data):
    tr, _ = small_data
    res = B.train_bias_only(B.BiasOnlyConfig(epochs=1, seed=0), tr, model_cfg=TINY)
    assert len(res.log) == 1
    assert tuple(res.log[0]) == B.LOG_COLUMNS
    assert all(np.isfinite(res.log[0][c]) for c in B.LOG_COLUMNS[1:])


@pytest.mark.parametrize("mode", ["literal", "grl"])
def test_seeded_run_is_bitwise_reproducible(small_data, mode):
    tr, _ = small_data
    cfg = B.BiasOnlyConfig(epochs=2, seed=5, reversal_mode=mode)
    a = B.train_bias_only(cfg, tr, model_cfg=TINY)
    b = B.train_bias_only(cfg, tr, model_cfg=TINY)
    assert a.log == b.log
    for n in a.params:
        assert a.params[n].data.tobytes() == b.params[n].data.tobytes()


def test_empty_dataset_rejected(small_data):
    tr, _ = small_data
    with pytest.raises(ValueError):
        B.train_bias_only(B.BiasOnlyConfig(epochs=1), tr.subset(np.zeros(0, int)), model_cfg=TINY)
