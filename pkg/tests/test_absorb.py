import numpy as np
import pytest

import ceat.autodiff as ad
from ceat.absorb import (
    AbsorptionPlan,
    absorb_all,
    absorb_conv,
    absorb_linear,
    absorb_mhsa,
    conv2d,
    expand,
    freeze_backbone,
    lambda_for,
    verify_equivalence,
    zero_pad_kernel,
)
from ceat.autodiff import Tensor
from ceat.losses import classification_loss
from ceat.model import IncrementalViT, ViTConfig

from oracles import conv_loop


@pytest.mark.parametrize("n,lam", [(10, 1.0), (5, 0.5), (3, 0.3)])
def test_lambda_for(n, lam):
    assert lambda_for(n) == lam


def test_lambda_for_rejects_zero():
    with pytest.raises(ValueError):
        lambda_for(0)


def test_absorb_linear_cases():
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(absorb_linear(w, np.eye(2), 0.5), [[1.5, 2.0], [3.0, 4.5]])
    assert np.array_equal(absorb_linear(w, np.zeros((2, 2)), 0.7), w)
    with pytest.raises(ad.ShapeError):
        absorb_linear(w, np.zeros((3, 2)), 0.5)


def test_absorb_linear_equivalence_float32():
    rng = np.random.default_rng(0)
    w = rng.normal(scale=0.2, size=(32, 48)).astype(np.float32)
    b = rng.normal(size=48).astype(np.float32)
    psi = rng.normal(scale=0.2, size=(32, 48)).astype(np.float32)
    x = rng.normal(size=(100, 32)).astype(np.float32)
    fused = absorb_linear(w, psi, 0.3)
    branch = x @ w + b + np.float32(0.3) * (x @ psi)
    assert np.max(np.abs(x @ fused + b - branch)) <= 1e-6 * max(1.0, np.abs(branch).max())


def _model(rng, dim=32, heads=4):
    m = IncrementalViT(ViTConfig(embed_dim=dim, num_heads=heads), rng)
    m.expand_classifier(4, rng)
    return m


def test_absorb_mhsa_block_equivalence_and_qkv_untouched():
    with ad.precision("float64"):
        rng = np.random.default_rng(1)
        m = _model(rng)
        blk = m.blocks[3]
        psi = Tensor(rng.normal(scale=0.1, size=(32, 32)))
        blk.attach("proj", psi)
        qkv_before = blk.params["attn.qkv.weight"].data.copy()
        x = Tensor(rng.normal(size=(100, 17, 32)))
        before = blk.forward(x, 0.4).data
        absorb_mhsa(blk, 0.4)
        assert not blk.exfusion
        after = blk.forward(x, 0.0).data
        assert np.max(np.abs(before - after)) <= 1e-10
        assert np.array_equal(qkv_before, blk.params["attn.qkv.weight"].data)


def test_absorb_mhsa_zero_psi_unchanged_and_errors():
    rng = np.random.default_rng(2)
    m = _model(rng)
    blk = m.blocks[2]
    w0 = blk.params["attn.proj.weight"].data.copy()
    blk.attach("proj", Tensor(np.zeros((32, 32))))
    absorb_mhsa(blk, 0.5)
    assert np.array_equal(w0, blk.params["attn.proj.weight"].data)
    with pytest.raises(ValueError):
        absorb_mhsa(blk, 0.5)
    blk.exfusion["qkv"] = Tensor(np.zeros((32, 96)))
    with pytest.raises(ValueError):
        absorb_mhsa(blk, 0.5)


def test_zero_pad_kernel_center():
    psi = np.full((2, 3, 1, 1), 4.0)
    padded = zero_pad_kernel(psi)
    assert padded.shape == (2, 3, 3, 3)
    assert np.all(padded[:, :, 1, 1] == 4.0)
    padded[:, :, 1, 1] = 0
    assert not padded.any()


def test_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    np.testing.assert_allclose(conv2d(x, w, 1), conv_loop(x, w, 1), atol=1e-12)


def test_absorb_conv_equivalence():
    rng = np.random.default_rng(4)
    w3 = rng.normal(size=(4, 3, 3, 3))
    psi = rng.normal(size=(4, 3, 1, 1))
    assert np.array_equal(absorb_conv(w3, psi, 0.0), w3)
    x = rng.normal(size=(2, 3, 6, 6))
    branch = conv_loop(x, w3, 1) + 0.5 * conv_loop(x, psi, 0)
    fused = conv_loop(x, absorb_conv(w3, psi, 0.5), 1)
    assert np.max(np.abs(branch - fused)) <= 1e-6
    with pytest.raises(ad.ShapeError):
        absorb_conv(w3, rng.normal(size=(4, 2, 1, 1)), 0.5)


def test_freeze_backbone_contract():
    rng = np.random.default_rng(5)
    m = _model(rng, 16, 2)
    with pytest.raises(ValueError):
        freeze_backbone(m, 0)
    freeze_backbone(m, 1)
    expand(m, 1, 2)
    m.expand_classifier(2, rng)
    imgs = rng.uniform(size=(4, 16, 16, 3))
    with ad.Tape() as tape:
        _, logits = m(imgs)
        loss = classification_loss(logits, np.array([4, 5, 4, 5]))
    grads = ad.backward(tape, loss)
    backbone = set(map(id, m.backbone_params().values()))
    assert not any(id(t) in backbone for t in grads)
    heads = [g for t, g in grads.items() if any(t is w for w, _ in m.heads)]
    assert heads and all(np.abs(g).sum() > 0 for g in heads)


def test_zero_expansion_is_bitwise_identity():
    rng = np.random.default_rng(6)
    m = _model(rng, 16, 2)
    bare = m.copy()
    freeze_backbone(m, 1)
    expand(m, 1, 3)
    imgs = rng.uniform(size=(8, 16, 16, 3))
    assert np.array_equal(m(imgs)[1].data, bare(imgs)[1].data)
    assert verify_equivalence(m, bare, imgs) == 0.0
    assert verify_equivalence(bare, bare, imgs) == 0.0


def _trained_like_branches(m, rng, scale=0.05):
    for blk in m.blocks:
        for psi in blk.exfusion.values():
            psi.data = rng.normal(scale=scale, size=psi.shape).astype(psi.dtype)


@pytest.mark.parametrize("prec,tol", [("float32", 1e-5), ("float64", 1e-10)])
def test_absorb_all_end_to_end(prec, tol):
    with ad.precision(prec):
        rng = np.random.default_rng(7)
        m = _model(rng, 64, 4)
        count = m.backbone_param_count()
        freeze_backbone(m, 1)
        plan = expand(m, 1, 2)
        _trained_like_branches(m, rng)
        expanded = m.copy()
        absorb_all(m, plan)
        assert m.backbone_param_count() == count
        assert not m.exfusion_params()
        imgs = rng.uniform(size=(100, 16, 16, 3))
        assert verify_equivalence(expanded, m, imgs) <= tol


def test_absorb_all_empty_plan_and_mismatch():
    rng = np.random.default_rng(8)
    m = _model(rng, 16, 2)
    snap = m.state_arrays()
    absorb_all(m, AbsorptionPlan(1, 0.2))
    for k, v in m.state_arrays().items():
        assert np.array_equal(v, snap[k])
    expand(m, 1, 2)
    with pytest.raises(ValueError):
        absorb_all(m, AbsorptionPlan(1, 0.2))


def test_absorb_then_zero_expand_reproduces_logits():
    rng = np.random.default_rng(9)
    m = _model(rng, 16, 2)
    freeze_backbone(m, 1)
    plan = expand(m, 1, 2)
    _trained_like_branches(m, rng)
    absorb_all(m, plan)
    imgs = rng.uniform(size=(6, 16, 16, 3))
    ref = m(imgs)[1].data.copy()
    expand(m, 2, 2)
    assert np.array_equal(m(imgs)[1].data, ref)


def test_absorbed_model_loss_gradcheck():
    with ad.precision("float64"):
        rng = np.random.default_rng(10)
        m = IncrementalViT(ViTConfig(image_size=8, embed_dim=16, num_heads=2, depth=3, plain_blocks=1), rng)
        m.expand_classifier(3, rng)
        freeze_backbone(m, 1)
        plan = expand(m, 1, 2)
        _trained_like_branches(m, rng, 0.1)
        absorb_all(m, plan)
        from ceat.absorb import unfreeze_backbone

        unfreeze_backbone(m)
        imgs = rng.uniform(size=(2, 8, 8, 3))
        params = [m.blocks[2].params["attn.proj.weight"], m.blocks[2].params["mlp.fc1.weight"], m.heads[0][0]]
        f = lambda: classification_loss(m(imgs)[1], np.array([0, 2]))
        assert ad.finite_diff_check(f, params, max_entries=40) < 1e-4
