import numpy as np
import pytest

from spl.errors import DimMismatch, InsufficientMemory
from spl.proto import (
    LossConfig,
    MemoryBank,
    ProjectionHead,
    PrototypeBank,
    focal_cls_loss,
    head_backward,
    inter_loss,
    intra_loss,
    kmeans_init,
    lloyd_kmeans,
    load_checkpoint,
    memory_loss,
    save_checkpoint,
    total_loss,
    update_prototypes,
)


def _bank(rng, C=3, K=4, D=8):
    return PrototypeBank.random(C, K, D, rng)


def test_loss_config_validate():
    LossConfig().validate()
    with pytest.raises(ValueError):
        LossConfig(tau_t=0.0).validate()
    with pytest.raises(ValueError):
        LossConfig(alpha=1.5).validate()
    with pytest.raises(ValueError):
        LossConfig(lambda1=-0.1).validate()


def test_prototype_bank_validate():
    rng = np.random.default_rng(0)
    bank = _bank(rng)
    bank.validate()
    bad = PrototypeBank(2.0 * bank.P)
    with pytest.raises(ValueError):
        bad.validate()


def test_memory_bank_fifo():
    mem = MemoryBank(2, 3, capacity=4)
    assert mem.features(0).shape == (0, 3)
    for i in range(6):
        mem.push(np.array([[float(i), 0.0, 0.0]]), [0])
    assert mem.count(0) == 4
    # oldest entries were evicted
    assert mem.features(0)[:, 0].tolist() == [2.0, 3.0, 4.0, 5.0]
    assert mem.count(1) == 0


def test_memory_loss_single_pair():
    # one positive, one negative: hand-computable InfoNCE
    mem = MemoryBank(2, 2, capacity=10)
    mem.push(np.array([[1.0, 0.0]]), [0])
    mem.push(np.array([[0.0, 1.0]]), [1])
    f = np.array([[1.0, 0.0]])
    rep = memory_loss(f, [0], mem, tau_t=1.0)
    e_pos, e_neg = np.exp(1.0), np.exp(0.0)
    assert rep.value == pytest.approx(-np.log(e_pos / (e_pos + e_neg)))
    assert rep.skipped == []
    # a class with no same-class memory entries is skipped at zero loss
    rep2 = memory_loss(np.array([[0.5, 0.5]]), [1], MemoryBank(2, 2), 1.0)
    assert rep2.value == 0.0 and rep2.skipped == [0]


def test_intra_loss_single_prototype_class():
    # with K=1 the softmax is exact and the loss is zero
    P = np.array([[[1.0, 0.0]]])
    rep = intra_loss(np.array([[0.3, 0.4]]), [0], [0], PrototypeBank(P), 1.0)
    assert rep.value == pytest.approx(0.0)
    assert np.allclose(rep.gradients["features"], 0.0)


def test_intra_loss_pulls_toward_assigned():
    rng = np.random.default_rng(3)
    bank = _bank(rng, C=1, K=3, D=4)
    f = rng.standard_normal((1, 4))
    rep = intra_loss(f, [0], [1], bank, 1.0)
    # moving against the gradient must increase similarity to prototype 1
    step = f - 0.1 * rep.gradients["features"]
    before = f[0] @ bank.P[0, 1]
    after = step[0] @ bank.P[0, 1]
    assert after > before


def test_inter_loss_background_gradients():
    rng = np.random.default_rng(4)
    bank = _bank(rng, C=2, K=2, D=4)
    f = rng.standard_normal((2, 4))
    bg = rng.standard_normal((3, 4))
    rep = inter_loss(f, [0, 1], [0, 1], bg, bank, 1.0)
    assert rep.gradients["features"].shape == (2, 4)
    assert rep.gradients["background"].shape == (3, 4)
    assert rep.value > 0.0
    # no background, single class: still finite
    rep2 = inter_loss(f[:1], [0], [0], np.zeros((0, 4)), bank, 1.0)
    assert np.isfinite(rep2.value)


def test_focal_loss_masking_and_shape():
    rng = np.random.default_rng(5)
    pred = np.clip(rng.random((4, 4, 3)), 0.05, 0.95)
    h_up = np.zeros((4, 4, 3))
    h_up[1, 1, 0] = 1.0
    mask = np.ones((4, 4))
    rep = focal_cls_loss(pred, h_up, mask)
    assert rep.value > 0.0
    assert rep.gradients["pred"].shape == pred.shape
    # masking a cell zeroes its gradient and lowers the loss
    mask2 = mask.copy()
    mask2[0, 0] = 0.0
    rep2 = focal_cls_loss(pred, h_up, mask2)
    assert np.all(rep2.gradients["pred"][0, 0] == 0.0)
    assert rep2.value < rep.value
    with pytest.raises(DimMismatch):
        focal_cls_loss(pred, h_up[:2], mask)


def test_total_loss_weights():
    assert total_loss(1.0, 2.0, 3.0, 4.0, lambda1=0.5, lambda2=1.0) == \
        pytest.approx(1.0 + 2.0 + 1.5 + 4.0)


def test_update_prototypes_blend_and_norm():
    rng = np.random.default_rng(6)
    bank = _bank(rng, C=2, K=2, D=4)
    feats = rng.standard_normal((3, 4))
    out = update_prototypes(bank, feats, [0, 0, 1], [1, 1, 0], alpha=0.9)
    out.validate(tol=1e-12)
    # untouched prototypes unchanged
    assert np.array_equal(out.P[0, 0], bank.P[0, 0])
    assert np.array_equal(out.P[1, 1], bank.P[1, 1])
    # the (0,1) prototype moved toward the mean of its two features
    mean = feats[:2].mean(axis=0)
    blended = 0.9 * bank.P[0, 1] + 0.1 * mean
    assert np.allclose(out.P[0, 1], blended / np.linalg.norm(blended))


def test_lloyd_kmeans_separated_clusters():
    rng = np.random.default_rng(7)
    a = rng.normal((0.0, 0.0), 0.1, (30, 2))
    b = rng.normal((10.0, 0.0), 0.1, (30, 2))
    centers, labels = lloyd_kmeans(np.vstack([a, b]), 2, np.random.default_rng(0))
    assert centers.shape == (2, 2)
    assert len(set(labels[:30])) == 1 and len(set(labels[30:])) == 1
    assert labels[0] != labels[30]
    got = sorted(centers[:, 0].tolist())
    assert abs(got[0] - 0.0) < 0.1 and abs(got[1] - 10.0) < 0.1


def test_kmeans_init_insufficient_memory():
    mem = MemoryBank(2, 3, capacity=10)
    mem.push(np.tile(np.eye(3)[0], (5, 1)), [0] * 5)
    with pytest.raises(InsufficientMemory):
        kmeans_init(mem, 3, np.random.default_rng(0))


def test_head_backward_dim_checks():
    rng = np.random.default_rng(8)
    head = ProjectionHead.init(4, 6, rng)
    raw = rng.standard_normal((2, 2, 4))
    up = rng.standard_normal((2, 2, 6))
    g_w, g_b, g_x = head_backward(raw, head, up)
    assert g_w.shape == (4, 6) and g_b.shape == (6,) and g_x.shape == raw.shape
    with pytest.raises(DimMismatch):
        head_backward(rng.standard_normal((2, 2, 5)), head, up)
    with pytest.raises(DimMismatch):
        head_backward(raw, head, rng.standard_normal((2, 2, 7)))


def test_head_backward_zero_norm_cell():
    head = ProjectionHead(np.eye(3), np.zeros(3))
    raw = np.zeros((1, 1, 3))
    up = np.ones((1, 1, 3))
    g_w, g_b, g_x = head_backward(raw, head, up)
    assert np.all(g_x == 0.0) and np.all(g_w == 0.0) and np.all(g_b == 0.0)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    bank = _bank(rng, C=3, K=2, D=4)
    mem = MemoryBank(3, 4, capacity=50)
    mem.push(rng.standard_normal((5, 4)), [0, 0, 1, 2, 2])
    head = ProjectionHead.init(6, 4, rng)
    cls_w = rng.standard_normal((3, 4))
    cls_b = rng.standard_normal(3)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, bank, mem, head, cls_w, cls_b)
    out = load_checkpoint(path)
    assert np.allclose(out["bank"].P, bank.P, atol=1e-6)
    assert out["memory"].capacity == 50
    for c in range(3):
        assert out["memory"].count(c) == mem.count(c)
        assert np.allclose(out["memory"].features(c), mem.features(c), atol=1e-6)
    assert np.allclose(out["head"].weight, head.weight, atol=1e-6)
    assert np.allclose(out["cls_weight"], cls_w, atol=1e-6)
    assert np.allclose(out["cls_bias"], cls_b, atol=1e-6)
    # a checkpoint without optional pieces loads with Nones
    path2 = tmp_path / "bare.bin"
    save_checkpoint(path2, bank, mem)
    bare = load_checkpoint(path2)
    assert bare["head"] is None and bare["cls_weight"] is None
    (tmp_path / "junk.bin").write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "junk.bin")
