import numpy as np
import pytest

from caet_swin.fusion import (AblationHead, CAETSWinModel, FusionHead, ablation_predict, decide, fuse_forward,
                              model_predict)
from caet_swin.plans import FULL, SCALED, FusionPlan
from caet_swin.tensor import ShapeError, Tensor


def test_layer_sizes(rng):
    head = FusionHead(1056, FULL.fusion, rng)
    assert [l.weight.shape for l in head.layers] == [(1056, 512), (512, 128), (128, 32), (32, 2)]


def test_zero_weights_give_uniform_probabilities(rng):
    head = FusionHead(10, FusionPlan(), rng).eval()
    for p in head.parameters():
        p.data[...] = 0
    probs = fuse_forward(rng.standard_normal(4), rng.standard_normal(6), head).data
    assert np.array_equal(probs, np.array([0.5, 0.5], np.float32))
    assert decide(probs) == 0


def test_concat_order_matters(rng):
    head = FusionHead(6, FusionPlan(), rng).eval()
    t, s = rng.standard_normal((3, 2)), rng.standard_normal((3, 4))
    a = fuse_forward(t, s, head).data
    b = head(Tensor(np.concatenate([t, s], 1).astype(np.float32))).data
    assert np.array_equal(a, b)
    assert np.allclose(a.sum(1), 1, atol=1e-6)
    # each row of a batch is classified independently of the others
    perm = np.array([2, 0, 1])
    assert np.allclose(fuse_forward(t[perm], s[perm], head).data, a[perm], atol=1e-7)


def test_mismatched_widths(rng):
    head = FusionHead(6, FusionPlan(), rng)
    with pytest.raises(ShapeError):
        fuse_forward(np.zeros(3), np.zeros(4), head)
    with pytest.raises(ShapeError):
        ablation_predict(np.zeros(5), AblationHead(4, rng))


def test_dropout_only_in_training(rng):
    head = FusionHead(6, FusionPlan(dropout=0.5), rng)
    x = Tensor(rng.standard_normal((8, 6)).astype(np.float32))
    a = head.logits(x, np.random.default_rng(0)).data
    b = head.logits(x, np.random.default_rng(1)).data
    assert not np.array_equal(a, b)
    head.eval()
    assert np.array_equal(head.logits(x).data, head.logits(x).data)


def test_ablation_head_starts_uniform(rng):
    probs = ablation_predict(rng.standard_normal((3, 4)), AblationHead(4, rng)).data
    assert np.allclose(probs, 0.5)


def test_decide_ties_and_batches():
    assert decide(np.array([[0.5, 0.5], [0.2, 0.8], [0.9, 0.1]])).tolist() == [0, 1, 0]


def test_model_predict_is_deterministic(rng):
    m = CAETSWinModel(SCALED, rng).train()
    caet = rng.random((3, 1, 32, 32)).astype(np.float32)
    swin = rng.random((3, 1, 56, 56)).astype(np.float32)
    p1, y1 = model_predict(m, caet, swin)
    p2, y2 = model_predict(m, caet, swin)
    assert np.array_equal(p1, p2) and y1 == y2
    assert p1.shape == (2,) and abs(p1.sum() - 1) <= 1e-6
    assert m.training  # mode restored
    assert y1 == int(p1[1] > p1[0])


def test_assemble_checks_widths(rng):
    m = CAETSWinModel(SCALED, rng)
    with pytest.raises(ShapeError):
        CAETSWinModel.assemble(SCALED, m.cae, m.caet, m.swin, FusionHead(10, SCALED.fusion, rng))
