import numpy as np
import pytest

from caet_swin.caet import CAETPath, caet_forward, pad_batch, pad_sequence
from caet_swin.gradcheck import check_parameters
from caet_swin.plans import FULL, SCALED, CAETPlan
from caet_swin.tensor import ShapeError, Tensor

SMALL = CAETPlan(d_model=8, heads=2, d_k=4, d_v=4, depth=3, mlp_hidden=8, max_slices=6, out_dim=5)


def test_pad_sequence_layout():
    rows = np.arange(6, dtype=np.float32).reshape(3, 2)
    seq = pad_sequence(rows, max_len=5)
    assert seq.valid_count == 3
    assert seq.mask.tolist() == [True, True, True, False, False]
    assert np.array_equal(seq.features.data[:3], rows) and not seq.features.data[3:].any()
    assert pad_sequence(np.zeros((5, 2)), max_len=5).mask.all()
    for bad in (np.zeros((0, 2)), np.zeros((6, 2))):
        with pytest.raises(ValueError):
            pad_sequence(bad, max_len=5)
    with pytest.raises(ShapeError):
        pad_sequence(np.zeros(3))


def test_pad_batch_matches_pad_sequence(rng):
    seqs = [rng.standard_normal((k, 4)).astype(np.float32) for k in (1, 4, 6)]
    feats, valid = pad_batch(seqs, 6)
    for i, s in enumerate(seqs):
        ps = pad_sequence(s, 6)
        assert np.array_equal(feats[i], ps.features.data) and np.array_equal(valid[i], ps.mask)


@pytest.mark.parametrize("agg", ["GMP", "GAP", "Flatten"])
def test_padding_garbage_is_ignored(rng, agg):
    path = CAETPath(SMALL, rng, agg)
    feats, valid = pad_batch([rng.standard_normal((k, 8)).astype(np.float32) for k in (2, 5)], 6)
    ref = path(feats, valid).data
    for _ in range(5):
        noisy = feats.copy()
        noisy[~valid] = rng.standard_normal((int((~valid).sum()), 8)) * 1e3
        assert np.array_equal(path(noisy, valid).data, ref)


def test_batched_equals_single_sequence_form(rng):
    path = CAETPath(SMALL, rng, "GAP")
    rows = rng.standard_normal((3, 8)).astype(np.float32)
    feats, valid = pad_batch([rows], 6)
    single = caet_forward(pad_sequence(rows, 6), path.pe, path.blocks, path.head).data
    assert np.allclose(path(feats, valid).data[0], single, atol=1e-6)
    assert (single >= 0).all()


def test_full_and_scaled_shapes(rng):
    for plan in (SCALED.caet, FULL.caet):
        path = CAETPath(plan, rng)
        x = rng.standard_normal((2, 25, plan.d_model)).astype(np.float32)
        valid = np.arange(25)[None] < np.array([[3], [25]])
        assert path(x, valid).shape == (2, plan.out_dim)
    full = CAETPath(FULL.caet, rng)
    assert len(full.blocks) == 3
    assert full.blocks[0].msa.head(4).wq.shape == (256, 128)
    with pytest.raises(ShapeError):
        full(np.zeros((1, 24, 256), np.float32), np.ones((1, 24), bool))


def test_caet_forward_requires_three_blocks(rng):
    path = CAETPath(SMALL, rng)
    with pytest.raises(ValueError):
        caet_forward(pad_sequence(np.ones((2, 8)), 6), path.pe, path.blocks[:2], path.head)


def test_path_gradients(rng):
    path = CAETPath(SMALL, rng, "Flatten").astype(np.float64)
    for p in path.parameters():  # break the zero-init of the position table
        p.data += rng.standard_normal(p.shape) * 0.05
    feats, valid = pad_batch([rng.standard_normal((k, 8)) for k in (2, 6)], 6)
    w = Tensor(rng.standard_normal((2, 5)))
    errs = check_parameters(lambda: (path(feats, valid) * w).sum(), path.named_parameters())
    assert max(errs.values()) < 1e-4
