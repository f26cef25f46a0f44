import hashlib

import numpy as np
import pytest

from caet_swin.cae import (CAE, CAETrainConfig, cae_encode, cae_finetune, cae_pretrain, cae_reconstruct,
                           encode_array, encode_volume, reconstruction_mse)
from caet_swin.errors import TrainingDiverged
from caet_swin.plans import FULL, SCALED, CAEPlan
from caet_swin.tensor import ShapeError, Tensor

TINY = CAEPlan(input_side=32, channels=(4, 4, 8, 8, 8), bottleneck=8)


def digests(model):
    return {n: hashlib.sha256(p.data.tobytes()).hexdigest() for n, p in model.named_parameters()}


def test_shapes_scaled_and_full(rng):
    m = CAE(SCALED.cae, rng)
    x = rng.random((3, 1, 32, 32)).astype(np.float32)
    assert m.encoder(Tensor(x)).shape == (3, 32)
    assert m(Tensor(x)).shape == x.shape
    assert FULL.cae.grid == 8 and SCALED.cae.grid == 1


def test_full_encoder_layout(rng):
    m = CAE(FULL.cae, rng)
    kernels = [c.kernel.shape for c in m.encoder.convs]
    assert kernels == [(16, 1, 3, 3), (32, 16, 3, 3), (64, 32, 3, 3), (128, 64, 3, 3), (256, 128, 3, 3)]
    assert m.encoder.fc.weight.shape == (256 * 8 * 8, 256)
    assert m.decoder.convs[-1].kernel.shape == (1, 16, 3, 3)


def test_single_slice_helpers(rng):
    m = CAE(TINY, rng)
    s = rng.random((1, 32, 32)).astype(np.float32)
    assert cae_encode(m.encoder, Tensor(s)).shape == (8,)
    assert cae_reconstruct(m.encoder, m.decoder, s).shape == (1, 32, 32)
    with pytest.raises(ShapeError):
        cae_encode(m.encoder, Tensor(s[None]))
    with pytest.raises(ShapeError):
        m.encoder(Tensor(np.zeros((1, 1, 30, 30), np.float32)))


def test_encode_volume_rows_in_order(rng):
    m = CAE(TINY, rng)
    slices = [rng.random((1, 32, 32)).astype(np.float32) for _ in range(4)]
    z = encode_volume(m.encoder, slices).data
    assert z.shape == (4, 8)
    assert np.allclose(z[2], cae_encode(m.encoder, Tensor(slices[2])).data, atol=1e-6)
    assert np.allclose(encode_array(m.encoder, np.stack(slices), batch_size=3), z, atol=1e-6)
    with pytest.raises(ValueError):
        encode_volume(m.encoder, [])
    with pytest.raises(ValueError):
        encode_volume(m.encoder, slices * 7)


def test_finetune_touches_only_bottleneck_neighbours(rng):
    m = CAE(TINY, rng)
    data = rng.random((20, 1, 32, 32)).astype(np.float32)
    before = digests(m)
    cfg = CAETrainConfig(batch_size=8, lr_finetune=1e-2, epochs_finetune=2)
    cae_finetune(m, data, cfg, seed=0)
    after = digests(m)
    changed = {n for n in before if before[n] != after[n]}
    allowed = {n for n, _ in m.finetune_parameters()}
    assert changed == allowed
    assert {n.rsplit(".", 1)[0] for n in allowed} == {"encoder.fc", "encoder.convs.4", "decoder.fc",
                                                       "decoder.convs.0"}


def test_pretrain_keeps_best_epoch_and_logs(rng):
    m = CAE(TINY, rng)
    data = rng.random((30, 1, 32, 32)).astype(np.float32)
    recs = []
    _, hist = cae_pretrain(m, data, CAETrainConfig(batch_size=16, lr_pretrain=1e-3, epochs_pretrain=3), 0,
                           recs.append)
    assert [r["epoch"] for r in hist] == [0, 1, 2, 3]
    assert all({"epoch", "phase", "loss", "lr", "metric"} <= set(r) for r in recs)
    best = min(r["val_loss"] for r in hist)
    order = np.random.default_rng(0).permutation(30)
    assert reconstruction_mse(m, data[order[:6]]) == pytest.approx(best, rel=1e-5)


def test_zero_epochs_is_identity(rng):
    m = CAE(TINY, rng)
    before = digests(m)
    cae_pretrain(m, rng.random((10, 1, 32, 32)).astype(np.float32), CAETrainConfig(epochs_pretrain=0), 0)
    assert digests(m) == before


def test_divergence_raises(rng):
    m = CAE(TINY, rng)
    data = np.full((4, 1, 32, 32), np.nan, np.float32)
    with pytest.raises(TrainingDiverged) as exc:
        cae_pretrain(m, data, CAETrainConfig(epochs_pretrain=1, val_fraction=0.0), 0)
    assert exc.value.phase == "cae-pretrain"


def test_config_validation():
    with pytest.raises(ValueError):
        CAETrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        CAETrainConfig(epochs_pretrain=-1)
