import numpy as np
import pytest

from vlab import data
from vlab.tensor import ContractError, ShapeError
from vlab.vision import (
    VisionEncoder, VitConfig, encode, encode_batch, fit_frames, patch_labels, patchify, pretrain_stub,
)


def test_patchify_order():
    img = np.arange(4 * 4 * 3, dtype=np.float64).reshape(4, 4, 3)
    p = patchify(img, 2).data
    assert p.shape == (4, 12)
    np.testing.assert_array_equal(p[1], img[0:2, 2:4].reshape(-1))
    np.testing.assert_array_equal(p[2], img[2:4, 0:2].reshape(-1))
    with pytest.raises(ShapeError):
        patchify(np.zeros((5, 4, 3)), 2)


def test_config_sizes():
    assert [VitConfig(size_tag=t).dim for t in "SML"] == [64, 96, 128]
    assert VitConfig(patch_size=12).tokens_per_frame == 16
    with pytest.raises(ValueError):
        VitConfig(patch_size=7)
    with pytest.raises(ValueError):
        VitConfig(size_tag="XL")


def test_fit_frames():
    f = np.arange(3)[:, None]
    assert list(fit_frames(f, 5)[:, 0]) == [0, 1, 2, 0, 1]
    assert list(fit_frames(np.arange(8)[:, None], 4)[:, 0]) == [0, 2, 5, 7]
    with pytest.raises(ContractError):
        fit_frames(np.zeros((0, 2)), 3)


def test_encoder_output_and_visual_tokens():
    cfg = VitConfig(patch_size=12, frames=4, pretrain_mode="random")
    enc, meta = pretrain_stub(cfg, 0)
    assert meta["steps"] == 0
    assert all(not p.requires_grad for p in enc.parameters())
    s = data.dataset(0, "val", 2, video_fraction=1.0)[0]
    vt = encode(s.frames, cfg, enc)
    assert vt.tensor.shape == (4 * 16, 64) and vt.frames == 4 and vt.tokens_per_frame == 16
    batch = encode_batch(enc, [x.frames for x in data.dataset(0, "val", 3)], 2)
    assert batch.shape == (3, 2, 16, 64) and batch.dtype == np.float32
    # an image duplicated to two frames gives two identical frames of tokens
    np.testing.assert_array_equal(batch[:, 0], batch[:, 1])
    again, _ = pretrain_stub(cfg, 0)
    np.testing.assert_array_equal(again.pos_emb.data, enc.pos_emb.data)


def test_patch_labels():
    cfg = VitConfig(patch_size=12)
    s = data.Scene((data.Obj("red", "square", 0, 0),))
    labels = patch_labels(s, cfg)
    assert labels.shape == (16,)
    assert labels[0] == 1 + data.COLORS.index("red") * 3 + data.SHAPES.index("square")
    assert labels[-1] == 0


def test_dense_pretraining_moves_weights():
    cfg = VitConfig(patch_size=12, pretrain_steps=3)
    rand = VisionEncoder(cfg, np.random.default_rng([0, 202]))
    enc, meta = pretrain_stub(cfg, 0, batch_size=4)
    assert meta["steps"] == 3 and np.isfinite(meta["final_loss"])
    assert not np.array_equal(rand.patch_embed.weight.data, enc.patch_embed.weight.data)
