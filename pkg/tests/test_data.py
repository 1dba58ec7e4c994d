import numpy as np
import pytest

from vlab import _kernels, data
from vlab.data import CELL, Obj, Scene, answer_from_caption, caption, make_qa, parse_caption, render, scene_facts
from vlab.lm import Tokenizer


def colored(img):
    return np.any(img < 0.999, axis=-1)


def test_render_is_deterministic_and_background_white():
    s = Scene((Obj("red", "circle", 0, 0),))
    a, b = render(s), render(s)
    assert np.array_equal(a, b)
    # bottom-right cell is empty
    assert np.all(a[-CELL:, -CELL:] == 1.0)
    assert colored(a).sum() > 0


@pytest.mark.parametrize("direction", ["left", "right", "up", "down"])
def test_motion_centroid_moves_one_seventh_cell_per_frame(direction):
    s = Scene((Obj("blue", "triangle", 1, 1),), direction)
    dr, dc = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}[direction]
    frames = data.render_frames(s)
    assert frames.shape == (8, 48, 48, 3)
    cents = []
    for f in frames:
        ys, xs = np.nonzero(colored(f))
        cents.append((ys.mean(), xs.mean()))
    step = np.diff(np.array(cents), axis=0)
    np.testing.assert_allclose(step, np.tile([dr * CELL / 7, dc * CELL / 7], (7, 1)), atol=1e-9)


def test_render_backends_agree():
    s = data.make_scene(0, "train", 5)
    old = _kernels.backend
    try:
        _kernels.use_backend("numpy")
        a = render(s)
        _kernels.use_backend("numba")
        b = render(s)
    finally:
        _kernels.use_backend(old)
    assert np.array_equal(a, b)


def test_caption_grammar():
    one = Scene((Obj("red", "circle", 0, 0),))
    assert caption(one) == "a red circle"
    two = Scene((Obj("red", "circle", 0, 0), Obj("blue", "square", 1, 0)))
    assert caption(two) == "a red circle above a blue square"
    moving = Scene((Obj("green", "triangle", 1, 1),), "left")
    assert caption(moving) == "a green triangle moving left"


def test_two_object_captions_have_exactly_one_relation():
    for s in data.dataset(1, "train", 200):
        if len(s.scene.objects) == 2:
            hits = sum(f" {r} " in f" {s.caption} " for r in data.RELATIONS)
            assert hits == 1


def test_caption_parse_round_trip():
    for s in data.dataset(2, "val", 150, video_fraction=0.5):
        assert parse_caption(s.caption) == scene_facts(s.scene)
    assert parse_caption("a purple circle") is None


def test_qa_construction_and_consistency():
    s = Scene((Obj("red", "circle", 0, 0),))
    assert make_qa(s, "color") == ("what color is the circle", "red")
    assert make_qa(s, "count") == ("how many objects", "1")
    for smp in data.dataset(3, "train", 200, video_fraction=0.3):
        assert len(smp.answer.split()) == 1
        assert answer_from_caption(smp.question, parse_caption(smp.caption)) == smp.answer


def test_splits_are_reproducible_and_disjoint():
    a = data.dataset(0, "train", 300)
    assert [s.caption for s in a[:8]] == [s.caption for s in data.dataset(0, "train", 8)]
    val = data.dataset(0, "val", 300)
    assert not {s.scene.key() for s in a} & {s.scene.key() for s in val}
    assert all(s.scene.split() == "val" for s in val)


def test_val_covers_every_color_shape_pair():
    pairs = set()
    for s in data.dataset(0, "val", 256):
        pairs.update((o.color, o.shape) for o in s.scene.objects)
    assert len(pairs) == 12


def test_text_corpus_is_in_vocabulary():
    tok = Tokenizer.default()
    docs = data.text_corpus(0, 300)
    assert len(docs) == 300
    for d in docs:
        tok.encode(d)
    assert docs == data.text_corpus(0, 300)


def test_export_round_trip(tmp_path):
    data.export_split(tmp_path, 0, "val", 5, video_fraction=0.5)
    back = data.load_exported(tmp_path / "val")
    orig = data.dataset(0, "val", 5, video_fraction=0.5)
    assert len(back) == 5
    for rec, s in zip(back, orig):
        assert np.array_equal(rec["pixels"], s.frames)
        assert rec["caption"] == s.caption
        assert rec["qa"] == {"question": s.question, "answer": s.answer}


def test_collate_masks_only_the_caption():
    tok = Tokenizer.default()
    b = data.collate([("Describe the following: <VIS> :", "a red circle"),
                      ("Describe the following: <VIS> :", "a blue square above a red circle")], tok)
    assert b.tokens[0, b.vis_pos] == tok.vis_id
    target = tok.encode("a red circle") + [tok.eos_id]
    assert list(b.tokens[0][b.loss_mask[0] > 0]) == target
    # row 0 is right padded and the padding is unsupervised
    assert b.tokens[0, -1] == tok.pad_id and b.loss_mask[0, -1] == 0
