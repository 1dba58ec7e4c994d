import numpy as np
import pytest

from vlab import data
from vlab.lm import (
    LmConfig, Tokenizer, TransformerLM, expanded_targets, greedy_decode, lm_forward, perplexity,
    pretrain_tlm, tlm_as_adapter_forward,
)
from vlab.nn import Linear
from vlab.optim import OptimizerConfig
from vlab.tensor import ContractError, ShapeError, Tensor, no_grad

TOK = Tokenizer.default()


def model(dim=16, seed=0, max_seq_len=32):
    return TransformerLM(LmConfig(len(TOK), dim, 2, 2, max_seq_len), np.random.default_rng(seed))


def test_tokenizer_round_trip_and_errors(tmp_path):
    text = "Question: what color is the circle? Answer in exactly one word: red"
    assert TOK.decode(TOK.encode(text)) == text
    with pytest.raises(KeyError):
        TOK.encode("a purple circle")
    with pytest.raises(ValueError):
        TOK.encode("<VIS>")
    assert TOK.encode("<VIS>", allow_vis=True) == [TOK.vis_id]
    TOK.save(tmp_path / "vocab.txt")
    assert Tokenizer.load(tmp_path / "vocab.txt").itos == TOK.itos
    assert TOK.decode([TOK.bos_id] + TOK.encode("a red circle") + [TOK.eos_id, 5, 6]) == "a red circle"


def test_logits_are_causal():
    m = model()
    ids = np.array([[1, 5, 6, 7, 8, 9]])
    other = ids.copy()
    other[0, 4:] = [10, 11]
    with no_grad():
        a, b = m(ids).data, m(other).data
    assert a.shape == (1, 6, len(TOK))
    np.testing.assert_allclose(a[:, :4], b[:, :4], atol=1e-6)
    assert not np.allclose(a[:, 4:], b[:, 4:])


def test_prefix_splices_at_vis_slot():
    m = model()
    rng = np.random.default_rng(1)
    prefix = Tensor(rng.standard_normal((1, 3, 16)).astype(np.float32))
    ids = np.array([[1, 5, TOK.vis_id, 6, 7]])
    with no_grad():
        spliced = lm_forward(prefix, ids, m, vis_pos=2)
        emb = m.embed(ids, prefix, vis_pos=2)
        prepended = lm_forward(prefix, ids, m)
    assert spliced.shape[1] == 7 and prepended.shape[1] == 8
    pos = m.pos_emb.data[:7]
    np.testing.assert_allclose(emb.data[0, 2:5] - pos[2:5], prefix.data[0], atol=1e-6)
    np.testing.assert_allclose(emb.data[0, 5] - pos[5], m.tok_emb.data[6], atol=1e-6)
    with pytest.raises(ShapeError):
        m.embed(ids, Tensor(np.zeros((1, 3, 8))), vis_pos=2)


def test_expanded_targets_skip_prefix_rows():
    tokens = np.array([[1, 4, 3, 5, 6]])
    mask = np.array([[0, 0, 0, 1, 1]])
    tgt, m = expanded_targets(tokens, mask, prefix_len=3, vis_pos=2)
    assert tgt.shape == (1, 6)
    # logits rows: 1, 4, p0, p1, p2, 5 predict 4, vis, -, -, 5, 6
    assert list(tgt[0]) == [4, 3, 0, 0, 5, 6]
    assert list(m[0]) == [0, 0, 0, 0, 1, 1]


def test_sequence_longer_than_max_is_contract_error():
    m = model(max_seq_len=8)
    with pytest.raises(ContractError):
        m(np.ones((1, 9), dtype=int))


def test_greedy_decode_stops_and_is_deterministic():
    m = model()
    m.head.bias.data[:] = 0
    m.head.bias.data[TOK.eos_id] = 100.0
    out = greedy_decode(None, np.array([[1, 5], [1, 6]]), m, 5, TOK.eos_id)
    assert out == [[], []]
    m.head.bias.data[TOK.eos_id] = 0
    m.head.bias.data[7] = 100.0
    assert greedy_decode(None, np.array([[1, 5]]), m, 4, TOK.eos_id) == [[7, 7, 7, 7]]
    with pytest.raises(ContractError):
        greedy_decode(None, np.array([[1]]), m, 0, TOK.eos_id)


def test_tlm_as_adapter_shapes():
    m = model()
    proj = Linear(16, 24, np.random.default_rng(2))
    with no_grad():
        out = tlm_as_adapter_forward(Tensor(np.zeros((5, 16), dtype=np.float32)), m, proj)
    assert out.shape == (5, 24)
    with pytest.raises(ShapeError):
        tlm_as_adapter_forward(Tensor(np.zeros((5, 12))), m, proj)


def test_language_pretraining_lowers_perplexity():
    docs = data.text_corpus(0, 400)
    held = data.text_corpus(1, 64)
    before = perplexity(model(seed=3), held, TOK)
    trained, losses = pretrain_tlm(docs, LmConfig(len(TOK), 16, 1, 2, 64),
                                   OptimizerConfig(3e-3, 10, 80, batch_size=16), 0, TOK)
    assert losses[-1] < losses[0]
    assert perplexity(trained, held, TOK) < 0.5 * before
