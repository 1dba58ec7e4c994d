import numpy as np
import pytest

from vlab.nn import Linear
from vlab.quantize import (
    STUDY_ROWS, QuantizedAdapter, QuantizerConfig, gumbel_softmax, quantized_prefix, temperature_at,
)
from vlab.tensor import ContractError, Parameter, Tensor, backward, mul, no_grad, precision, sum_


def test_gumbel_max_frequencies_match_softmax():
    logits = np.array([1.0, 0.0, -0.5, 2.0, 0.3])
    _, idx = gumbel_softmax(np.tile(logits, (100_000, 1)), 1.0, seed=0)
    freq = np.bincount(idx, minlength=5) / 100_000
    p = np.exp(logits) / np.exp(logits).sum()
    assert np.max(np.abs(freq - p)) < 0.01


def test_temperature_schedule():
    cfg = QuantizerConfig()
    assert temperature_at(0, cfg) == 2.0
    assert temperature_at(1000, cfg) == 2.0
    cfg = QuantizerConfig(decay="exponential")
    assert temperature_at(0, cfg) == 2.0
    assert temperature_at(500, cfg) == pytest.approx(1.0)
    assert temperature_at(1000, cfg) == pytest.approx(0.5)


def test_bad_quantizer_configs():
    with pytest.raises(ValueError):
        QuantizerConfig(temperature_init=0).validate()
    with pytest.raises(ValueError):
        QuantizerConfig(decay="linear").validate()
    with pytest.raises(ContractError):
        gumbel_softmax(np.zeros(3), 0.0)


def test_soft_sample_is_a_distribution_and_sharpens_with_temperature():
    logits = np.array([[0.5, 1.5, -1.0]])
    hot, _ = gumbel_softmax(logits, 0.05, seed=1)
    warm, _ = gumbel_softmax(logits, 5.0, seed=1)
    np.testing.assert_allclose(hot.data.sum(-1), 1.0, rtol=1e-6)
    assert hot.data.max() > warm.data.max()


def test_hard_prefix_rows_are_exact_table_rows_and_gradient_flows():
    rng = np.random.default_rng(2)
    with precision(np.float64):
        fc = Linear(6, 9, rng)
        table = rng.standard_normal((9, 5))
        x = Parameter(rng.standard_normal((4, 6)))
        out = quantized_prefix(x, fc, QuantizerConfig(), Tensor(table), step=0, seed=3)
        for row in out.data:
            assert any(np.array_equal(row, t) for t in table)
        backward(sum_(mul(out, Tensor(rng.standard_normal(out.shape)))))
    # straight-through: the soft relaxation carries a gradient back to the inputs
    assert x.grad is not None and np.abs(x.grad).sum() > 0
    assert fc.weight.grad is not None and np.abs(fc.weight.grad).sum() > 0


def test_noise_is_off_under_no_grad():
    class Ident:
        class cfg:
            out_dim = 6

        def __call__(self, v):
            return v

    rng = np.random.default_rng(4)
    table = rng.standard_normal((9, 5)).astype(np.float32)
    qa = QuantizedAdapter(Ident(), 9, lambda: Tensor(table), QuantizerConfig(), rng, seed=5)
    x = Tensor(rng.standard_normal((3, 6)).astype(np.float32))
    with no_grad():
        a = qa(x).data
        qa.step = 17
        b = qa(x).data
    np.testing.assert_array_equal(a, b)
    logits = qa.fc(x).data
    np.testing.assert_array_equal(a, table[logits.argmax(-1)])


def test_study_rows():
    assert STUDY_ROWS[0][1] is None
    assert len(STUDY_ROWS) == 4
