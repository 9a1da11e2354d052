import numpy as np
import pytest

from hcal import numcore as nc
from hcal.encoder import EncoderConfig, encode, init_encoder
from hcal.errors import ConfigError, ShapeError


def test_seeded_init_is_bit_identical():
    a = init_encoder(EncoderConfig(4, (), 4, seed=1))
    b = init_encoder(EncoderConfig(4, (), 4, seed=1))
    for p, q in zip(a.parameters(), b.parameters()):
        assert np.array_equal(p.data, q.data)


def test_init_bounds_and_zero_bias():
    enc = init_encoder(EncoderConfig(9, (5,), 3, seed=4))
    (w0, b0), (w1, b1) = enc.layers
    assert np.all(np.abs(w0.data) <= 1 / 3) and np.all(np.abs(w1.data) <= 1 / np.sqrt(5))
    assert not b0.data.any() and not b1.data.any()
    assert {p.group for p in enc.parameters()} == {"encoder"}


def test_last_layer_masking():
    enc = init_encoder(EncoderConfig(4, (6, 5), 3, seed=0, trainable="last_layer"))
    trainable = enc.trainable_parameters()
    assert [p.name for p in trainable] == ["encoder.2.weight", "encoder.2.bias"]
    loss = nc.sum(encode(enc, np.ones((2, 4))))
    reached = {p.name for p in nc.backward(loss)}
    assert reached == {"encoder.2.weight", "encoder.2.bias"}


def test_layer_shapes_chain():
    enc = init_encoder(EncoderConfig(4, (8,), 256))
    assert [p.shape for p in enc.parameters()] == [(4, 8), (8,), (8, 256), (256,)]


def test_invalid_config():
    with pytest.raises(ConfigError):
        EncoderConfig(0, (), 4)
    with pytest.raises(ConfigError):
        EncoderConfig(3, (), 0)


def test_zero_weights_give_zero_output():
    enc = init_encoder(EncoderConfig(3, (), 5))
    for p in enc.parameters():
        p.data[...] = 0
    assert not encode(enc, np.ones((4, 3))).data.any()


def test_identity_layer():
    enc = init_encoder(EncoderConfig(3, (), 3))
    enc.layers[0][0].data[...] = np.eye(3)
    x = np.array([[1.0, -2.0, 3.0], [0.5, 0.0, -1.0]])
    assert np.array_equal(encode(enc, x).data, x)


def test_forward_matches_hand_rolled_oracle():
    enc = init_encoder(EncoderConfig(4, (6, 5), 3, seed=2))
    x = np.random.default_rng(9).standard_normal((3, 4))
    expected = []
    for row in x:
        h = list(row)
        for li, (w, b) in enumerate(enc.layers):
            nxt = []
            for j in range(w.shape[1]):
                z = b.data[j] + sum(h[i] * w.data[i, j] for i in range(len(h)))
                nxt.append(max(z, 0.0) if li < len(enc.layers) - 1 else z)
            h = nxt
        expected.append(h)
    np.testing.assert_allclose(encode(enc, x).data, expected, rtol=0, atol=1e-12)


def test_shape_contract_and_purity():
    enc = init_encoder(EncoderConfig(4, (7,), 6, seed=3))
    for B in (1, 2, 33):
        x = np.random.default_rng(B).standard_normal((B, 4))
        out = encode(enc, x)
        assert out.shape == (B, 6)
        assert np.array_equal(out.data, encode(enc, x).data)
    with pytest.raises(ShapeError):
        encode(enc, np.ones((2, 5)))


def test_encoder_gradients_finite_differences():
    enc = init_encoder(EncoderConfig(4, (6,), 3, seed=5))
    for p in enc.parameters():
        p.data += np.random.default_rng(1).normal(0, 0.1, p.shape)
    x = np.random.default_rng(2).standard_normal((5, 4))
    target = np.random.default_rng(3).standard_normal((5, 3))

    def objective():
        r = nc.sub(encode(enc, x), target)
        return nc.sum(nc.mul(r, r))

    assert nc.finite_diff_check(objective, enc.parameters(), 1e-5) < 1e-4
