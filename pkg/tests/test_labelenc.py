import numpy as np
import pytest

from jseg.backbone import extract, init_backbone
from jseg.config import Config
from jseg.errors import ShapeError
from jseg.labelenc import (
    cosine_loss,
    decode_segmentation,
    encode_label,
    init_decoder,
    init_label_encoder,
)
from jseg.tensor import Tape, Tensor


@pytest.fixture
def cfg():
    return Config()


@pytest.fixture
def enc_params(cfg):
    return init_label_encoder(np.random.default_rng(0), cfg)


def test_encode_label_grid_and_nonnegativity(cfg, enc_params):
    rng = np.random.default_rng(1)
    mask = Tensor(rng.random((64, 48, 1)))
    enc_tra, enc_ind, weights = encode_label(mask, enc_params, cfg)
    assert enc_tra.shape == (8, 6, cfg.encoding_channels)
    assert enc_ind.shape == (8, 6, cfg.encoding_channels)
    assert weights.shape == (8, 6, cfg.encoding_channels)
    assert np.all(enc_tra.data >= 0.0)
    assert np.all(enc_ind.data >= 0.0)
    assert np.all(weights.data >= 0.0)


def test_encode_label_zero_mask_zero_biases(cfg, enc_params):
    enc_tra, enc_ind, _ = encode_label(Tensor(np.zeros((32, 32, 1))), enc_params, cfg)
    assert np.all(enc_tra.data == 0.0)
    assert np.all(enc_ind.data == 0.0)


def test_encode_label_shape_errors(cfg, enc_params):
    with pytest.raises(ShapeError):
        encode_label(Tensor(np.zeros((30, 32, 1))), enc_params, cfg)
    with pytest.raises(ShapeError):
        encode_label(Tensor(np.zeros((32, 32, 2))), enc_params, cfg)


def test_single_head_config_shares_encoding():
    cfg = Config(label_heads="single")
    params = init_label_encoder(np.random.default_rng(0), cfg)
    assert "label.head_ind.c1.w" not in params
    enc_tra, enc_ind, _ = encode_label(
        Tensor(np.random.default_rng(1).random((32, 32, 1))), params, cfg
    )
    assert enc_ind is enc_tra


def test_cosine_orthogonal_supports():
    a = np.zeros((2, 2, 16))
    b = np.zeros((2, 2, 16))
    a[:, :, :8] = 1.0
    b[:, :, 8:] = 1.0
    assert cosine_loss(Tensor(a), Tensor(b)).item() == pytest.approx(0.0, abs=1e-12)


def test_cosine_colinear():
    rng = np.random.default_rng(2)
    b = rng.random((3, 3, 4)) + 0.1
    assert cosine_loss(Tensor(3.0 * b), Tensor(b)).item() == pytest.approx(1.0, abs=1e-12)


def test_cosine_against_scalar_oracle_and_properties():
    rng = np.random.default_rng(3)
    a = rng.random((4, 4, 8))
    b = rng.random((4, 4, 8))
    av, bv = a.reshape(-1), b.reshape(-1)
    want = float(av @ bv / (np.linalg.norm(av) * np.linalg.norm(bv)))
    got = cosine_loss(Tensor(a), Tensor(b)).item()
    assert got == pytest.approx(want, abs=1e-12)
    assert 0.0 <= got <= 1.0
    # symmetry and positive-scale invariance
    assert cosine_loss(Tensor(b), Tensor(a)).item() == pytest.approx(got, abs=1e-12)
    assert cosine_loss(Tensor(5.5 * a), Tensor(b)).item() == pytest.approx(got, abs=1e-12)


def test_cosine_zero_vector_convention():
    z = np.zeros((2, 2, 4))
    r = np.random.default_rng(4).random((2, 2, 4))
    assert cosine_loss(Tensor(z), Tensor(r)).item() == 0.0


def _decode_setup(cfg, seed=0, size=32):
    rng = np.random.default_rng(seed)
    backbone = init_backbone(rng, cfg)
    decoder = init_decoder(rng, cfg)
    image = Tensor(rng.random((size, size, 3)))
    feats = extract(image, backbone, cfg)
    g = size // 8
    enc_a = Tensor(rng.standard_normal((g, g, cfg.encoding_channels)))
    enc_b = Tensor(rng.standard_normal((g, g, cfg.encoding_channels)))
    return decoder, feats, enc_a, enc_b


def test_decode_output_resolution_and_symmetry(cfg):
    decoder, feats, enc_a, enc_b = _decode_setup(cfg)
    out_ab = decode_segmentation(enc_a, enc_b, feats, decoder, cfg)
    assert out_ab.shape == (32, 32, 1)
    out_ba = decode_segmentation(enc_b, enc_a, feats, decoder, cfg)
    assert np.array_equal(out_ab.data, out_ba.data)


def test_decode_grid_mismatch(cfg):
    decoder, feats, enc_a, _ = _decode_setup(cfg)
    bad = Tensor(np.zeros((5, 4, cfg.encoding_channels)))
    with pytest.raises(ShapeError):
        decode_segmentation(bad, bad, feats, decoder, cfg)


def test_decoder_parameters_all_reachable(cfg):
    decoder, feats, enc_a, enc_b = _decode_setup(cfg, seed=1)
    with Tape() as tape:
        out = decode_segmentation(enc_a, enc_b, feats, decoder, cfg)
        tape.backward(out.mean())
    for name, p in decoder.items():
        assert p.grad is not None and np.any(p.grad != 0.0), name
        p.zero_grad()


def test_decoder_gradient_fd_spot_check(cfg):
    decoder, feats, enc_a, enc_b = _decode_setup(cfg, seed=2, size=16)

    def value():
        return decode_segmentation(enc_a, enc_b, feats, decoder, cfg).mean().item()

    with Tape() as tape:
        out = decode_segmentation(enc_a, enc_b, feats, decoder, cfg)
        tape.backward(out.mean())

    rng = np.random.default_rng(3)
    h = 1e-5
    for name in ("dec.stage1.w", "dec.proj2.w", "dec.out.b"):
        p = decoder[name]
        flat = p.data.reshape(-1)
        idx = rng.integers(flat.size)
        orig = flat[idx]
        flat[idx] = orig + h
        up = value()
        flat[idx] = orig - h
        down = value()
        flat[idx] = orig
        fd = (up - down) / (2 * h)
        an = p.grad.reshape(-1)[idx]
        assert abs(fd - an) / max(1.0, abs(fd), abs(an)) < 1e-4, name
    for p in decoder.values():
        p.zero_grad()


def test_two_head_gradients_flow_to_both_heads(cfg, enc_params):
    rng = np.random.default_rng(5)
    mask = Tensor(rng.random((32, 32, 1)))
    with Tape() as tape:
        enc_tra, enc_ind, weights = encode_label(mask, enc_params, cfg)
        loss = (enc_tra * enc_tra).sum() + (enc_ind * enc_ind).sum() + (weights * weights).sum()
        tape.backward(loss)
    for head in ("head_tra", "head_ind", "head_w"):
        g = enc_params[f"label.{head}.c1.w"].grad
        assert g is not None and np.any(g != 0.0), head
    for p in enc_params.values():
        p.zero_grad()
