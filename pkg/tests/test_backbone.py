import numpy as np
import pytest

from jseg.backbone import extract, init_backbone
from jseg.config import Config
from jseg.errors import ShapeError
from jseg.tensor import Tape, Tensor


@pytest.fixture
def cfg():
    return Config()


@pytest.fixture
def params(cfg):
    return init_backbone(np.random.default_rng(0), cfg)


def test_stride_law_and_reduced_width(cfg, params):
    image = Tensor(np.random.default_rng(1).random((64, 64, 3)))
    feats = extract(image, params, cfg)
    sizes = [m.tensor.shape for m in feats.maps]
    assert sizes[0][:2] == (32, 32)
    assert sizes[1][:2] == (16, 16)
    assert sizes[2] == (8, 8, cfg.matching_channels)
    assert sizes[3][:2] == (4, 4)
    assert feats.matching_ind.shape == (8, 8, cfg.matching_channels)
    assert [m.stride for m in feats.maps] == [2, 4, 8, 16]


def test_stride_law_non_square(cfg, params):
    image = Tensor(np.zeros((32, 80, 3)))
    feats = extract(image, params, cfg)
    assert feats.maps[2].tensor.shape[:2] == (4, 10)
    assert feats.maps[3].tensor.shape[:2] == (2, 5)


def test_zero_image_zero_biases_gives_zero_features(cfg, params):
    feats = extract(Tensor(np.zeros((32, 32, 3))), params, cfg)
    for m in feats.maps:
        assert np.all(m.tensor.data == 0.0)
    assert np.all(feats.matching_ind.data == 0.0)


def test_extract_deterministic(cfg, params):
    image = Tensor(np.random.default_rng(2).random((32, 32, 3)))
    a = extract(image, params, cfg)
    b = extract(image, params, cfg)
    for ma, mb in zip(a.maps, b.maps):
        assert np.array_equal(ma.tensor.data, mb.tensor.data)


def test_bad_image_shape_rejected(cfg, params):
    with pytest.raises(ShapeError):
        extract(Tensor(np.zeros((30, 32, 3))), params, cfg)
    with pytest.raises(ShapeError):
        extract(Tensor(np.zeros((32, 32, 1))), params, cfg)


def test_shared_reduction_flag():
    cfg = Config(shared_reduction=True)
    params = init_backbone(np.random.default_rng(0), cfg)
    assert "backbone.reduce_ind.w" not in params
    feats = extract(Tensor(np.random.default_rng(1).random((32, 32, 3))), params, cfg)
    assert feats.matching_ind is feats.maps[2].tensor


def _scalar_loss(feats):
    total = None
    for m in feats.maps:
        term = (m.tensor * m.tensor).sum()
        total = term if total is None else total + term
    return total + (feats.matching_ind * feats.matching_ind).sum()


def test_gradients_reach_every_parameter(cfg, params):
    image = Tensor(np.random.default_rng(3).random((32, 32, 3)) + 0.1)
    with Tape() as tape:
        loss = _scalar_loss(extract(image, params, cfg))
        tape.backward(loss)
    for name, p in params.items():
        assert p.grad is not None, name
        assert np.any(p.grad != 0.0), f"{name} got a zero gradient"


def test_gradient_finite_difference_spot_check(cfg, params):
    image_data = np.random.default_rng(4).random((16, 16, 3))

    def loss_value():
        return _scalar_loss(extract(Tensor(image_data), params, cfg)).item()

    with Tape() as tape:
        loss = _scalar_loss(extract(Tensor(image_data), params, cfg))
        tape.backward(loss)

    rng = np.random.default_rng(5)
    h = 1e-5
    for name in ("backbone.s1.a.w", "backbone.s3.d.w", "backbone.reduce_tra.w"):
        p = params[name]
        flat = p.data.reshape(-1)
        idx = rng.integers(flat.size)
        orig = flat[idx]
        flat[idx] = orig + h
        up = loss_value()
        flat[idx] = orig - h
        down = loss_value()
        flat[idx] = orig
        fd = (up - down) / (2 * h)
        an = p.grad.reshape(-1)[idx]
        assert abs(fd - an) / max(1.0, abs(fd), abs(an)) < 1e-4, name
    for p in params.values():
        p.zero_grad()
