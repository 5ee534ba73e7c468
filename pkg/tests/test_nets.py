import math

import pytest
import torch

from latentface import renderer
from latentface.checks import network_grad_suite, pipeline_grad_error
from latentface.errors import InvalidInputError
from latentface.nets import (ConfidenceNet, Decoder, Denoiser, FeatureEncoder, FeatureExtractor, Stage1Arch,
                             Stage1Model, confidence_forward, decode_map, denoise_forward, encode_feature,
                             encode_numeric, init_params, param_count)


@pytest.fixture(scope="module")
def model():
    return init_params(Stage1Model(Stage1Arch()), 0).eval()


@pytest.fixture(scope="module")
def images():
    return torch.rand(2, 3, 64, 64, generator=torch.Generator().manual_seed(0))


def test_init_deterministic_and_seed_dependent():
    a = init_params(FeatureEncoder(4), 1)
    b = init_params(FeatureEncoder(4), 1)
    c = init_params(FeatureEncoder(4), 2)
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    assert not all(torch.equal(x, y) for x, y in zip(a.parameters(), c.parameters()))


def test_init_bounded_by_fan_in():
    enc = init_params(FeatureEncoder(4), 3)
    conv = enc.net[0]
    bound = 1 / math.sqrt(conv.weight[0].numel())
    assert conv.weight.abs().max() <= bound
    assert torch.all(conv.bias == 0)
    assert all(torch.isfinite(p).all() for p in enc.parameters())


def test_feature_encoder_output(model, images):
    z = encode_feature(images, model.tex_enc)
    assert z.shape == (2, 256) and torch.isfinite(z).all()
    assert torch.equal(encode_feature(images[0], model.tex_enc), z[0]) or torch.allclose(
        encode_feature(images[0], model.tex_enc), z[0], atol=1e-6)
    assert not any(isinstance(m, torch.nn.Linear) for m in model.tex_enc.modules())


def test_encoder_rejects_wrong_channels(model):
    with pytest.raises(ValueError):
        encode_feature(torch.rand(1, 1, 64, 64), model.tex_enc)


def test_numeric_heads(model, images):
    raw, pose = encode_numeric(images, model.pose_enc, "pose")
    assert raw.shape == (2, 6) and (raw.abs() < 1).all()
    assert (pose.abs() <= torch.tensor(renderer.POSE_SCALE)).all()
    raw, light = encode_numeric(images, model.light_enc, "light")
    assert raw.shape == (2, 4)
    assert ((light[:, :2] >= 0) & (light[:, :2] <= 1)).all()


def test_decode_ranges(model):
    z = torch.randn(2, 256, generator=torch.Generator().manual_seed(1)) * 3
    albedo = decode_map(z, model.tex_dec, "texture")
    depth = decode_map(z, model.shape_dec, "shape")
    assert albedo.shape == (2, 3, 64, 64) and depth.shape == (2, 64, 64)
    assert albedo.min() >= 0 and albedo.max() <= 1
    assert depth.min() >= 0.9 and depth.max() <= 1.1
    assert torch.equal(decode_map(z, model.tex_dec, "texture"), albedo)
    with pytest.raises(ValueError):
        decode_map(torch.full((256,), float("nan")), model.tex_dec, "texture")


def test_confidence_positive_and_feature_size(model, images):
    sp, sf = confidence_forward(images, model.conf)
    feats = FeatureExtractor()(images)
    assert sp.shape == (2, 2, 64, 64)
    assert sf.shape == (2, 2, *feats.shape[-2:])
    assert (sp > 0).all() and (sf > 0).all()


def test_feature_extractor_frozen_and_shift_sensitive(images):
    fx = FeatureExtractor()
    assert not any(p.requires_grad for p in fx.parameters())
    x = images.clone().requires_grad_(True)
    fx(x).sum().backward()
    assert x.grad is not None and x.grad.abs().sum() > 0
    shifted = torch.roll(images, 1, dims=-1)
    assert not torch.allclose(fx(images), fx(shifted))
    assert torch.equal(fx(images), FeatureExtractor()(images))


def test_denoiser_shapes_and_timestep():
    den = init_params(Denoiser(), 0).eval()
    assert den.inp.in_features == 512
    z = torch.randn(3, 256)
    c = torch.randn(3, 256)
    out = denoise_forward(z, torch.tensor([1, 2, 3]), c, den)
    assert out.shape == (3, 256) and torch.isfinite(out).all()
    other = denoise_forward(z, torch.tensor([500, 600, 700]), c, den)
    assert not torch.allclose(out, other)
    assert denoise_forward(z[0], 5, c[0], den).shape == (256,)
    with pytest.raises(InvalidInputError):
        den(z, torch.tensor([0, 1, 1]), c)
    with pytest.raises(InvalidInputError):
        den(z, 1001, c)


def test_param_counts_stable():
    a = Stage1Model(Stage1Arch())
    b = Stage1Model(Stage1Arch())
    assert param_count(a) == param_count(b) > 0
    assert param_count(Decoder(3)) == param_count(Decoder(3))
    assert param_count(ConfidenceNet(8)) > 0


def test_network_gradients_match_finite_differences():
    results, worst = network_grad_suite(seeds=(0,))
    assert all(r.passed for r in results), worst


def test_full_pipeline_gradient():
    assert pipeline_grad_error(0) < 1e-3
