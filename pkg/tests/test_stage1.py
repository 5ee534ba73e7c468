import math

import pytest
import torch

from latentface import renderer
from latentface.data import read_csv
from latentface.errors import InvalidInputError, NumericalAbort
from latentface.nets import FeatureExtractor
from latentface.stage1 import (LOSS_COLUMNS, Stage1Config, build_model, conf_loss, forward_autoencode, psnr,
                               reconstruction_loss, train_stage1)

F64 = torch.float64


def _maps(seed, shape=(2, 3, 5, 5)):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=g, dtype=F64), torch.rand(shape, generator=g, dtype=F64)


def test_conf_loss_unit_scale_closed_form():
    pred, target = _maps(0)
    sigma = torch.full((2, 1, 5, 5), 1 / math.sqrt(2), dtype=F64)
    mask = torch.rand(2, 5, 5, generator=torch.Generator().manual_seed(1)) < 0.6
    loss = conf_loss(pred, target, sigma, mask)
    d = (pred - target).abs()
    m = mask[:, None].expand_as(d)
    per_sample = [2.0 * d[b][m[b]].sum() / m[b].sum() for b in range(2)]
    assert float(loss) == pytest.approx(float(sum(per_sample) / 2), rel=1e-12)


def test_conf_loss_perfect_reconstruction():
    pred, _ = _maps(2)
    loss = conf_loss(pred, pred, torch.full((2, 1, 5, 5), 0.3, dtype=F64))
    assert float(loss) == pytest.approx(math.log(math.sqrt(2) * 0.3), abs=1e-12)


@pytest.mark.parametrize("d", [0.05, 0.2, 0.7])
def test_conf_loss_optimal_sigma_grid_search(d):
    pred = torch.full((1, 1, 1, 1), d, dtype=F64)
    target = torch.zeros_like(pred)
    grid = torch.linspace(1e-3, 2.0, 200001, dtype=F64)
    values = torch.log(math.sqrt(2) * grid) + math.sqrt(2) * d / grid
    best = float(grid[values.argmin()])
    assert best == pytest.approx(math.sqrt(2) * d, abs=1e-4)
    # the implemented loss agrees with the scalar objective at the optimum
    at_best = conf_loss(pred, target, torch.full_like(pred, best))
    assert float(at_best) == pytest.approx(float(values.min()), abs=1e-12)


def test_conf_loss_errors():
    pred, target = _maps(3)
    with pytest.raises(InvalidInputError):
        conf_loss(pred, target, torch.zeros(2, 1, 5, 5, dtype=F64))
    with pytest.raises(InvalidInputError):
        conf_loss(pred, target, torch.ones(2, 1, 5, 5, dtype=F64), torch.zeros(2, 5, 5, dtype=torch.bool))
    with pytest.raises(InvalidInputError):
        conf_loss(pred, target[:, :2], torch.ones(2, 1, 5, 5, dtype=F64))


def test_config_validation():
    with pytest.raises(InvalidInputError):
        Stage1Config(lambda_f=-1)
    with pytest.raises(InvalidInputError):
        Stage1Config(batch_size=0)
    cfg = Stage1Config()
    assert (cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.lambda_f, cfg.lambda_flip) == (30, 16, 1e-4, 1.0, 0.5)


@pytest.fixture(scope="module")
def small():
    cfg = Stage1Config(width=4, conf_width=2, seed=0)
    model = build_model(cfg)
    images = torch.rand(3, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    return cfg, model, images


def test_loss_report_linear_combination(small):
    cfg, model, images = small
    cfg = Stage1Config(width=4, conf_width=2, lambda_f=0.7, lambda_flip=0.3)
    out = forward_autoencode(images, model, cfg)
    r = reconstruction_loss(images, out.recon, out.recon_flip, out.sigma_p, out.sigma_f, cfg, FeatureExtractor())
    expect = r.lp + 0.7 * r.lf + 0.3 * (r.lp_flip + 0.7 * r.lf_flip)
    assert float(r.total.detach()) == pytest.approx(float(expect.detach()), rel=1e-6)
    assert all(math.isfinite(v) for v in r.as_floats().values())


def test_no_flip_weight(small):
    _, model, images = small
    cfg = Stage1Config(width=4, conf_width=2, lambda_flip=0.0)
    out = forward_autoencode(images, model, cfg)
    r = reconstruction_loss(images, out.recon, out.recon_flip, out.sigma_p, out.sigma_f, cfg, FeatureExtractor())
    assert float(r.total.detach()) == pytest.approx(float((r.lp + r.lf).detach()), rel=1e-6)


def test_flip_render_shares_pose_and_light(small):
    cfg, model, images = small
    with torch.no_grad():
        out = forward_autoencode(images, model, cfg)
        again = renderer.render_flipped(out.albedo, out.depth, out.latents.pose, out.latents.light)
    assert torch.equal(again.image, out.recon_flip.image)


@pytest.mark.parametrize("flag", ["pose", "light", "shape", "texture"])
def test_ablation_flags(small, flag):
    _, model, images = small
    cfg = Stage1Config(width=4, conf_width=2, **{f"disable_{flag}": True})
    with torch.no_grad():
        out = forward_autoencode(images, model, cfg)
        full = forward_autoencode(images, model, Stage1Config(width=4, conf_width=2))
    lat = out.latents
    if flag == "pose":
        assert torch.equal(lat.pose, torch.zeros(3, 6))
    else:
        assert torch.equal(lat.pose, full.latents.pose)
    if flag == "light":
        assert torch.equal(lat.light, renderer.NEUTRAL_LIGHT.as_tensor().expand(3, 4))
    else:
        assert torch.equal(lat.light, full.latents.light)
    if flag == "shape":
        assert torch.equal(out.depth, torch.ones(3, 64, 64))
    else:
        assert torch.equal(out.depth, full.depth)
    if flag == "texture":
        assert torch.equal(out.albedo, torch.full((3, 3, 64, 64), 0.5))
    else:
        assert torch.equal(out.albedo, full.albedo)


def test_psnr_known_value():
    target = torch.zeros(1, 3, 4, 4)
    pred = torch.full_like(target, 0.1)
    assert float(psnr(pred, target)[0]) == pytest.approx(20.0, abs=1e-4)


def test_training_deterministic_and_logged(tmp_path):
    images = torch.rand(6, 3, 64, 64, generator=torch.Generator().manual_seed(4))
    cfg = Stage1Config(epochs=2, batch_size=4, width=2, conf_width=2, seed=1)
    a = train_stage1(images, cfg, tmp_path / "a")
    b = train_stage1(images, cfg, tmp_path / "b")
    assert a.epoch_means == b.epoch_means
    assert (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()
    rows = read_csv(tmp_path / "a" / "loss.csv")
    assert tuple(rows[0]) == LOSS_COLUMNS and len(rows) == 4
    assert (tmp_path / "a" / "best.ckpt").exists()


def test_feature_extractor_untouched_by_training():
    before = [p.clone() for p in FeatureExtractor().parameters()]
    images = torch.rand(4, 3, 64, 64, generator=torch.Generator().manual_seed(5))
    train_stage1(images, Stage1Config(epochs=1, batch_size=4, width=2, conf_width=2))
    assert all(torch.equal(a, b) for a, b in zip(before, FeatureExtractor().parameters()))


def test_nan_loss_aborts_with_diagnostic(monkeypatch):
    monkeypatch.setattr(FeatureExtractor, "forward", lambda self, x: torch.full((x.shape[0], 4, 16, 16), float("nan")))
    images = torch.rand(4, 3, 64, 64)
    with pytest.raises(NumericalAbort) as info:
        train_stage1(images, Stage1Config(epochs=1, batch_size=4, width=2, conf_width=2))
    assert info.value.step == 0 and info.value.term == "lf" and info.value.exit_code == 3


def test_nan_image_rejected():
    images = torch.rand(4, 3, 64, 64)
    images[0, 0, 0, 0] = float("nan")
    with pytest.raises(InvalidInputError):
        train_stage1(images, Stage1Config(epochs=1, batch_size=4, width=2, conf_width=2))


def test_empty_dataset_raises():
    with pytest.raises(InvalidInputError):
        train_stage1(torch.empty(0, 3, 64, 64), Stage1Config(epochs=1))
