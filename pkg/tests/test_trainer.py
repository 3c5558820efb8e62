import numpy as np
import pytest

from phototransfer.augment import NORMALS, SEGMENTATION, AugmentPolicy, NoValidCropError
from phototransfer.photometry import (Light, LightRig, generate_procedural_material, render_stack, sample_light_rig,
                                      stripes_mask)
from phototransfer.trainer import (AttributeMap, Checkpoint, TrainConfig, batch_rng, default_unet_config, loss_for,
                                   make_variant, sample_batch, train, write_loss_csv)


@pytest.fixture(scope="module")
def woven():
    mat = generate_procedural_material("woven", 64, 64, 0)
    rig = LightRig(sample_light_rig(9, 0).lights + [Light.diffuse()])
    return render_stack(mat, rig), AttributeMap(mat.normals, NORMALS)


def tiny(iterations=6, **kw):
    return TrainConfig(iterations=iterations, batch_size=4, crop=32, **kw)


def test_defaults_match_reference_recipe():
    c = TrainConfig()
    assert (c.iterations, c.batch_size, c.lr, c.crop) == (1000, 16, 0.002, 128)
    assert c.policy == AugmentPolicy()


def test_config_validation_and_round_trip():
    for bad in ({"iterations": 0}, {"batch_size": 0}, {"lr": 0.0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    c = TrainConfig(crop=64, policy=AugmentPolicy(False, (0, 0), (-10, 10), (1, 1)))
    assert c.policy.crop == 64
    assert TrainConfig.from_dict(c.to_dict()) == c


def test_attribute_map_shape_check():
    with pytest.raises(ValueError):
        AttributeMap(np.zeros((1, 8, 8)), NORMALS)
    assert AttributeMap(np.zeros((1, 8, 8)), SEGMENTATION).data.dtype == np.float32


def test_variants(woven):
    stack, _ = woven
    assert len(make_variant(stack, "photometricNet")) == 9
    assert len(make_variant(stack, "diffuseNet")) == 1
    assert len(make_variant(stack, "diphotoNet")) == 10
    red = make_variant(stack, "reduced(3)")
    assert [l.direction for l in red.rig] == [l.direction for l in stack.rig.lights[:3]]
    with pytest.raises(ValueError):
        make_variant(stack, "reduced(12)")
    with pytest.raises(ValueError):
        make_variant(stack, "spotNet")
    with pytest.raises(ValueError):
        make_variant(make_variant(stack, "photometricNet"), "diffuseNet")


def test_loss_and_head_follow_kind():
    assert loss_for(SEGMENTATION).__name__ == "bce_with_logits_loss"
    assert loss_for(NORMALS).__name__ == "l1_loss"
    assert default_unet_config(SEGMENTATION).head == "logits"
    assert default_unet_config(NORMALS).out_channels == 3


def test_batches_are_standardized_and_reproducible(woven):
    stack, attr = woven
    x, y = sample_batch(stack, attr, tiny(), 3)
    assert x.shape == (4, 3, 32, 32) and y.shape == (4, 3, 32, 32)
    np.testing.assert_allclose(x.mean(axis=(2, 3)), 0, atol=1e-5)
    x2, y2 = sample_batch(stack, attr, tiny(), 3)
    np.testing.assert_array_equal(x, x2)
    np.testing.assert_array_equal(y, y2)
    assert not np.array_equal(x, sample_batch(stack, attr, tiny(), 4)[0])
    assert batch_rng(0, 1).random() != batch_rng(1, 1).random()


def test_impossible_crop_is_reported(woven):
    stack, attr = woven
    with pytest.raises(NoValidCropError, match="smaller crop"):
        sample_batch(stack, attr, TrainConfig(iterations=1, batch_size=1, crop=80), 0)


def test_training_reduces_loss_and_is_deterministic(woven, tmp_path):
    stack, attr = woven
    cfg = tiny(40, policy=AugmentPolicy(crop=32))
    unet = default_unet_config(NORMALS, base_channels=4)
    a = train(stack, attr, cfg, unet, "photometricNet")
    assert np.mean(a.loss_curve[-5:]) < np.mean(a.loss_curve[:5])
    b = train(stack, attr, cfg, unet, "photometricNet", workers=3)
    a.save(tmp_path / "a.pxfr")
    b.save(tmp_path / "b.pxfr")
    assert (tmp_path / "a.pxfr").read_bytes() == (tmp_path / "b.pxfr").read_bytes()
    write_loss_csv(tmp_path / "a.csv", a.loss_curve)
    write_loss_csv(tmp_path / "b.csv", b.loss_curve)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "iteration,loss"


def test_checkpoint_round_trip(woven, tmp_path):
    stack, attr = woven
    ckpt = train(stack, attr, tiny(2), default_unet_config(NORMALS, 2), "photometricNet")
    ckpt.save(tmp_path / "c.pxfr")
    back = Checkpoint.load(tmp_path / "c.pxfr")
    assert back.kind == NORMALS and back.train_config == ckpt.train_config
    assert back.variant == "photometricNet" and back.stats["n_directional"] == 9
    assert back.loss_curve == pytest.approx(ckpt.loss_curve)
    x = np.random.default_rng(0).normal(size=(1, 3, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(back.model.predict(x), ckpt.model.predict(x))


def test_segmentation_trains_with_bce():
    mat = generate_procedural_material("stripes", 64, 64, 0)
    stack = render_stack(mat, sample_light_rig(3, 0))
    attr = AttributeMap(stripes_mask(64, 64, 0), SEGMENTATION)
    ckpt = train(stack, attr, tiny(4), default_unet_config(SEGMENTATION, 2))
    assert ckpt.model.config.head == "logits"
    assert np.isfinite(ckpt.loss_curve).all()


def test_training_preconditions(woven):
    stack, attr = woven
    with pytest.raises(ValueError, match="does not match"):
        train(stack, AttributeMap(np.zeros((3, 32, 32)), NORMALS), tiny())
    with pytest.raises(ValueError, match="multiple"):
        train(stack, attr, TrainConfig(iterations=1, crop=40), default_unet_config(NORMALS, 2))
    with pytest.raises(ValueError, match="output channels"):
        train(stack, attr, tiny(), default_unet_config(SEGMENTATION, 2))


def test_diffuse_only_stack_trains(woven):
    stack, attr = woven
    diffuse = make_variant(stack, "diffuseNet")
    ckpt = train(diffuse, attr, tiny(3), default_unet_config(NORMALS, 2), "diffuseNet")
    assert ckpt.stats["n_directional"] == 0 and len(ckpt.loss_curve) == 3


def test_constant_target_is_learned(woven):
    stack, _ = woven
    n = np.array([0.3, -0.2, 0.9])
    n /= np.linalg.norm(n)
    attr = AttributeMap(np.broadcast_to(n[:, None, None], (3, 64, 64)).copy(), NORMALS)
    # rotations and shears would turn the tilted vector, so keep only crops and scale
    policy = AugmentPolicy(True, (0, 0), (0, 0), (0.5, 2), 32)
    ckpt = train(stack, attr, tiny(1000, policy=policy), default_unet_config(NORMALS, 2))
    assert ckpt.loss_curve[-1] < 1e-2
