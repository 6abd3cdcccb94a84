import pytest

from frustumkit.config import (
    ExperimentConfig,
    TrainConfig,
    ablation_config,
    desk_config,
    dump_experiment_config,
    load_experiment_config,
)
from frustumkit.errors import ConfigError


@pytest.mark.parametrize("make", [ExperimentConfig, desk_config, ablation_config])
def test_dump_load_round_trip(make):
    cfg = make()
    assert load_experiment_config(dump_experiment_config(cfg)) == cfg


def test_round_trip_with_overrides():
    cfg = desk_config(
        train={"seed": 9, "base_lr": 3e-4},
        loss={"gamma": 0.0, "residual_mode": "cls_reg", "corner_anchors": "literal"},
        synth={"category_mix": {"Car": 2.0, "Pedestrian": 0.25}, "depth_range": (4.0, 25.0)},
        pipeline={"t_net": False},
    )
    text = dump_experiment_config(cfg)
    assert load_experiment_config(text) == cfg
    assert dump_experiment_config(load_experiment_config(text)) == text


def test_partial_file_layers_on_base():
    cfg = load_experiment_config("[train]\nsteps = 7\n[loss]\ngamma = 0\n")
    assert cfg.train.steps == 7 and cfg.loss.gamma == 0.0
    assert cfg.net == desk_config().net
    abl = load_experiment_config("[train]\nsteps = 7\n", base=ablation_config())
    assert abl.train.iou_threshold == 0.7 and abl.train.steps == 7


@pytest.mark.parametrize(
    "text",
    [
        "[train]\nstepz = 1\n",
        "[trian]\nsteps = 1\n",
        "[train]\nsteps = lots\n",
        "[train]\ntrain_seg = maybe\n",
        "[train]\nbase_lr = -1\n",
        "[loss]\nresidual_mode = other\n",
        "[augment]\nn_mask_points = 128\n",
        "not an ini file",
    ],
)
def test_invalid_files_rejected(text):
    with pytest.raises(ConfigError):
        load_experiment_config(text)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(train_seg=False)
    with pytest.raises(ConfigError):
        TrainConfig(decay_factor=1.5)
    assert TrainConfig().decay_factor == 0.5


def test_desk_and_ablation_settings():
    d = desk_config()
    assert d.augment.n_frustum_points == 512 and d.pipeline.n_mask_points == d.augment.n_mask_points == 256
    assert d.train.steps == 2000 and d.train.train_count == 2000 and d.train.iou_threshold == 0.5
    assert d.loss.lam == 1.0 and d.loss.gamma == 10.0
    a = ablation_config()
    assert a.train.iou_threshold == 0.7 and a.train.mask_source == "oracle" and not a.train.train_seg
    assert a.synth.category_mix == {"Car": 1.0}
    assert a.replace(train={"iou_threshold": 0.7}) == a and a.net == d.net


def test_readme_example_parses():
    import os
    import re

    readme = open(os.path.join(os.path.dirname(__file__), "..", "README.md"), encoding="utf-8").read()
    (block,) = re.findall(r"```ini\n(.*?)```", readme, re.S)
    cfg = load_experiment_config(block)
    assert cfg.train.decay_every == 2000 and cfg.loss.corner_anchors == "with_residuals" and cfg.pipeline.t_net
