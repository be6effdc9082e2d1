import os

import numpy as np
import pandas as pd
import pytest
import torch

import ildm.train
from ildm.codec import ImageVae, IntrinsicVae, VaeConfig
from ildm.denoiser import DenoiserConfig, load_denoiser, parameter_digest
from ildm.errors import ConfigError, NumericError
from ildm.scenegen import SceneDataset, Vocabulary, generate_dataset
from ildm.train import (LOSS_LOG_COLUMNS, TrainConfig, build_optimizer, drop_conditions, filter_flat_normals,
                        joint_loss, loss_log_path, pretrain_base, sample_training_noise, train_joint)
from ildm.xattn import DROP_TAU, GAUSSIAN_ALPHA, GAUSSIAN_SIGMA, GAUSSIAN_TAU, ScheduleKind, default_drop_layers

vae_args = {"latent_channels": 4, "downsample": 4, "width": 8}
denoiser_args = {"latent_channels": 4, "latent_size": 4, "channels": (8, 16), "num_heads": 2, "groups": 4,
                 "time_dim": 16, "cond_dim": 8, "vocab_size": len(Vocabulary()), "caption_len": 24}


@pytest.fixture(scope="module")
def tiny_world(tmp_path_factory):
    """A four-scene dataset, untrained autoencoders and a briefly pretrained base checkpoint"""
    out_dir = str(tmp_path_factory.mktemp("train"))
    dataset = generate_dataset(4, seed=0, resolution=16)
    torch.manual_seed(0)
    image_vae = ImageVae(VaeConfig(kind="image", **vae_args)).eval()
    intrinsic_vae = IntrinsicVae(VaeConfig(kind="intrinsic", **vae_args)).eval()
    base_path = os.path.join(out_dir, "base.ildm")
    pretrain_base(dataset, image_vae, TrainConfig(steps=3, batch_size=2, checkpoint_every=0),
                  DenoiserConfig(**denoiser_args), out=base_path)
    yield {"dataset": dataset, "image_vae": image_vae, "intrinsic_vae": intrinsic_vae, "base_path": base_path,
           "out_dir": out_dir}


def test_train_config():
    config = TrainConfig(lam=2.0, train_schedule="drop", parameterization="v")
    assert config.asdict()["parameterization"] == "v"
    assert config.asdict()["train_schedule"]["kind"] == "drop"
    assert TrainConfig.fromdict(config.asdict()).asdict() == config.asdict()
    for bad in [{"lam": 0.0}, {"lam": -1.0}, {"steps": 0}, {"cond_drop_prob": 1.5}]:
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_train_schedule_names_get_defaults():
    drop = TrainConfig(train_schedule="drop").train_schedule
    assert drop.kind is ScheduleKind.Drop
    assert drop.layers == default_drop_layers(len(DenoiserConfig().channels))
    assert drop.tau == DROP_TAU
    gauss = TrainConfig(train_schedule="gauss").train_schedule
    assert (gauss.alpha, gauss.tau, gauss.sigma) == (GAUSSIAN_ALPHA, GAUSSIAN_TAU, GAUSSIAN_SIGMA)
    assert TrainConfig(train_schedule="full").train_schedule.weight(1, 0.0) == 1.0
    assert TrainConfig(train_schedule="off").train_schedule.weight(1, 0.0) == 0.0
    with pytest.raises(ConfigError):
        TrainConfig(train_schedule="sometimes")


def test_joint_loss():
    pred_x, target_x = torch.ones(2, 3), torch.zeros(2, 3)
    pred_i, target_i = torch.full((2, 3), 2.0), torch.zeros(2, 3)
    loss = joint_loss(pred_x, pred_i, target_x, target_i, lam=4.0)
    assert loss.loss_x.item() == 1.0
    assert loss.loss_i.item() == 4.0
    assert loss.total.item() == 17.0


def test_adamw_step_matches_closed_form():
    """One step on f(p) = 0.5 * |p|^2, so the gradient is p itself"""
    p0 = torch.tensor([0.5, -2.0, 3.0], dtype=torch.float64)
    p = torch.nn.Parameter(p0.clone())
    config = TrainConfig(lr=1e-2, weight_decay=0.01)
    optimiser = build_optimizer([p], config)
    (0.5 * (p ** 2).sum()).backward()
    optimiser.step()
    expected = p0 * (1 - 1e-2 * 0.01) - 1e-2 * p0 / (p0.abs() + 1e-8)
    assert torch.allclose(p.detach(), expected, atol=1e-7)


def test_training_noise_is_independent_across_domains():
    n = 10000
    eps_x, eps_i = sample_training_noise((n,), torch.Generator().manual_seed(0))
    assert not torch.equal(eps_x, eps_i)
    x, i = eps_x.double().numpy(), eps_i.double().numpy()
    # Sample correlation of independent normals has standard error 1 / sqrt(n)
    assert abs(np.corrcoef(x, i)[0, 1]) < 4.0 / np.sqrt(n)
    for e in (x, i):
        assert abs(e.mean()) < 4.0 / np.sqrt(n)
        assert abs(e.var() - 1.0) < 4.0 * np.sqrt(2.0 / n)


def test_drop_conditions():
    g = torch.Generator().manual_seed(0)
    c = torch.randint(2, 20, (8, 5), generator=g)
    assert torch.equal(drop_conditions(c, 0.0, g), c)
    assert torch.all(drop_conditions(c, 1.0, g) == 0)


def test_filter_flat_normals():
    dataset = generate_dataset(2, seed=3, resolution=16)
    flat = SceneDataset(dataset.images.copy(), dataset.captions, dataset.intrinsics.copy(),
                        dataset.depth_scalar, dataset.instance_ids)
    flat.intrinsics[0, ..., 3:6] = 0.5
    with pytest.warns(UserWarning):
        kept, dropped = filter_flat_normals(flat)
    assert dropped == 1
    assert len(kept) == 1


def test_pretrain_base_writes_checkpoint(tiny_world):
    model, schedule, header = load_denoiser(tiny_world["base_path"], kind="base")
    assert header["step"] == 3
    assert schedule.T == 1000
    log = pd.read_csv(loss_log_path(tiny_world["base_path"]))
    assert list(log.columns) == ["step", "loss", "wall_clock"]
    assert len(log) == 3


def test_pretrain_base_is_deterministic(tiny_world):
    config = TrainConfig(steps=2, batch_size=2, checkpoint_every=0)
    args = (tiny_world["dataset"], tiny_world["image_vae"], config, DenoiserConfig(**denoiser_args))
    _, _, a = pretrain_base(*args)
    _, _, b = pretrain_base(*args)
    assert a["loss"].tolist() == b["loss"].tolist()


def test_joint_training_freezes_the_base(tiny_world):
    base, _, _ = load_denoiser(tiny_world["base_path"], kind="base")
    out = os.path.join(tiny_world["out_dir"], "ildm.ildm")
    config = TrainConfig(steps=3, batch_size=2, lora_rank=2, lr=1e-2, checkpoint_every=2)
    model, _, log = train_joint(tiny_world["dataset"], tiny_world["base_path"], tiny_world["image_vae"],
                                tiny_world["intrinsic_vae"], config, out=out)
    assert parameter_digest(model.base_parameters()) == parameter_digest(base.base_parameters())
    assert any(torch.any(p != 0) for name, p in model.named_parameters() if "lora_B" in name)
    assert list(log.columns) == LOSS_LOG_COLUMNS
    assert np.allclose(log["total"], log["L_x"] + 4.0 * log["L_i"], rtol=1e-5)

    loaded, _, header = load_denoiser(out, kind="ildm")
    assert header["step"] == 3
    assert header["base_digest"] == parameter_digest(base.base_parameters())
    assert parameter_digest(loaded.parameters()) == parameter_digest(model.parameters())


def test_joint_training_is_deterministic(tiny_world):
    config = TrainConfig(steps=2, batch_size=2, lora_rank=2)
    args = (tiny_world["dataset"], tiny_world["base_path"], tiny_world["image_vae"], tiny_world["intrinsic_vae"],
            config)
    _, _, a = train_joint(*args)
    _, _, b = train_joint(*args)
    assert a[["L_x", "L_i", "total"]].equals(b[["L_x", "L_i", "total"]])


def test_joint_training_needs_a_base(tiny_world):
    with pytest.raises(ConfigError) as e:
        train_joint(tiny_world["dataset"], None, tiny_world["image_vae"], tiny_world["intrinsic_vae"],
                    TrainConfig(steps=1))
    assert e.value.key == "base"
    images_only = SceneDataset(tiny_world["dataset"].images, tiny_world["dataset"].captions)
    with pytest.raises(ConfigError):
        train_joint(images_only, tiny_world["base_path"], tiny_world["image_vae"], tiny_world["intrinsic_vae"],
                    TrainConfig(steps=1))


def test_non_finite_loss_without_checkpoint(tiny_world, monkeypatch):
    def explode(*args, **kwargs):
        raise NumericError("Non-finite joint loss", key="loss")

    monkeypatch.setattr(ildm.train, "train_step", explode)
    with pytest.raises(NumericError) as e:
        train_joint(tiny_world["dataset"], tiny_world["base_path"], tiny_world["image_vae"],
                    tiny_world["intrinsic_vae"], TrainConfig(steps=2, lora_rank=2))
    assert "at step 0" in e.value.message
    assert "no checkpoint has been written yet" in e.value.message
    assert "last good checkpoint" not in e.value.message


def test_non_finite_base_loss_names_last_checkpoint(tiny_world, monkeypatch):
    real_step = ildm.train.base_step
    calls = []

    def explode_on_third(*args, **kwargs):
        calls.append(1)
        if len(calls) == 3:
            raise NumericError("Non-finite base loss", key="loss")
        return real_step(*args, **kwargs)

    monkeypatch.setattr(ildm.train, "base_step", explode_on_third)
    args = (tiny_world["dataset"], tiny_world["image_vae"])
    out = os.path.join(tiny_world["out_dir"], "exploding_base.ildm")
    with pytest.raises(NumericError) as e:
        pretrain_base(*args, TrainConfig(steps=4, batch_size=2, checkpoint_every=1), DenoiserConfig(**denoiser_args),
                      out=out)
    assert "at step 2" in e.value.message
    assert f"last good checkpoint: {out}" in e.value.message
    _, _, header = load_denoiser(out, kind="base")
    assert header["step"] == 2

    calls.clear()
    other = os.path.join(tiny_world["out_dir"], "never_saved.ildm")
    with pytest.raises(NumericError) as e:
        pretrain_base(*args, TrainConfig(steps=4, batch_size=2, checkpoint_every=0), DenoiserConfig(**denoiser_args),
                      out=other)
    assert "no checkpoint has been written yet" in e.value.message
    assert not os.path.exists(other)
