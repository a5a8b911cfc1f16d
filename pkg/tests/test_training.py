import json

import numpy as np
import pytest
import torch

from helpers import tiny_net
from remseg.codec import build_schedule
from remseg.data import NO_AUG
from remseg.errors import ChecksumError, ParameterError, ShapeError, TrainingDivergedError
from remseg.denoiser import temporal_parameters
from remseg.synth import SynthSpec, synth_dataset
from remseg.text import get_text_encoder
from remseg.training import (
    LatentBank,
    Trainer,
    TrainConfig,
    denoising_loss,
    load_checkpoint,
    mask_latent_loss,
    pretrain,
    save_checkpoint,
    stage2_draws,
    train_stage1,
    train_stage2,
)
from remseg.utils import param_checksum, sidecar_path

SMALL = dict(resolution=(32, 32), size_range=(8, 12), speed_range=(1, 1))


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("train_data")
    video = synth_dataset(SynthSpec(n_clips=4, num_frames=8, **SMALL), root / "video", seed=3)
    image = synth_dataset(SynthSpec(n_clips=4, num_frames=1, modality="image", prefix="img", **SMALL),
                          root / "image", seed=4)
    return video, image


def _cfg(**kw):
    base = dict(lr=1e-3, batch_size=2, window=4, epochs=1, max_steps=None, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# -- losses ------------------------------------------------------------------


def test_mask_latent_loss_examples():
    t = torch.randn(2, 8, 4, 16, 16, dtype=torch.float64)
    assert mask_latent_loss(t, t).item() == 0.0
    assert mask_latent_loss(t + 1, t).item() == pytest.approx(1.0, abs=1e-12)


def test_mask_latent_loss_matches_elementwise_sum():
    g = torch.Generator().manual_seed(0)
    a = torch.randn(2, 3, 4, 5, 6, generator=g, dtype=torch.float64)
    b = torch.randn(2, 3, 4, 5, 6, generator=g, dtype=torch.float64)
    total = 0.0
    for x, y in zip(a.flatten().tolist(), b.flatten().tolist()):
        total += (x - y) ** 2
    assert abs(mask_latent_loss(a, b).item() - total / a.numel()) < 1e-12


def test_mask_latent_loss_shape_error():
    with pytest.raises(ShapeError):
        mask_latent_loss(torch.zeros(2, 4), torch.zeros(4, 2))


class _EchoNoise(torch.nn.Module):
    """Recovers eps exactly from z_t given the true z0: an ideal noise predictor."""

    def __init__(self, z0, sched):
        super().__init__()
        self.z0, self.sched = z0, sched

    def forward(self, z_t, e_c, t):
        a = torch.as_tensor(self.sched.sqrt_alpha_bars[t], dtype=z_t.dtype).view(-1, 1, 1, 1, 1)
        s = torch.as_tensor(self.sched.sqrt_one_minus_alpha_bars[t], dtype=z_t.dtype).view(-1, 1, 1, 1, 1)
        return (z_t - a * self.z0) / s


def test_denoising_loss_of_ideal_predictor_is_zero():
    sched = build_schedule()
    z0 = torch.randn(2, 4, 4, 8, 8, dtype=torch.float64)
    eps = torch.randn_like(z0)
    t = torch.tensor([1, 700])
    assert denoising_loss(_EchoNoise(z0, sched), z0, None, t, eps, sched).item() < 1e-20


def test_denoising_loss_at_init_is_noise_variance():
    sched = build_schedule()
    net = tiny_net(dtype=torch.float32, randomize_zero_init=False)
    g = torch.Generator().manual_seed(0)
    z0 = torch.randn(4, 4, 4, 8, 8, generator=g)
    eps = torch.randn(z0.shape, generator=g)
    e = torch.randn(4, 16, 8, generator=g)
    loss = denoising_loss(net, z0, e, torch.tensor([1, 10, 500, 1000]), eps, sched).item()
    assert loss == pytest.approx(float((eps**2).mean()))
    assert abs(loss - 1.0) < 0.1


def test_pretraining_reduces_denoising_loss(tiny_ae, small_data):
    net = tiny_net(dtype=torch.float32, randomize_zero_init=False)
    state = pretrain(net, tiny_ae, small_data[0], _cfg(stage="pretrain", epochs=1000, max_steps=500))
    assert state.step == 500
    first, last = np.mean(state.losses[:25]), np.mean(state.losses[-25:])
    assert last < 0.9 * first


# -- configuration -----------------------------------------------------------


def test_config_always_freezes_codec_and_text():
    cfg = TrainConfig(stage="stage2", frozen=())
    assert {"autoencoder", "text_encoder"} <= set(cfg.frozen)
    assert "temporal" in TrainConfig(stage="stage1").frozen
    assert "temporal" not in cfg.frozen


@pytest.mark.parametrize("kw", [dict(stage="stage3"), dict(lr=-1.0), dict(decoder="mlp"), dict(image_fraction=1.5),
                                dict(batch_size=0)])
def test_config_rejects_bad_values(kw):
    with pytest.raises(ParameterError):
        TrainConfig(**kw)


def test_config_json_round_trip():
    cfg = TrainConfig(stage="stage1", lr=3e-4, size=(32, 32))
    again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    with pytest.raises(ParameterError):
        TrainConfig.from_dict({"stage": "stage2", "learning_rate": 1.0})


# -- stages ------------------------------------------------------------------


def test_lr_zero_leaves_parameters_bit_identical(tiny_ae, small_data):
    net = tiny_net(dtype=torch.float32)
    before = param_checksum(net)
    train_stage2(net, tiny_ae, small_data[0], small_data[1], _cfg(lr=0.0, max_steps=3))
    assert param_checksum(net) == before


def test_stage1_freezes_temporal_and_codec(tiny_ae, small_data):
    net = tiny_net(dtype=torch.float32)
    temporal_before = param_checksum(temporal_parameters(net))
    ae_before, text_before = param_checksum(tiny_ae), param_checksum(get_text_encoder(8, 0))
    total_before = param_checksum(net)
    state = train_stage1(net, tiny_ae, small_data[1], _cfg(stage="stage1", epochs=20))
    assert state.step == 40
    assert param_checksum(temporal_parameters(net)) == temporal_before
    assert param_checksum(net) != total_before
    assert param_checksum(tiny_ae) == ae_before
    assert param_checksum(get_text_encoder(8, 0)) == text_before
    assert np.mean(state.losses[-5:]) < np.mean(state.losses[:5])


def test_stage1_needs_image_manifest(tiny_ae, small_data):
    with pytest.raises(ParameterError):
        train_stage1(tiny_net(dtype=torch.float32), tiny_ae, small_data[0], _cfg(stage="stage1"))


def test_stage2_trains_everything(tiny_ae, small_data):
    net = tiny_net(dtype=torch.float32)
    temporal_before = param_checksum(temporal_parameters(net))
    ae_before = param_checksum(tiny_ae)
    train_stage2(net, tiny_ae, small_data[0], small_data[1], _cfg(max_steps=5))
    assert param_checksum(temporal_parameters(net)) != temporal_before
    assert param_checksum(tiny_ae) == ae_before


def test_unfrozen_autoencoder_rejected(small_data):
    from remseg.codec import Autoencoder

    with pytest.raises(ParameterError):
        Trainer(tiny_net(dtype=torch.float32), Autoencoder(4, (8, 8, 8)), _cfg())


@pytest.mark.parametrize("fraction", [0.5, 0.25])
def test_stage2_mix_ratio(fraction):
    draws = stage2_draws(1000, 1, fraction, n_video=10, n_image=10, seed=0)
    share = sum(kind == "image" for batch in draws for kind, _ in batch) / 1000
    assert abs(share - fraction) <= 0.03


def test_stage2_batches_deterministic(tiny_ae, small_data):
    trainer = Trainer(tiny_net(dtype=torch.float32), tiny_ae, _cfg(),
                      LatentBank(tiny_ae, small_data[0]), LatentBank(tiny_ae, small_data[1]))
    a, b = trainer.batch(7), trainer.batch(7)
    assert [i.sample_id for i in a] == [i.sample_id for i in b]
    assert all(torch.equal(x.z0, y.z0) and torch.equal(x.target, y.target) for x, y in zip(a, b))


def test_same_seed_same_trajectory(tiny_ae, small_data):
    runs = []
    for _ in range(2):
        net = tiny_net(dtype=torch.float32)
        runs.append(train_stage2(net, tiny_ae, small_data[0], small_data[1], _cfg(max_steps=6)).losses)
    assert runs[0] == runs[1]


def test_nan_loss_aborts_with_diagnostics(tiny_ae, small_data):
    net = tiny_net(dtype=torch.float32)
    with torch.no_grad():
        net.conv_in.weight[0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingDivergedError) as info:
        train_stage2(net, tiny_ae, small_data[0], small_data[1], _cfg(max_steps=2))
    err = info.value
    assert err.step == 0 and err.lr == 1e-3 and len(err.batch_ids) == 2


def test_log_records(tiny_ae, small_data, tmp_path):
    log = tmp_path / "train.jsonl"
    train_stage2(tiny_net(dtype=torch.float32), tiny_ae, small_data[0], small_data[1],
                 _cfg(max_steps=3, log_path=str(log)))
    recs = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["step"] for r in recs] == [1, 2, 3]
    assert set(recs[0]) == {"step", "stage", "loss", "lr", "wall_ms"}
    assert recs[-1]["stage"] == "stage2"


# -- checkpoints and resume --------------------------------------------------


def test_checkpoint_round_trip(tiny_ae, small_data, tmp_path):
    net = tiny_net(dtype=torch.float32)
    state = train_stage2(net, tiny_ae, small_data[0], small_data[1], _cfg(max_steps=2))
    path = tmp_path / "net.ckpt"
    meta = save_checkpoint(state, net, path)
    state2, net2, meta2 = load_checkpoint(path)
    assert param_checksum(net2) == param_checksum(net) == meta2["param_checksum"]
    assert meta2["partition"] == meta["partition"]
    assert state2.step == 2 and state2.losses == state.losses
    for k, v in state.optimizer["state"].items():
        for name in ("exp_avg", "exp_avg_sq"):
            assert torch.equal(v[name], state2.optimizer["state"][k][name])


def test_truncated_checkpoint_raises(tmp_path):
    net = tiny_net(dtype=torch.float32)
    path = tmp_path / "net.ckpt"
    save_checkpoint(None, net, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(ChecksumError):
        load_checkpoint(path)
    assert sidecar_path(path).exists()


@pytest.mark.parametrize("stage", ["stage1", "stage2"])
def test_resume_matches_unbroken_run(tiny_ae, small_data, tmp_path, stage):
    video, image = small_data
    cfg = _cfg(stage=stage, epochs=50, max_steps=12, aug=NO_AUG if stage == "stage2" else TrainConfig().aug)

    def run(net, state=None, until=None):
        if stage == "stage1":
            return Trainer(net, tiny_ae, cfg, image=LatentBank(tiny_ae, image)).run(state, until)
        return Trainer(net, tiny_ae, cfg, LatentBank(tiny_ae, video), LatentBank(tiny_ae, image)).run(state, until)

    full = run(tiny_net(dtype=torch.float32))
    half_net = tiny_net(dtype=torch.float32)
    half = run(half_net, until=6)
    path = tmp_path / "mid.ckpt"
    save_checkpoint(half, half_net, path)
    state, net, _ = load_checkpoint(path)
    resumed = run(net, state)
    assert resumed.step == full.step == 12
    assert np.max(np.abs(np.array(resumed.losses) - np.array(full.losses))) <= 1e-6
