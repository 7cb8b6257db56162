import json

import pytest
import torch

from gantransfer.augment import AugmentPolicy
from gantransfer.backbone import NetworkConfig, init_target_from_source, new_snapshot, parameter_hash
from gantransfer.inversion import InversionSchedule, frozen_random_extractor, precompute_transforms
from gantransfer.losses import LayerMask, LossWeights
from gantransfer.trainer import (
    CachedTransforms,
    RunLog,
    TransferConfig,
    make_state,
    pretrain,
    sample_real_batch,
    train_iteration,
    transfer,
    transfer_step_d,
    transfer_step_g,
)

NET = NetworkConfig(resolution=16, style_dim=16, channel_base=8, channel_max=16, mapping_depth=2)
FULL_AUG = AugmentPolicy.parse("color,translation,cutout")
ZERO = LossWeights(0.0, 0.0, 0.0)


def _data(n, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, 16, 16, generator=g) * 2 - 1


@pytest.fixture(scope="module")
def source():
    snap = new_snapshot(NET, seed=0)
    for p in list(snap.generator.parameters()) + list(snap.discriminator.parameters()):
        p.requires_grad_(False)
    return snap


@pytest.fixture(scope="module")
def target_data():
    return _data(6, 1)


@pytest.fixture(scope="module")
def transforms(source, target_data):
    sched = InversionSchedule(iterations=3, lr_decay_every=1)
    return precompute_transforms(target_data, source, frozen_random_extractor(), sched, use_cache=False)


def _state(source, transforms, **kw):
    cfg = TransferConfig(batch_size=4, **kw)
    return make_state(init_target_from_source(source), cfg, source=source, cache=CachedTransforms.from_samples(transforms))


def _params(snap):
    return [t.clone() for _, t in snap.named_parameters()]


@pytest.mark.parametrize("aug", [AugmentPolicy(), FULL_AUG])
def test_first_d_step_distillation_is_zero(source, transforms, target_data, aug):
    state = _state(source, transforms, augment=aug)
    out = transfer_step_d(state, target_data[:4])
    assert out["loss_d_dis"] == 0.0


def test_step_updates_target_only(source, transforms, target_data):
    h = parameter_hash(source)
    state = _state(source, transforms, augment=FULL_AUG)
    before = parameter_hash(state.target)
    rec = train_iteration(state, target_data)
    assert parameter_hash(source) == h
    assert parameter_hash(state.target) != before
    assert rec.step == 1 and state.target.step == 1
    assert all(p.grad is None for p in source.generator.parameters())


def test_optimizers_do_not_share_state(source, transforms, target_data):
    state = _state(source, transforms)
    train_iteration(state, target_data)
    g_ids = {id(p) for grp in state.opt_g.param_groups for p in grp["params"]}
    d_ids = {id(p) for grp in state.opt_d.param_groups for p in grp["params"]}
    assert not g_ids & d_ids
    buffers_g = {id(v) for s in state.opt_g.state.values() for v in s.values()}
    buffers_d = {id(v) for s in state.opt_d.state.values() for v in s.values()}
    assert not buffers_g & buffers_d
    assert state.opt_g.param_groups[0]["betas"] == (0.0, 0.99)
    assert state.opt_g.param_groups[0]["lr"] == 0.001 and state.opt_d.param_groups[0]["lr"] == 0.002


def test_zero_weights_reduce_to_plain_finetune(source, transforms, target_data):
    """With all lambdas zero the update equals a step with no source attached."""
    with_src = _state(source, transforms, weights=ZERO)
    plain = make_state(init_target_from_source(source), TransferConfig(batch_size=4, weights=ZERO))
    train_iteration(with_src, target_data)
    train_iteration(plain, target_data)
    for a, b in zip(_params(with_src.target), _params(plain.target)):
        assert torch.equal(a, b)


@pytest.mark.parametrize("aug", [AugmentPolicy(), FULL_AUG])
def test_reconstruction_identity(source, transforms, target_data, aug):
    w = LossWeights()
    state = _state(source, transforms, augment=aug, r1_every=2)
    for _ in range(4):
        rec = train_iteration(state, target_data)
        assert rec.loss_g_total == pytest.approx(rec.loss_g_adv + 5 * rec.loss_g_dis + rec.loss_g_reg, abs=1e-6)
        assert rec.loss_d_total == pytest.approx(rec.loss_d_adv + w.lambda4 * rec.loss_d_dis, abs=1e-6)


def test_reduction_law_totals_equal_adversarial(source, transforms, target_data):
    state = _state(source, transforms, weights=ZERO)
    for _ in range(3):
        rec = train_iteration(state, target_data)
        assert abs(rec.loss_g_total - rec.loss_g_adv) <= 1e-6
        assert abs(rec.loss_d_total - rec.loss_d_adv) <= 1e-6


def test_g_step_keeps_d_trainable_flags(source, transforms, target_data):
    state = _state(source, transforms)
    flags = [p.requires_grad for p in state.target.discriminator.parameters()]
    transfer_step_g(state, target_data[:4])
    assert flags == [p.requires_grad for p in state.target.discriminator.parameters()]


def test_freeze_d_layers(source, transforms, target_data):
    state = _state(source, transforms, freeze_d_layers=(1,))
    frozen = [t.clone() for t in state.target.discriminator.blocks[0].parameters()]
    train_iteration(state, target_data)
    assert all(torch.equal(a, b) for a, b in zip(frozen, state.target.discriminator.blocks[0].parameters()))
    with pytest.raises(ValueError):
        _state(source, transforms, freeze_d_layers=(9,))


def test_transfer_cadence_and_determinism(tmp_path, source, transforms, target_data):
    cfg = TransferConfig(batch_size=4, total_steps=6, snapshot_every=2, augment=FULL_AUG, seed=5)
    h = parameter_hash(source)
    a = transfer(target_data, source, cfg, transforms=transforms, out_dir=tmp_path / "a")
    b = transfer(target_data, source, cfg, transforms=transforms, out_dir=tmp_path / "b")
    assert parameter_hash(source) == h
    assert a.snapshot_steps == [2, 4, 6]
    assert sorted(p.name for p in (tmp_path / "a").glob("snapshot-*.ckpt")) == [
        "snapshot-000002.ckpt",
        "snapshot-000004.ckpt",
        "snapshot-000006.ckpt",
    ]
    assert [r.to_record() for r in a.records] == [r.to_record() for r in b.records]
    assert (tmp_path / "a" / "runlog.jsonl").read_bytes() == (tmp_path / "b" / "runlog.jsonl").read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["source_hash"] == h
    assert manifest["seed"] == 5
    steps = [r for r in RunLog.read(tmp_path / "a" / "runlog.jsonl") if r["kind"] == "step"]
    assert [r["step"] for r in steps] == list(range(1, 7))


def test_transfer_snapshot_cadence_100(source, transforms, target_data):
    cfg = TransferConfig(batch_size=2, total_steps=300, snapshot_every=100, weights=ZERO, r1_gamma=0.0)
    res = transfer(target_data, source, cfg, transforms=transforms)
    assert res.snapshot_steps == [100, 200, 300]
    assert len(res.records) == 300


def test_transfer_with_fid_tracks_best(source, transforms, target_data):
    ext = frozen_random_extractor()
    cfg = TransferConfig(batch_size=4, total_steps=4, snapshot_every=2, eval_n_fake=8)
    res = transfer(target_data, source, cfg, transforms=transforms, extractor=ext)
    assert [r.snapshot_step for r in res.reports] == [2, 4]
    assert res.best_report.score == min(r.score for r in res.reports)
    assert len(res.log.of_kind("fid")) == 2


def test_transfer_rejects_target_role(source, transforms, target_data):
    with pytest.raises(ValueError):
        transfer(target_data, init_target_from_source(source), TransferConfig(total_steps=1), transforms=transforms)


def test_pretrain_zero_steps_is_initialization():
    data = _data(8, 2)
    res = pretrain(data, NET, TransferConfig(total_steps=0, seed=3))
    assert parameter_hash(res.snapshot) == parameter_hash(new_snapshot(NET, seed=3))
    assert res.records == []


def test_pretrain_runs_and_logs(tmp_path):
    data = _data(8, 2)
    res = pretrain(data, NET, TransferConfig(total_steps=3, batch_size=4, snapshot_every=3), out_dir=tmp_path)
    assert len(res.records) == 3
    assert all(r.loss_d_dis == 0 and r.loss_g_dis == 0 for r in res.records)
    assert res.snapshot.role == "source"
    assert (tmp_path / "snapshot-000003.ckpt").exists()


def test_small_dataset_sampled_with_replacement():
    g = torch.Generator().manual_seed(0)
    batch = sample_real_batch(_data(3, 0), 8, g)
    assert batch.shape[0] == 8


def test_resolved_mask():
    assert TransferConfig().resolved_mask(NetworkConfig()) == LayerMask((1, 2, 3), (1, 2, 3))
    assert TransferConfig().resolved_mask(NET) == LayerMask((1, 2), (1, 2))
    with pytest.raises(ValueError):
        TransferConfig(mask=LayerMask((5,), (1,))).resolved_mask(NET)
    with pytest.raises(ValueError):
        TransferConfig(batch_size=0)


@pytest.mark.slow
def test_pretrain_2000_steps_beats_untrained(pretrained_source):
    snap, info = pretrained_source
    assert snap.step == 2000 and snap.role == "source"
    assert info["final_fid"] < info["untrained_fid"]
