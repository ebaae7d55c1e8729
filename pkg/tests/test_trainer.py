import json

import numpy as np
import pytest
import torch

from smparse import synthdata as sd
from smparse import trainer
from smparse.config import Config, ModelConfig, TrainConfig
from smparse.trainer import (MIRHarvestError, MIRSample, TrainingDiverged, load_checkpoint, lr_at_epoch,
                             make_optimizer, save_checkpoint, semantic_grid, set_deterministic, train,
                             train_mir)


@pytest.fixture(scope="module")
def scenes():
    return sd.generate_dataset(4, 0, sd.SceneSpec(num_humans=(1, 2)))


def small_cfg(**train):
    base = dict(batch_size=2, epochs=12, lr_decay_epochs=(9, 11), checkpoint_every=0)
    base.update(train)
    return Config(train=TrainConfig(**base))


def test_lr_schedule_table():
    tc = TrainConfig()
    lrs = [lr_at_epoch(e, tc) for e in range(1, 13)]
    assert lrs[:8] == [0.02] * 8
    assert lrs[8] == lrs[9] == 0.002
    assert lrs[10] == lrs[11] == 0.0002


def test_logged_lr_follows_schedule(scenes, tmp_path):
    set_deterministic(0)
    cfg = small_cfg(epochs=12, lr_decay_epochs=(9, 11))
    train(scenes, cfg, log_path=tmp_path / "log.jsonl", max_iters=24)
    recs = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert len(recs) == 24
    for r in recs:
        assert r["epoch"] == (r["iter"] - 1) // 2 + 1
        assert r["lr"] == lr_at_epoch(r["epoch"], cfg.train)
    assert {r["lr"] for r in recs if r["epoch"] >= 11} == {0.0002}


def test_optimizer_excludes_mir():
    model = trainer.SMPNet(ModelConfig())
    opt = make_optimizer(model, TrainConfig())
    ids = {id(p) for g in opt.param_groups for p in g["params"]}
    for n, p in model.named_parameters():
        assert (id(p) in ids) == (not n.startswith("mir."))


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train([], small_cfg(), max_iters=1)


def _run(scenes, n, **kw):
    set_deterministic(0)
    st = train(scenes, small_cfg(), max_iters=n, **kw)
    return st, [r["total"] for r in st.history]


def test_same_seed_identical_losses(scenes):
    _, a = _run(scenes, 6)
    _, b = _run(scenes, 6)
    assert a == b


def test_resume_is_bit_exact(scenes, tmp_path):
    k = 3
    straight, full = _run(scenes, k + 10)
    part, _ = _run(scenes, k)
    save_checkpoint(part, tmp_path / "k.npz")
    torch.manual_seed(1234)        # clobber global state; the checkpoint must restore it
    resumed = load_checkpoint(tmp_path / "k.npz")
    assert resumed.iteration == k
    resumed = train(scenes, resumed.config, state=resumed, max_iters=k + 10)
    assert [r["total"] for r in resumed.history] == full[k:]
    for (n, p), (_, q) in zip(straight.model.named_parameters(), resumed.model.named_parameters()):
        assert torch.equal(p, q), n


def test_checkpoint_config_mismatch(scenes, tmp_path):
    st, _ = _run(scenes, 1)
    save_checkpoint(st, tmp_path / "c.npz")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "c.npz", Config(model=ModelConfig(epsilon=0.1)))


def test_divergence_keeps_last_good(scenes, tmp_path, monkeypatch):
    real = trainer.total_loss

    def poisoned(out, targets, *a, **k):
        rep = real(out, targets, *a, **k)
        if poisoned.calls == 2:
            rep.total = rep.total * float("nan")
        poisoned.calls += 1
        return rep
    poisoned.calls = 0
    monkeypatch.setattr(trainer, "total_loss", poisoned)
    set_deterministic(0)
    with pytest.raises(TrainingDiverged) as e:
        train(scenes, small_cfg(), out_dir=tmp_path, max_iters=5)
    assert e.value.checkpoint is not None and e.value.checkpoint.is_file()
    assert load_checkpoint(e.value.checkpoint).iteration == 2


def test_interrupt_leaves_resumable_checkpoint(scenes, tmp_path):
    def stop(state, rep):
        if state.iteration == 2:
            raise KeyboardInterrupt
    set_deterministic(0)
    with pytest.raises(KeyboardInterrupt):
        train(scenes, small_cfg(), out_dir=tmp_path, max_iters=4, callback=stop)
    st = load_checkpoint(tmp_path / "latest.npz")
    assert st.iteration == 2
    st = train(scenes, st.config, out_dir=tmp_path, state=st, max_iters=4)
    _, ref = _run(scenes, 4)
    assert [r["total"] for r in st.history] == ref[2:]


def test_loss_trajectory_decreases(scenes):
    _, losses = _run(scenes, 30)
    assert np.mean(losses[-5:]) < 0.5 * np.mean(losses[:5])


def test_scale_jitter_changes_sizes(scenes):
    set_deterministic(0)
    cfg = small_cfg(scale_jitter_range=(192, 320))
    batcher = trainer.SceneBatcher(scenes, cfg)
    rng = np.random.default_rng(0)
    sizes = {batcher.batch([0, 1], rng)[0].shape[-1] for _ in range(10)}
    assert len(sizes) > 1 and all(s % 32 == 0 and 192 <= s <= 320 for s in sizes)


def test_semantic_grid_labels():
    s = sd.generate_scene(0)
    grid = semantic_grid(s, 40)
    assert grid.shape == (40, 40)
    assert set(np.unique(grid)) <= set(range(7)) and grid.max() > 0


def test_train_mir_requires_decoded_parts(scenes):
    model = trainer.SMPNet(ModelConfig())
    with pytest.raises(MIRHarvestError):
        train_mir(model, scenes)


def test_train_mir_runs_configured_epochs_and_freezes_base(scenes, tmp_path, monkeypatch):
    def gt_samples(model, scenes, min_iou=0.5):
        out = []
        for k, s in enumerate(scenes):
            parts = [p for h in s.humans for p in h.parts]
            out.append(MIRSample(k, torch.from_numpy(np.stack([p.mask for p in parts])),
                                 torch.tensor([p.category for p in parts])))
        return out
    monkeypatch.setattr(trainer, "harvest_mir_samples", gt_samples)
    model = trainer.SMPNet(ModelConfig())
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    model = train_mir(model, scenes, log_path=tmp_path / "mir.jsonl")
    recs = [json.loads(x) for x in (tmp_path / "mir.jsonl").read_text().splitlines()]
    assert [r["mir_epoch"] for r in recs] == [1, 2, 3, 4, 5, 6]
    assert model.cfg.mir.enabled
    changed = {n for n, p in model.named_parameters() if not torch.equal(p, before[n])}
    assert changed and all(n.startswith("mir.") for n in changed)
    assert recs[-1]["cls"] < recs[0]["cls"]
