import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from ecdb.checkpoint import (
    CheckpointError,
    build_model,
    file_hash,
    load_checkpoint,
    load_into,
    save_checkpoint,
)
from ecdb.control import ControlBranch, ECDBModel, FusionSchedule
from ecdb.bridge import BridgeTables
from ecdb.denoiser import DenoiserArch, UNetDenoiser
from ecdb.errors import ConfigError, DomainError, TrainingDivergence
from ecdb.oracles import GaussianToyModel
from ecdb.training import (
    PHASE_LR,
    TrainConfig,
    loss_eps_mse,
    loss_eq4,
    lr_at,
    train_loop,
    validation_loss,
)

ARCH = DenoiserArch(base_width=8, time_embed_dim=16)
MU0, S0, XT = 0.3, 0.5, 1.0


def _pairs(n=16, size=8, seed=0):
    rng = np.random.default_rng(seed)
    hq = rng.random((n, 3, size, size))
    lq = np.clip(hq + 0.2 * rng.standard_normal(hq.shape), 0, 1)
    return hq, lq


class Scaled(torch.nn.Module):
    """``k`` times the exact noise predictor of the Gaussian toy, plus ``shift``."""

    def __init__(self, sched, k=1.0, shift=0.0):
        super().__init__()
        self.opt, self.k, self.shift = GaussianToyModel(sched, MU0, S0), k, shift

    def forward(self, x, xT, t):
        return self.k * self.opt(x, xT, t) + self.shift


def _gaussian_batch(n, seed):
    g = torch.Generator().manual_seed(seed)
    x0 = MU0 + S0 * torch.randn(n, 1, generator=g, dtype=torch.float64)
    xT = torch.full_like(x0, XT)
    idx = torch.randint(1, 101, (n,), generator=g)
    noise = torch.randn(n, 1, generator=g, dtype=torch.float64)
    return x0, xT, idx, noise


# -- learning rate -------------------------------------------------------------------


def test_lr_halving_schedule():
    cfg = TrainConfig(total_steps=400, lr_initial=2e-5)
    assert cfg.halve_points() == (100, 200, 300)
    assert lr_at(1, cfg) == 2e-5 and lr_at(100, cfg) == 2e-5
    assert lr_at(101, cfg) == 1e-5
    assert lr_at(201, cfg) == 2e-5 / 4
    assert lr_at(400, cfg) == 2e-5 / 8


@given(total=st.integers(8, 10_000), step=st.integers(1, 10_000))
def test_lr_invariant(total, step):
    cfg = TrainConfig(total_steps=total, lr_initial=1e-3)
    step = min(step, total)
    passed = sum(step > h for h in cfg.halve_points())
    assert lr_at(step, cfg) == 1e-3 * 2.0**-passed


def test_phase_defaults():
    assert TrainConfig().for_phase("pretrain").lr_initial == PHASE_LR["pretrain"] == 1e-4
    assert TrainConfig().for_phase("ecdb").lr_initial == PHASE_LR["ecdb"] == 2e-5
    assert TrainConfig(lr_initial=3e-4).for_phase("ecdb").lr_initial == 3e-4
    with pytest.raises(ConfigError):
        lr_at(1, TrainConfig())


@pytest.mark.parametrize(
    "kw",
    [dict(lr_halve_at=(5, 5)), dict(lr_halve_at=(3, 2)), dict(total_steps=10, lr_halve_at=(10,)),
     dict(lr_initial=0.0), dict(loss_kind="l1"), dict(batch_size=0)],
)
def test_invalid_train_config(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**{"total_steps": 20, **kw}).validate()


# -- losses --------------------------------------------------------------------------


def test_eq4_t_index_domain(sched):
    x = torch.zeros(2, 1)
    with pytest.raises(DomainError):
        loss_eq4(sched, Scaled(sched), x, x, 0)
    with pytest.raises(DomainError):
        loss_eps_mse(sched, Scaled(sched), x, x, 101)


def test_eq4_optimal_eps_sits_at_the_floor(sched):
    x0, xT, idx, noise = _gaussian_batch(100_000, seed=11)
    tab = BridgeTables(sched, torch.float64)
    best = float(loss_eq4(sched, Scaled(sched), x0, xT, idx, noise=noise))
    for shift in (-0.1, 0.1):
        assert best < float(loss_eq4(sched, Scaled(sched, shift=shift), x0, xT, idx, noise=noise))

    # analytic floor: the posterior's dependence on x_0 given x_t is irreducible
    n = sched.n_steps
    e = torch.clamp(idx, max=n - 1)
    c0, sp2 = tab.c0[idx], tab.sp2[idx]
    a, sp2p, c0p = tab.a[idx], tab.sp2[idx - 1], tab.c0[idx - 1]
    w0 = torch.where(sp2 == 0, c0p, (sp2 - a * a * sp2p) * c0p / torch.where(sp2 == 0, 1, sp2))
    # at T the state is pinned to x_T and carries no information about x_0
    var_x0 = torch.where(sp2 == 0, torch.full_like(sp2, S0**2), S0**2 * sp2 / (c0 * c0 * S0**2 + sp2))
    floor = float((w0 * w0 * var_x0 / (2 * tab.g2[e])).mean())
    per_item_se = 3 * floor / math.sqrt(len(idx))
    # the eq4 and noise-matching optima differ by an O(dt) Euler term, which keeps a small excess
    assert floor <= best + 4 * per_item_se
    assert best <= floor * 1.02 + 4 * per_item_se


def test_losses_share_the_minimizer(sched):
    x0, xT, idx, noise = _gaussian_batch(20_000, seed=4)
    ks = np.linspace(0.0, 2.0, 101)
    eq4 = [float(loss_eq4(sched, Scaled(sched, k), x0, xT, idx, noise=noise)) for k in ks]
    mse = [float(loss_eps_mse(sched, Scaled(sched, k), x0, xT, idx, noise=noise)) for k in ks]
    assert ks[int(np.argmin(eq4))] == ks[int(np.argmin(mse))] == 1.0


def test_zero_noise_posterior_identity(sched):
    class Zero(torch.nn.Module):
        def forward(self, x, xT, t):
            return torch.zeros_like(x)

    x = torch.linspace(-1, 1, 9, dtype=torch.float64).reshape(9, 1)
    for i in range(1, sched.n_steps + 1):
        loss = loss_eq4(sched, Zero(), x, x, i, noise=torch.zeros_like(x))
        assert float(loss) < 1e-10


def test_eps_mse_examples(sched):
    hq, lq = (torch.as_tensor(a) for a in _pairs(64, 8))
    noise = torch.randn(hq.shape, dtype=hq.dtype)

    class Perfect(torch.nn.Module):
        def forward(self, x, xT, t):
            return noise

    class Zero(torch.nn.Module):
        def forward(self, x, xT, t):
            return torch.zeros_like(x)

    assert float(loss_eps_mse(sched, Perfect(), hq, lq, 50, noise=noise)) == 0.0
    g = torch.Generator().manual_seed(0)
    z = float(loss_eps_mse(sched, Zero(), hq, lq, torch.randint(1, 101, (64,), generator=g), generator=g))
    n = hq.numel()
    assert abs(z - 1.0) <= 4 * math.sqrt(2 / n)


@given(seed=st.integers(0, 2**16), k=st.floats(-3, 3), shift=st.floats(-1, 1))
def test_losses_are_nonnegative(sched, seed, k, shift):
    x0, xT, idx, noise = _gaussian_batch(32, seed)
    model = Scaled(sched, k, shift)
    assert float(loss_eq4(sched, model, x0, xT, idx, noise=noise)) >= 0
    assert float(loss_eps_mse(sched, model, x0, xT, idx, noise=noise)) >= 0


def test_eq4_gradients_flow_only_into_trainable(sched):
    dm = UNetDenoiser(ARCH).freeze()
    model = ECDBModel(dm)
    hq, lq = (torch.as_tensor(a, dtype=torch.float32) for a in _pairs(4, 8))
    loss_eq4(sched, model, hq, lq, torch.tensor([3, 40, 77, 100])).backward()
    assert all(p.grad is None for p in dm.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in model.trainable_parameters())


# -- loop --------------------------------------------------------------------------


def test_freeze_preconditions(sched):
    data = _pairs()
    dm = UNetDenoiser(ARCH)
    with pytest.raises(ConfigError):
        train_loop(TrainConfig(total_steps=2), sched, dm, data, branch=ControlBranch(dm))
    dm.freeze()
    with pytest.raises(ConfigError):
        train_loop(TrainConfig(total_steps=2), sched, dm, data)


def test_empty_dataset_rejected(sched):
    empty = (np.zeros((0, 3, 8, 8)), np.zeros((0, 3, 8, 8)))
    with pytest.raises(ConfigError):
        train_loop(TrainConfig(total_steps=2), sched, UNetDenoiser(ARCH), empty)


def test_nan_loss_aborts_with_step(sched):
    with pytest.raises(TrainingDivergence) as info:
        train_loop(TrainConfig(total_steps=10, lr_initial=math.inf), sched, UNetDenoiser(ARCH), _pairs())
    assert info.value.step == 2


def test_ecdb_run_respects_freeze_and_flags(sched, tmp_path):
    dm = UNetDenoiser(ARCH)
    train_loop(TrainConfig(total_steps=5), sched, dm, _pairs())
    dm.freeze()
    before = dm.checksum()
    branch = ControlBranch(dm)
    branch_before = branch.state_dict()["cm.taps.0.weight"].clone()
    cfg = TrainConfig(total_steps=6, lr_initial=1e-3, fusion_schedule=False, dfm=False, log_every=2)
    run = train_loop(cfg, sched, dm, _pairs(), branch=branch, run_dir=tmp_path)
    assert dm.checksum() == before
    assert not torch.equal(branch.state_dict()["cm.taps.0.weight"], branch_before)
    assert branch.fusion == FusionSchedule(dfm=False, schedule=False)
    assert run.step == 6 and run.lr == lr_at(6, cfg.for_phase("ecdb"))

    rows = list(csv.reader((tmp_path / "metrics.csv").open()))
    assert rows[0] == ["step", "loss", "lr", "seconds"]
    assert [r[0] for r in rows[1:]] == ["2", "4", "6"]
    assert [p.name for p in run.checkpoint_paths] == ["step_0000006.ckpt"]
    assert load_checkpoint(run.checkpoint_paths[0]).fusion == FusionSchedule(dfm=False, schedule=False)


class _Interrupt(Exception):
    pass


def _interrupt_at(step):
    def cb(s, _):
        if s == step:
            raise _Interrupt

    return cb


def test_resume_matches_uninterrupted_run(sched, tmp_path):
    data = _pairs()
    cfg = TrainConfig(total_steps=12, checkpoint_every=6, log_every=100)
    torch.manual_seed(0)
    train_loop(cfg, sched, UNetDenoiser(ARCH), data, run_dir=tmp_path / "a")
    torch.manual_seed(0)
    with pytest.raises(_Interrupt):
        train_loop(cfg, sched, UNetDenoiser(ARCH), data, run_dir=tmp_path / "b", callback=_interrupt_at(6))
    # a different model initialization is overwritten by the checkpoint
    torch.manual_seed(123)
    run = train_loop(cfg, sched, UNetDenoiser(ARCH), data, run_dir=tmp_path / "b",
                     resume=tmp_path / "b" / "checkpoints" / "step_0000006.ckpt")
    assert run.step == 12
    a = tmp_path / "a" / "checkpoints" / "step_0000012.ckpt"
    b = tmp_path / "b" / "checkpoints" / "step_0000012.ckpt"
    assert file_hash(a) == file_hash(b)
    assert load_checkpoint(b).header["optimizer"]["lr"] == lr_at(12, cfg.for_phase("pretrain"))


def test_checkpoint_roundtrip(tmp_path):
    dm = UNetDenoiser(ARCH)
    model = ECDBModel(dm, fusion=FusionSchedule(a=3.0))
    with torch.no_grad():
        for p in model.branch.parameters():
            p.add_(0.01)
    path = save_checkpoint(tmp_path / "m.ckpt", model, step=7, config_hash="abc")
    ckpt = load_checkpoint(path)
    assert ckpt.step == 7 and ckpt.header["config_hash"] == "abc" and ckpt.fusion.a == 3.0
    again = build_model(ckpt)
    x, xT = torch.randn(2, 3, 8, 8), torch.rand(2, 3, 8, 8)
    with torch.no_grad():
        assert torch.equal(again(x, xT, torch.tensor([0.2, 0.7])), model(x, xT, torch.tensor([0.2, 0.7])))
    assert file_hash(save_checkpoint(tmp_path / "n.ckpt", again, step=7, config_hash="abc")) == file_hash(path)


def test_checkpoint_rejects_mismatch(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", UNetDenoiser(ARCH))
    with pytest.raises(CheckpointError):
        load_into(UNetDenoiser(DenoiserArch(base_width=16, time_embed_dim=16)), load_checkpoint(path))
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    bad.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_validation_loss_is_deterministic(sched):
    dm = UNetDenoiser(ARCH)
    data = _pairs(10)
    a = validation_loss(sched, dm, data)
    assert a == validation_loss(sched, dm, data)
    assert validation_loss(sched, dm, data, loss_kind="eq4_full") >= 0
