import numpy as np
import pytest
import torch
import torch.nn as nn

from cdif.phantom_sim import Dataset, make_dataset
from cdif.restoration_net import NetConfig
from cdif.restoration_net.checkpoint import CheckpointError
from cdif.schedule import make_schedule
from cdif.trainer import (
    Batch,
    TrainConfig,
    init_params,
    make_optimizer,
    read_trace,
    sample_batch,
    stage_outputs,
    train_loop,
    train_step,
    two_stage_loss,
)

TINY = dict(base_channels=4, embed_dim=8, emm_channels=4)


def toy_arrays(n=6, side=16, seed=0):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(0, 200, (n, side, side)).astype(np.float32)
    xT = (x0 + rng.normal(0, 60, x0.shape)).astype(np.float32)
    prev = (xT + rng.normal(0, 20, x0.shape)).astype(np.float32)
    nxt = (xT + rng.normal(0, 20, x0.shape)).astype(np.float32)
    return x0, xT, prev, nxt


def tiny_setup(lr=1e-4, seed=0, T=10, **kw):
    cfg = TrainConfig(lr=lr, T=T, seed=seed, batch=4, **TINY, **kw)
    params = init_params(cfg, 16)
    return cfg, params, make_optimizer(params.net, lr), make_schedule(T)


class Oracle(nn.Module):
    """Stands in for the network and always answers with the true image."""

    def __init__(self, x0):
        super().__init__()
        self.cfg = NetConfig(side=x0.shape[-1], T=10)
        self.x0 = x0
        self.calls = []

    def forward(self, x_c, t, emm=None):
        self.calls.append((x_c.clone(), t.clone(), emm))
        return self.x0[:, None].clone()


def test_oracle_network_gives_zero_loss():
    x0, xT, prev, nxt = map(torch.from_numpy, toy_arrays(4))
    batch = Batch(x0, xT, prev, nxt, torch.tensor([1, 4, 7, 10]))
    total, l1, l2 = two_stage_loss(Oracle(x0), batch, make_schedule(10))
    assert float(total) == 0.0 and float(l1) == 0.0 and float(l2) == 0.0


def test_t1_stage_two_runs_at_zero_on_the_prediction():
    x0, xT, prev, nxt = map(torch.from_numpy, toy_arrays(2))
    oracle = Oracle(x0 + 7.0)
    batch = Batch(x0, xT, prev, nxt, torch.tensor([1, 1]))
    x0_hat, _ = stage_outputs(oracle, batch, make_schedule(10))
    (xc1, t1, emm1), (xc2, t2, emm2) = oracle.calls
    assert emm1 is None and emm2 is not None
    assert t1.tolist() == [1, 1] and t2.tolist() == [0, 0]
    assert torch.equal(xc2[:, 1], x0_hat)
    assert torch.equal(xc2[:, 0], prev) and torch.equal(xc2[:, 2], nxt)


def test_stage_one_input_is_mean_preserving_degradation():
    x0, xT, prev, nxt = map(torch.from_numpy, toy_arrays(1))
    s = make_schedule(10)
    oracle = Oracle(x0)
    stage_outputs(oracle, Batch(x0, xT, prev, nxt, torch.tensor([4])), s)
    a = s.alphas[4]
    assert torch.allclose(oracle.calls[0][0][0, 1], a * x0[0] + (1 - a) * xT[0], rtol=0, atol=1e-4)


def test_one_step_descends_on_fixed_batch():
    cfg, params, opt, s = tiny_setup(lr=1e-4)
    batch = sample_batch(toy_arrays(), 0, cfg)
    with torch.no_grad():
        before = float(two_stage_loss(params.net, batch, s)[0])
    train_step(batch, params, s, opt)
    with torch.no_grad():
        after = float(two_stage_loss(params.net, batch, s)[0])
    assert after < before


def test_zero_learning_rate_leaves_parameters():
    cfg, params, opt, s = tiny_setup(lr=0.0)
    fp = params.fingerprint()
    for k in range(3):
        train_step(sample_batch(toy_arrays(), k, cfg), params, s, opt)
    assert params.fingerprint() == fp and params.step == 3


def test_both_parameter_groups_get_gradient_by_step_ten():
    cfg, params, opt, s = tiny_setup(lr=1e-3)
    arrays = toy_arrays()
    seen_phi = False
    for k in range(10):
        train_step(sample_batch(arrays, k, cfg), params, s, opt)
        theta = sum(float(p.grad.abs().sum()) for p in params.net.theta_parameters() if p.grad is not None)
        phi = sum(float(p.grad.abs().sum()) for p in params.net.phi_parameters() if p.grad is not None)
        assert theta > 0
        seen_phi |= phi > 0
    assert seen_phi


def test_detach_flag_changes_theta_gradient():
    cfg, params, _, s = tiny_setup(lr=1e-3)
    net = params.net
    batch = sample_batch(toy_arrays(), 0, cfg)
    grads = []
    for detach in (False, True):
        net.zero_grad()
        two_stage_loss(net, batch, s, detach_stage1=detach)[0].backward()
        grads.append(torch.cat([p.grad.flatten() for p in net.theta_parameters()]))
    assert not torch.equal(grads[0], grads[1])


def test_non_finite_loss_aborts():
    cfg, params, opt, s = tiny_setup()
    x0, xT, prev, nxt = toy_arrays()
    x0[0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        train_step(sample_batch((x0, xT, prev, nxt), 0, TrainConfig(batch=6, **TINY)), params, s, opt)


def test_schedule_mismatch_rejected():
    _, params, opt, _ = tiny_setup(T=10)
    cfg9 = TrainConfig(T=9, **TINY)
    with pytest.raises(CheckpointError):
        train_step(sample_batch(toy_arrays(), 0, cfg9), params, make_schedule(9), opt)


def test_batch_sampling_covers_steps_uniformly():
    cfg = TrainConfig(T=10, batch=4, seed=3)
    ts = np.concatenate([sample_batch(toy_arrays(2), k, cfg).t.numpy() for k in range(2000)])
    assert ts.min() == 1 and ts.max() == 10
    counts = np.bincount(ts, minlength=11)[1:]
    assert np.all(np.abs(counts / len(ts) - 0.1) < 0.02)


def test_trace_decomposition_and_determinism(tmp_path):
    cfg = TrainConfig(iters=6, batch=2, ckpt_every=3, seed=5, **TINY)
    p1, tr1 = train_loop(toy_arrays(), cfg, out_dir=tmp_path / "a")
    p2, tr2 = train_loop(toy_arrays(), cfg)
    assert p1.fingerprint() == p2.fingerprint()
    assert tr1 == tr2
    for it, a, b, tot in tr1:
        assert tot == a + b
    assert [r[0] for r in tr1] == list(range(1, 7))
    assert read_trace(tmp_path / "a" / "loss.csv") == tr1
    assert (tmp_path / "a" / "ckpt_000003.cdck").exists() and (tmp_path / "a" / "final.cdck").exists()


def test_resume_continues_trace(tmp_path):
    cfg = TrainConfig(iters=6, batch=2, ckpt_every=3, seed=2, **TINY)
    full, trace = train_loop(toy_arrays(), cfg, out_dir=tmp_path / "run")
    resumed, trace2 = train_loop(toy_arrays(), cfg, resume=tmp_path / "run" / "ckpt_000003.cdck")
    assert resumed.step == 6
    assert [r[0] for r in trace2] == list(range(1, 7))
    np.testing.assert_allclose(np.array(trace2), np.array(trace), rtol=1e-5, atol=1e-9)
    for (n, a), (_, b) in zip(full.net.named_parameters(), resumed.net.named_parameters()):
        torch.testing.assert_close(a, b, rtol=1e-5, atol=1e-7)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        TrainConfig(batch=0)


@pytest.mark.slow
def test_desk_training_reduces_loss(tmp_path):
    ds = Dataset(make_dataset(tmp_path / "d", 20, 32, [0.05], seed=8))
    cfg = TrainConfig(iters=200, batch=4, seed=0, base_channels=8, embed_dim=32, emm_channels=8)
    _, trace = train_loop(ds, cfg)
    total = np.array([r[3] for r in trace])
    assert total[-40:].mean() < total[:40].mean()
