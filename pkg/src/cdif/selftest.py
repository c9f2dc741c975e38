"""Fast property checks runnable from an installed package (``cdif selftest``)."""
from __future__ import annotations

import time

import numpy as np
import torch

from .evalkit import cnr, drift_curve, psnr, rmse, ssim, ROI
from .phantom_sim.noise import NoiseModel, measured_counts
from .phantom_sim.phantom import generate_phantom
from .phantom_sim.tomo import fbp_reconstruct, forward_project, hu_to_mu, mu_to_hu
from .restoration_net.net import CLEARNet, NetConfig
from .sampler import sample
from .schedule import degrade_mean_preserving, make_schedule
from .trainer import Batch, two_stage_loss


def gradient_check(net: CLEARNet, batch: Batch, s, n_theta=20, n_phi=20, h=1e-5, seed=0):
    """Compare autograd gradients of the two-stage loss against central differences.

    Returns a list of ``(group, name, index, autograd, finite_difference, rel_error)``.
    Run on a float64 network.
    """
    rng = np.random.default_rng(seed)
    named = dict(net.named_parameters())
    net.zero_grad()
    loss, _, _ = two_stage_loss(net, batch, s)
    loss.backward()
    picks = []
    for group, names, count in (
        ("theta", [n for n in named if not n.startswith("emm.")], n_theta),
        ("phi", [n for n in named if n.startswith("emm.")], n_phi),
    ):
        sizes = np.array([named[n].numel() for n in names])
        flat = rng.choice(sizes.sum(), size=count, replace=False)
        bounds = np.cumsum(sizes)
        for f in flat:
            k = int(np.searchsorted(bounds, f, side="right"))
            picks.append((group, names[k], int(f - (bounds[k] - sizes[k]))))
    out = []
    with torch.no_grad():
        for group, name, idx in picks:
            p = named[name].view(-1)
            g = float(named[name].grad.view(-1)[idx])
            orig = float(p[idx])
            p[idx] = orig + h
            lp = float(two_stage_loss(net, batch, s)[0])
            p[idx] = orig - h
            lm = float(two_stage_loss(net, batch, s)[0])
            p[idx] = orig
            fd = (lp - lm) / (2 * h)
            rel = abs(g - fd) / max(abs(g), abs(fd), 1e-12)
            out.append((group, name, idx, g, fd, rel))
    return out


def tiny_gradcheck_setup(seed=0, side=16, T=10):
    """Small float64 network with randomised error-modulation heads, and a batch."""
    torch.manual_seed(seed)
    net = CLEARNet(NetConfig(side=side, T=T, base_channels=2, embed_dim=8, emm_channels=2)).double()
    with torch.no_grad():
        for lin in (net.emm.beta, net.emm.gamma):
            lin.weight.normal_(0.0, 0.3)
    rng = np.random.default_rng(seed)
    x0 = rng.normal(0, 200, (2, side, side))
    xT = x0 + rng.normal(0, 60, x0.shape)
    prev = xT + rng.normal(0, 30, x0.shape)
    nxt = xT + rng.normal(0, 30, x0.shape)
    tt = lambda a: torch.as_tensor(a, dtype=torch.float64)
    batch = Batch(tt(x0), tt(xT), tt(prev), tt(nxt), torch.as_tensor([3, 1]))
    return net, batch


def _check_schedule():
    s = make_schedule(10)
    exp = [0.999, 0.888, 0.777, 0.666, 0.555, 0.444, 0.333, 0.222, 0.111, 0.0]
    err = max(abs(a - b) for a, b in zip(s.alphas[1:], exp))
    return err < 1e-12 and s.alphas[0] == 1.0, f"max dev {err:.1e}"


def _check_oracle():
    s = make_schedule(10)
    rng = np.random.default_rng(0)
    x0 = rng.normal(0, 300, (32, 32))
    xT = x0 + rng.normal(0, 50, x0.shape)
    oracle = lambda x_c, t, emm=None: torch.as_tensor(x0)[None]
    out, traj = sample(xT, xT, xT, oracle, s)
    err = max(np.abs(traj.at(t) - degrade_mean_preserving(x0, xT, t, s)).max() for t in range(10))
    err = max(err, np.abs(out - x0).max())
    return err <= 1e-9, f"max abs {err:.2e}"


def _check_mean():
    s = make_schedule(10)
    mp, cl = drift_curve(s, 100.0, 20.0, 10_000, seed=1)
    target = 100.0 * np.sqrt(np.asarray(s.alphas))
    e1, e2 = np.abs(mp - 100).max(), np.abs(cl - target).max()
    return e1 <= 0.8 and e2 <= 0.8, f"mean-preserving dev {e1:.3f}, classical dev {e2:.3f}"


def _check_noise():
    nm = NoiseModel()
    c = measured_counts(np.zeros(100_000), nm, np.random.default_rng(3))
    m_err = abs(c.mean() / 1.5e5 - 1)
    v_err = abs(c.var() / (1.5e5 + 10) - 1)
    return m_err <= 0.01 and v_err <= 0.05, f"mean err {m_err:.2e}, var err {v_err:.2e}"


def _check_metrics():
    a = np.full((32, 32), 50.0)
    a[8:24, 8:24] = 120.0
    b = a + 100.0
    ok = abs(psnr(a, b) - 20 * np.log10(20)) < 0.01 and abs(rmse(a, b) - 100) < 1e-9
    ok &= psnr(a, a) == 99.0 and abs(ssim(a, a) - 1) < 1e-12
    img = np.zeros((8, 8))
    img[:4, :4] = 100
    img[4:, :] = np.tile([25, 75], 16).reshape(4, 8)
    ok &= abs(cnr(img, ROI(0, 0, 4, 4, "signal"), ROI(0, 4, 8, 4, "background")) - 2.0) < 1e-12
    return bool(ok), "psnr/rmse/ssim/cnr oracles"


def _check_fbp():
    from scipy import ndimage

    ph = generate_phantom(64, 5, 11)
    rec = mu_to_hu(fbp_reconstruct(forward_project(hu_to_mu(ph.image), 180), 64))
    band = (ndimage.maximum_filter(ph.image, 5) - ndimage.minimum_filter(ph.image, 5)) > 0
    e = float(np.sqrt(np.mean((rec - ph.image)[~band] ** 2)))
    return e <= 40.0, f"interior RMSE {e:.2f} HU"


def _check_gradients():
    net, batch = tiny_gradcheck_setup()
    res = gradient_check(net, batch, make_schedule(10), n_theta=10, n_phi=10)
    worst = max(r[-1] for r in res)
    return worst <= 1e-4, f"worst rel err {worst:.2e}"


def _check_emm_identity():
    torch.manual_seed(0)
    net = CLEARNet(NetConfig(side=16, T=10, base_channels=4, embed_dim=8, emm_channels=4))
    x = torch.randn(2, 3, 16, 16) * 100
    a = net(x, torch.tensor([2, 5]))
    b = net(x, torch.tensor([2, 5]), emm=(x[:, :1] + 5, x[:, 1:2]))
    return bool(torch.equal(a, b)), "bitwise no-op at init"


def _check_training():
    from .trainer import TrainConfig, init_params, make_optimizer, sample_batch, train_step

    cfg = TrainConfig(lr=1e-3, batch=4, base_channels=4, embed_dim=8, emm_channels=4)
    params = init_params(cfg, 16)
    opt = make_optimizer(params.net, cfg.lr)
    s = make_schedule(cfg.T)
    rng = np.random.default_rng(0)
    x0 = rng.normal(0, 200, (8, 16, 16)).astype(np.float32)
    xT = (x0 + rng.normal(0, 60, x0.shape)).astype(np.float32)
    batch = sample_batch((x0, xT, xT, xT), 0, cfg)
    with torch.no_grad():
        before = float(two_stage_loss(params.net, batch, s)[0])
    for _ in range(20):
        train_step(batch, params, s, opt)
    with torch.no_grad():
        after = float(two_stage_loss(params.net, batch, s)[0])
    return after < before, f"loss {before:.4f} -> {after:.4f} over 20 steps"


CHECKS = [
    ("schedule", _check_schedule),
    ("oracle_sampling", _check_oracle),
    ("mean_preservation", _check_mean),
    ("noise_moments", _check_noise),
    ("metric_oracles", _check_metrics),
    ("fbp_roundtrip", _check_fbp),
    ("emm_identity", _check_emm_identity),
    ("gradients", _check_gradients),
]
FULL_CHECKS = [("training_descent", _check_training)]


def run_selftest(full: bool = False, echo=print) -> bool:
    ok_all = True
    for name, fn in CHECKS + (FULL_CHECKS if full else []):
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as e:  # report and continue with the other checks
            ok, detail = False, f"{type(e).__name__}: {e}"
        ok_all &= ok
        echo(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.perf_counter() - t0:.2f}s)")
    return ok_all
