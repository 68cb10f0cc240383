import numpy as np
import pytest
import torch
import torch.nn as nn

from progdistill.condnet import NetConfig, VelocityNet

MINI = NetConfig(hidden=8, blocks=1, heads=2, time_embed_dim=8, context=3)


def tiny_run_config(seed=0, out="runs/tiny"):
    """Seconds-long pipeline config for plumbing tests."""
    from progdistill.dmd import DmdConfig
    from progdistill.pad import stage_configs
    from progdistill.runner.config import EvalConfig, RunConfig, TeacherConfig

    return RunConfig(
        seed=seed,
        out_dir=str(out),
        net=NetConfig(hidden=16, blocks=1, heads=2, time_embed_dim=8, context=3),
        teacher=TeacherConfig(steps=20, batch_size=16, sample_steps=4),
        dmd=DmdConfig(steps=3, critic_per_gen=2, batch_size=8),
        pad=stage_configs(3, 1, batch_size=8, sigma_r=0.01),
        eval=EvalConfig(n_eval=64),
    )


def mini_net(seed=0, frames=2, feature_dim=2, cond_channels=1) -> VelocityNet:
    torch.manual_seed(seed)
    return VelocityNet(frames, feature_dim, cond_channels, MINI).double()


def mini_inputs(batch=3, frames=2, feature_dim=2, cond_channels=1, seed=1):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(batch, frames, feature_dim, generator=g, dtype=torch.float64)
    cond = torch.rand(batch, 4 * frames, cond_channels, generator=g, dtype=torch.float64)
    return z, cond


class ConstVelocity(nn.Module):
    """v(z, t, c) = theta, broadcast to the latent shape."""

    def __init__(self, theta=0.3, frames=2, feature_dim=2):
        super().__init__()
        self.theta = nn.Parameter(torch.tensor(float(theta), dtype=torch.float64))
        self.frames, self.feature_dim = frames, feature_dim

    def forward(self, z, t, cond, drop_mask=None):
        return self.theta.expand_as(z)


class OracleVelocity(nn.Module):
    """Exact rectified-flow velocity eps - x toward a fixed clean target."""

    def __init__(self, x):
        super().__init__()
        self.register_buffer("x", x)
        self.dummy = nn.Parameter(torch.zeros((), dtype=x.dtype))

    def forward(self, z, t, cond, drop_mask=None):
        t = torch.as_tensor(t, dtype=z.dtype).reshape(-1, *([1] * (z.ndim - 1)))
        return (z - self.x) / t + 0 * self.dummy


class ZeroVelocity(nn.Module):
    def __init__(self, frames=2, feature_dim=2):
        super().__init__()
        self.dummy = nn.Parameter(torch.zeros(()))
        self.frames, self.feature_dim = frames, feature_dim

    def forward(self, z, t, cond, drop_mask=None):
        return torch.zeros_like(z) + 0 * self.dummy


def flat_params(module):
    return [p for p in module.parameters() if p.requires_grad]


def central_fd_grad(fn, params, h=1e-6):
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. every entry of ``params``."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(fn())
                flat[i] = orig - h
                down = float(fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def rel_error(a_list, b_list) -> float:
    a = torch.cat([x.reshape(-1) for x in a_list])
    b = torch.cat([x.reshape(-1) for x in b_list])
    return float((a - b).norm() / b.norm().clamp_min(1e-30))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
