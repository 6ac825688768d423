import numpy as np
import pytest
import torch

from geomask.diffusion import DiffusionSchedule, sample_x0, timestep_embedding
from geomask.errors import InvalidArgumentError


def test_linear_schedule():
    s = DiffusionSchedule(1000, 1e-4, 0.02)
    assert s.betas[0] == pytest.approx(1e-4)
    assert s.betas[-1] == pytest.approx(0.02)
    assert np.allclose(np.diff(s.betas), (0.02 - 1e-4) / 999)
    ab = s.alphas_cumprod
    assert np.all(np.diff(ab) < 0)
    assert np.all((ab > 0) & (ab < 1))


@pytest.mark.parametrize("args", [(1000, 0.0, 0.02), (1000, 0.02, 0.01), (1000, 1e-4, 1.0), (0, 1e-4, 0.02)])
def test_schedule_validation(args):
    with pytest.raises(InvalidArgumentError):
        DiffusionSchedule(*args)


def test_strided_timesteps():
    s = DiffusionSchedule()
    assert s.strided_timesteps(1).tolist() == [999]
    steps = s.strided_timesteps(10)
    assert len(steps) == 10 and steps[0] == 999 and steps[-1] == 0
    assert np.all(np.diff(steps) < 0)
    assert len(s.strided_timesteps(1000)) == 1000
    with pytest.raises(InvalidArgumentError):
        s.strided_timesteps(1001)


def test_q_sample_endpoints():
    s = DiffusionSchedule()
    x0 = torch.ones(2, 1, 4, 4)
    noise = torch.zeros_like(x0)
    out = s.q_sample(x0, torch.tensor([0, 999]), noise)
    assert torch.allclose(out[0], x0[0] * np.sqrt(s.alphas_cumprod[0]))
    assert out[1].mean().item() < 0.01


def test_timestep_embedding_shape():
    e = timestep_embedding(torch.tensor([0, 5, 999]), 7)
    assert e.shape == (3, 7)
    assert torch.all(e[:, -1] == 0)


def test_sampler_with_exact_denoiser_recovers_target():
    s = DiffusionSchedule()
    target = torch.full((1, 1, 4, 4), 0.3)
    out = sample_x0(lambda x, t: target.expand_as(x), s, (1, 1, 4, 4), 10, torch.Generator().manual_seed(0))
    assert torch.allclose(out, target)


def test_sampler_deterministic():
    s = DiffusionSchedule()

    def shrink(x, t):
        return 0.5 * x

    a = sample_x0(shrink, s, (2, 1, 4, 4), 10, torch.Generator().manual_seed(3))
    b = sample_x0(shrink, s, (2, 1, 4, 4), 10, torch.Generator().manual_seed(3))
    assert torch.equal(a, b)
