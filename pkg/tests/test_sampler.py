from types import SimpleNamespace

import numpy as np
import pytest

from core.autodiff import Tensor
from core.conditioning import Conditioning, conditioning_from_scene
from core.errors import ConfigError, DimensionError
from core.sampler import SamplerConfig, edit_sample, euler_sample, guided_velocity
from core.scene_world import LatentImage


class ConstantVelocity:
    """Velocity field v(x, t) = value; records every call."""

    def __init__(self, value, grid=(4, 4), channels=4):
        self.config = SimpleNamespace(grid=grid, channels=channels)
        self.value = value
        self.calls = []

    def forward(self, x, t, cond, source=None):
        self.calls.append((t, cond, source))
        return Tensor(np.full(np.shape(x), self.value))


def test_guided_velocity_formula(rng):
    vc, vu = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    assert guided_velocity(vc, vu, 1.0) is vc
    assert np.array_equal(guided_velocity(vc, vu, 0.0), vu)
    assert np.allclose(guided_velocity(vc, vu, 3.5), vu + 3.5 * (vc - vu))


def test_euler_integrates_from_noise_at_t1_to_data_at_t0():
    model = ConstantVelocity(0.25)
    config = SamplerConfig(steps=4, cfg_scale=1.0, seed=11)
    out = euler_sample(model, Conditioning.null(), config)
    noise = np.random.default_rng(11).standard_normal((4, 4, 4))
    assert isinstance(out, LatentImage)
    assert np.allclose(out.values, noise - 0.25)
    assert [t for t, _, _ in model.calls] == [1.0, 0.75, 0.5, 0.25]


def test_guidance_adds_an_unconditional_pass(vocab, sample_scenes):
    cond = conditioning_from_scene(sample_scenes[0], vocab)
    guided = ConstantVelocity(0.0)
    euler_sample(guided, cond, SamplerConfig(steps=3, cfg_scale=3.5))
    assert len(guided.calls) == 6
    assert sum(c.is_null for _, c, _ in guided.calls) == 3

    plain = ConstantVelocity(0.0)
    euler_sample(plain, cond, SamplerConfig(steps=3, cfg_scale=1.0))
    assert len(plain.calls) == 3


def test_sampling_is_deterministic_per_seed(tiny_model, vocab, sample_scenes):
    cond = conditioning_from_scene(sample_scenes[0], vocab, prompt_len=tiny_model.config.prompt_len)
    config = SamplerConfig(steps=2, cfg_scale=2.0, seed=4)
    a = euler_sample(tiny_model, cond, config).values
    b = euler_sample(tiny_model, cond, config).values
    c = euler_sample(tiny_model, cond, SamplerConfig(steps=2, cfg_scale=2.0, seed=5)).values
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_edit_sample_passes_a_read_only_source(rng):
    model = ConstantVelocity(0.0)
    source = LatentImage(rng.normal(size=(4, 4, 4)))
    edit_sample(model, source, Conditioning.null(), SamplerConfig(steps=2, cfg_scale=1.0))
    seen = model.calls[0][2]
    assert np.array_equal(seen, source.values)
    assert not seen.flags.writeable
    assert source.values.flags.writeable


def test_edit_sample_rejects_source_on_other_grid(rng):
    with pytest.raises(DimensionError) as excinfo:
        edit_sample(ConstantVelocity(0.0), LatentImage(rng.normal(size=(8, 8, 4))), Conditioning.null())
    assert "model expects" in str(excinfo.value)


def test_sampler_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(steps=0).validate()
    with pytest.raises(ConfigError):
        SamplerConfig(cfg_scale=float("nan")).validate()
