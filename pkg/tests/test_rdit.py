import numpy as np
import pytest

from core.attention_mask import HOI, PROMPT
from core.autodiff import Tensor, grad_check, precision
from core.conditioning import Conditioning, conditioning_from_scene
from core.errors import ConfigError, ContractError, DimensionError, NumericError
from core.geometry import between_region
from core.rdit import ModelConfig, RDiT, flow_match_loss, interpolate, prepare_sequence


def small_config(**overrides):
    values = dict(d_model=24, n_heads=2, n_layers=2, d_text=8, grid=(4, 4), k_hoi=24, l_max=3, prompt_len=6)
    values.update(overrides)
    return ModelConfig(**values)


def wake_up(model, rng, gate=0.5):
    """Give the zero-initialized modulation, output and gate weights random values."""
    for name, p in model.named_parameters().items():
        if name.startswith("final.") or ".mod." in name:
            p.data = rng.normal(0.0, 0.2, size=p.shape).astype(p.dtype)
    model.encoder.gate.data = np.asarray(gate, dtype=model.encoder.gate.dtype)
    return model


class ConstantModel:
    def __init__(self, value):
        self.value = value

    def forward(self, noisy, t, cond, source=None):
        return Tensor(np.broadcast_to(self.value, np.shape(noisy)).copy())


def test_zero_initialized_model_predicts_zero(tiny_model, tiny_config, vocab, sample_scenes, rng):
    cond = conditioning_from_scene(sample_scenes[0], vocab, prompt_len=tiny_config.prompt_len)
    noisy = rng.normal(size=(8, 8, 4))
    out = tiny_model.forward(noisy, 0.4, cond)
    assert out.shape == noisy.shape
    assert not out.data.any()
    edit = tiny_model.forward(noisy, 0.4, cond, source=rng.normal(size=(8, 8, 4)))
    assert edit.shape == noisy.shape


def test_latent_shape_mismatch_raises(tiny_model, vocab, sample_scenes, rng):
    cond = conditioning_from_scene(sample_scenes[0], vocab)
    with pytest.raises(DimensionError) as excinfo:
        tiny_model.forward(rng.normal(size=(4, 4, 4)), 0.5, cond)
    assert "model expects" in str(excinfo.value)


def test_instance_order_does_not_change_output(vocab, sample_scenes, rng):
    config = small_config()
    model = wake_up(RDiT(config, len(vocab), np.random.default_rng(3)), rng)
    cond = conditioning_from_scene(sample_scenes[1], vocab, prompt_len=config.prompt_len)
    swapped = Conditioning(cond.prompt_ids, tuple(reversed(cond.hois)))
    noisy = rng.normal(size=(4, 4, 4))
    a = model.forward(noisy, 0.3, cond).data
    b = model.forward(noisy, 0.3, swapped).data
    assert a.any()
    assert np.array_equal(a, b)


def test_flow_matching_gradients_match_finite_differences(vocab, sample_scenes):
    rng = np.random.default_rng(7)
    with precision(np.float64):
        config = small_config()
        model = wake_up(RDiT(config, len(vocab), np.random.default_rng(1)), rng)
        cond = conditioning_from_scene(sample_scenes[1], vocab, prompt_len=config.prompt_len)
        x0, noise = rng.normal(size=(4, 4, 4)), rng.normal(size=(4, 4, 4))
        params = list(model.named_parameters().values())

        def loss():
            return flow_match_loss(model, x0, cond, rng, noise=noise, t=0.37)

        error = grad_check(loss, params, h=1e-4, floor=1e-3, max_entries=8, rng=np.random.default_rng(0))
    assert error <= 1e-5


def test_null_conditioning_leaves_only_image_tokens(tiny_model):
    prepared = prepare_sequence(tiny_model, Conditioning.null(), with_source=False)
    assert [seg.kind for seg in prepared.layout.segments] == ["image_noise"]
    assert prepared.mask.allowed.all()


def test_prompt_only_conditioning_is_a_plain_dit(tiny_model, vocab, sample_scenes):
    cond = conditioning_from_scene(sample_scenes[0], vocab, prompt_len=6)
    prepared = prepare_sequence(tiny_model, Conditioning(cond.prompt_ids, ()), with_source=True)
    kinds = [seg.kind for seg in prepared.layout.segments]
    assert HOI not in kinds and kinds[0] == PROMPT
    assert prepared.mask.allowed.all()


def test_between_operator_changes_the_action_region(vocab, sample_scenes):
    config = small_config(grid=(8, 8), action_region="between")
    model = RDiT(config, len(vocab))
    scene = sample_scenes[0]
    prepared = prepare_sequence(model, conditioning_from_scene(scene, vocab), with_source=False)
    inst = prepared.instances[0]
    expected = between_region(scene.instances[0].subject_box, scene.instances[0].object_box, 8, 8)
    assert inst.regions["action"].cells == expected.cells


def test_model_config_validation():
    with pytest.raises(ConfigError) as excinfo:
        small_config(d_model=32, n_heads=4).validate()
    assert "divisible by 6" in str(excinfo.value)
    with pytest.raises(ConfigError):
        small_config(action_region="nearest").validate()
    with pytest.raises(ConfigError):
        small_config(n_heads=5).validate()


def test_interpolate_endpoints_and_errors(rng):
    x0, x1 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    assert np.array_equal(interpolate(x0, x1, 0.0), x0)
    assert np.array_equal(interpolate(x0, x1, 1.0), x1)
    assert np.allclose(interpolate(x0, x1, 0.5), (x0 + x1) / 2)
    with pytest.raises(DimensionError):
        interpolate(x0, x1[:1], 0.5)
    with pytest.raises(ContractError) as excinfo:
        interpolate(x0, x1, 1.5)
    assert "[0, 1]" in str(excinfo.value)


def test_flow_match_loss_reference_predictors(rng):
    with precision(np.float64):
        x0, noise = rng.normal(size=(4, 4, 4)), rng.normal(size=(4, 4, 4))
        cond = Conditioning.null()
        oracle = ConstantModel(noise - x0)
        assert float(flow_match_loss(oracle, x0, cond, rng, noise=noise).data) == 0.0
        zero = float(flow_match_loss(ConstantModel(0.0), x0, cond, rng, noise=noise).data)
        assert zero == pytest.approx(np.mean((noise - x0) ** 2))
        assert zero >= 0.0


def test_flow_match_loss_surfaces_non_finite_values(rng):
    with pytest.raises(NumericError) as excinfo:
        flow_match_loss(ConstantModel(np.inf), np.zeros((2, 2, 4)), Conditioning.null(), rng)
    assert "not finite" in str(excinfo.value)
