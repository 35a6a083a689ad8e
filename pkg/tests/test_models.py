import copy

import numpy as np
import pytest
import torch

from structsr.errors import ParameterError, ShapeError
from structsr.models import (
    Adapter,
    Denoiser,
    DenoiserConfig,
    Generator,
    LoRAConv2d,
    apply_lora,
    cfg_combine,
    freeze,
    load_checkpoint,
    lora_parameters,
    save_checkpoint,
)

SMALL = DenoiserConfig(base_width=8, width_mults=(1, 2), emb_dim=16, num_classes=3, groups=2)


@pytest.fixture()
def small_denoiser():
    torch.manual_seed(0)
    return Denoiser(SMALL)


def rand_inputs(batch=2, size=16, classes=3):
    torch.manual_seed(1)
    z = torch.randn(batch, 3, size, size)
    t = torch.randint(1, 1001, (batch,))
    tok = torch.randint(0, classes, (batch,))
    return z, t, tok


class TestDenoiser:
    def test_output_shape(self, small_denoiser):
        z, t, tok = rand_inputs()
        assert small_denoiser(z, t, tok).shape == z.shape

    def test_deterministic_forward(self, small_denoiser):
        z, t, tok = rand_inputs()
        with torch.no_grad():
            assert torch.equal(small_denoiser(z, t, tok), small_denoiser(z, t, tok))

    def test_zero_feature_stack_equals_no_features(self, small_denoiser):
        z, t, tok = rand_inputs()
        feats = [torch.zeros(2, 8, 16, 16), torch.zeros(2, 16, 8, 8)]
        with torch.no_grad():
            assert torch.equal(
                small_denoiser(z, t, tok, feats), small_denoiser(z, t, tok)
            )

    def test_feature_shape_mismatch(self, small_denoiser):
        z, t, tok = rand_inputs()
        feats = [torch.zeros(2, 8, 7, 7), torch.zeros(2, 16, 8, 8)]
        with pytest.raises(ShapeError):
            small_denoiser(z, t, tok, feats)

    def test_zero_init_output_head(self, small_denoiser):
        z, t, tok = rand_inputs()
        with torch.no_grad():
            assert torch.count_nonzero(small_denoiser(z, t, tok)) == 0

    def test_null_token_differs_after_nudge(self, small_denoiser):
        z, t, _ = rand_inputs()
        with torch.no_grad():
            small_denoiser.out_conv.weight.normal_(std=0.1)
            a = small_denoiser(z, t, torch.tensor([0, 0]))
            b = small_denoiser(z, t, torch.tensor([SMALL.null_token] * 2))
        assert not torch.equal(a, b)


class TestCfgCombine:
    def test_guidance_one_returns_cond_exactly(self):
        c, u = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
        assert torch.equal(cfg_combine(c, u, 1.0), c)

    def test_guidance_zero_returns_uncond_exactly(self):
        c, u = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
        assert torch.equal(cfg_combine(c, u, 0.0), u)

    def test_equal_inputs_any_guidance(self):
        c = torch.randn(2, 3, 4, 4)
        out = cfg_combine(c, c.clone(), 3.7)
        assert torch.allclose(out, c)

    def test_extrapolation_value(self):
        c = torch.full((1, 1, 1, 1), 2.0)
        u = torch.full((1, 1, 1, 1), 1.0)
        assert cfg_combine(c, u, 2.0).item() == pytest.approx(3.0)

    def test_validation(self):
        c = torch.zeros(1, 3, 4, 4)
        with pytest.raises(ShapeError):
            cfg_combine(c, torch.zeros(1, 3, 5, 5), 1.0)
        with pytest.raises(ParameterError):
            cfg_combine(c, c, -0.5)


class TestLoRA:
    def test_zero_multiplier_reproduces_base(self):
        torch.manual_seed(2)
        base = torch.nn.Conv2d(4, 6, 3, padding=1)
        wrapped = LoRAConv2d(copy.deepcopy(base), rank=4, multiplier=0.0)
        with torch.no_grad():
            wrapped.up.normal_()
            wrapped.down.normal_()
        x = torch.randn(2, 4, 8, 8)
        with torch.no_grad():
            assert torch.equal(wrapped(x), base(x))

    def test_zero_init_up_reproduces_base_at_start(self):
        torch.manual_seed(2)
        base = torch.nn.Conv2d(4, 6, 3, padding=1)
        wrapped = LoRAConv2d(copy.deepcopy(base), rank=4, multiplier=1.0)
        x = torch.randn(2, 4, 8, 8)
        with torch.no_grad():
            assert torch.equal(wrapped(x), base(x))

    def test_delta_has_bounded_rank(self):
        base = torch.nn.Conv2d(4, 6, 3, padding=1)
        wrapped = LoRAConv2d(base, rank=2)
        with torch.no_grad():
            wrapped.up.normal_()
        delta = (wrapped.up @ wrapped.down).detach().double()
        svals = torch.linalg.svdvals(delta)
        significant = (svals > 1e-6 * svals.max()).sum().item()
        assert significant <= 2

    def test_apply_lora_freezes_base_and_exposes_factors(self, small_denoiser):
        model = apply_lora(freeze(copy.deepcopy(small_denoiser)), rank=2)
        factors = list(lora_parameters(model))
        assert factors and all(p.requires_grad for p in factors)
        others = [
            p for p in model.parameters() if all(p is not f for f in factors)
        ]
        assert others and all(not p.requires_grad for p in others)

    def test_wrapped_model_matches_original_at_init(self, small_denoiser):
        model = apply_lora(freeze(copy.deepcopy(small_denoiser)), rank=2)
        z, t, tok = rand_inputs()
        with torch.no_grad():
            assert torch.equal(model(z, t, tok), small_denoiser(z, t, tok))


class TestAdapter:
    def test_feature_shapes_match_ports(self, small_denoiser):
        adapter = Adapter(SMALL.widths, width=8, groups=2)
        feats = adapter(torch.randn(2, 4, 16, 16))
        assert [tuple(f.shape) for f in feats] == [(2, 8, 16, 16), (2, 16, 8, 8)]

    def test_zero_init_heads_give_zero_features(self):
        torch.manual_seed(3)
        adapter = Adapter(SMALL.widths, width=8, groups=2)
        feats = adapter(torch.randn(2, 4, 16, 16))
        assert all(torch.count_nonzero(f) == 0 for f in feats)


class TestGenerator:
    @pytest.fixture()
    def generator(self, small_denoiser):
        torch.manual_seed(4)
        return Generator(
            small_denoiser, scale=4, t_fix=999, a_fix=0.0064, b_fix=0.99998,
            lora_rank=2, input_width=8,
        )

    def test_output_dims_and_range(self, generator):
        lq = torch.rand(2, 3, 4, 4)
        out = generator(lq, torch.tensor([0, 1]))
        assert out.shape == (2, 3, 16, 16)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_finite_on_zero_input(self, generator):
        out = generator(torch.zeros(1, 3, 4, 4), torch.tensor([0]))
        assert torch.isfinite(out).all()

    def test_single_forward_pass_grads_only_touch_trainable(self, generator):
        lq = torch.rand(1, 3, 4, 4)
        z = generator.forward_latent(lq, torch.tensor([0]))
        z.square().mean().backward()
        for name, p in generator.named_parameters():
            if p.requires_grad:
                continue
            assert p.grad is None, name

    def test_rejects_tiny_a(self, small_denoiser):
        with pytest.raises(ParameterError):
            Generator(small_denoiser, scale=4, t_fix=1000, a_fix=1e-12, b_fix=1.0)


class TestCheckpoint:
    def test_round_trip_and_magic(self, tmp_path, small_denoiser):
        path = tmp_path / "m.pt"
        save_checkpoint(path, "teacher", small_denoiser, {"num_steps": 10},
                        {"seed": 0}, 5)
        payload = load_checkpoint(path, "teacher")
        clone = Denoiser(SMALL)
        clone.load_state_dict(payload["state"])
        z, t, tok = rand_inputs()
        with torch.no_grad():
            assert torch.equal(clone(z, t, tok), small_denoiser(z, t, tok))
        assert payload["iteration"] == 5

    def test_kind_mismatch(self, tmp_path, small_denoiser):
        path = tmp_path / "m.pt"
        save_checkpoint(path, "teacher", small_denoiser, {}, {}, 0)
        with pytest.raises(ParameterError):
            load_checkpoint(path, "adapter")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.pt"
        torch.save({"magic": "nope"}, path)
        with pytest.raises(ParameterError):
            load_checkpoint(path)
