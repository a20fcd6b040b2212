import numpy as np
import pytest
import torch
import torch.nn as nn

import oracles
from meniseg.losses import combined_loss
from meniseg.metrics import dice_score
from meniseg.phantom import PhantomSpec, generate_phantom
from meniseg.preprocess import compute_crop_box, crop, window_rescale
from meniseg.unet3d import (
    OAI_UNET3D_PARAM_COUNT,
    UNet3DConfig,
    build_unet3d,
    parameter_count,
    predict_mask_volume,
)

class TestConfig:
    def test_defaults_match_protocol(self):
        cfg = UNet3DConfig()
        assert cfg.base_features == 16
        assert cfg.depth == 3
        assert cfg.features_at(0) == 16
        assert cfg.features_at(2) == 64

    def test_validation(self):
        with pytest.raises(ValueError, match="base_features"):
            UNet3DConfig(base_features=0).validate()
        with pytest.raises(ValueError, match="depth"):
            UNet3DConfig(depth=0).validate()
        with pytest.raises(ValueError, match="norm"):
            UNet3DConfig(norm="group").validate()


class TestShapes:
    @pytest.mark.parametrize("shape", [(16, 16, 16), (20, 24, 16)])
    def test_output_shape_equals_input_shape(self, shape):
        model = build_unet3d(UNet3DConfig()).eval()
        x = torch.randn(1, 1, *shape)
        with torch.no_grad():
            y = model(x)
        assert y.shape == (1, 1, *shape)

    def test_odd_extents_via_internal_padding(self):
        model = build_unet3d(UNet3DConfig(base_features=4, depth=2)).eval()
        x = torch.randn(2, 1, 11, 13, 9)
        with torch.no_grad():
            y = model(x)
        assert y.shape == (2, 1, 11, 13, 9)

    def test_rejects_wrong_channels(self):
        model = build_unet3d()
        with pytest.raises(ValueError, match="expected input"):
            model(torch.randn(1, 2, 16, 16, 16))

    def test_finite_logits_on_phantom(self):
        volume, _ = generate_phantom(PhantomSpec(seed=1))
        model = build_unet3d(UNet3DConfig(base_features=4, depth=2)).eval()
        x = torch.from_numpy(volume.data)[None, None]
        with torch.no_grad():
            y = model(x)
        assert torch.isfinite(y).all()

    def test_identical_inputs_identical_outputs(self):
        model = build_unet3d(UNet3DConfig(base_features=4, depth=2)).eval()
        x = torch.randn(1, 1, 16, 16, 16)
        batch = torch.cat([x, x])
        with torch.no_grad():
            y = model(batch)
        assert torch.equal(y[0], y[1])


class TestParameterCount:
    def test_single_conv_hand_count(self):
        assert parameter_count(nn.Conv3d(1, 16, 3)) == 448  # 1*16*27 + 16

    def test_freeze_all_gives_zero(self):
        model = build_unet3d(UNet3DConfig(base_features=2, depth=1))
        model.requires_grad_(False)
        assert parameter_count(model, trainable_only=True) == 0
        assert parameter_count(model, trainable_only=False) > 0

    def test_default_config_matches_formula_oracle(self):
        cfg = UNet3DConfig()
        model = build_unet3d(cfg)
        got = parameter_count(model)
        want = oracles.unet3d_param_formula(cfg)
        assert got == want
        # The full-scale OAI configuration is recorded for comparison only;
        # its exact architecture is not recoverable from the published count.
        print(f"default config params: {got}; OAI reference: {OAI_UNET3D_PARAM_COUNT}")

    @pytest.mark.parametrize(
        "cfg",
        [
            UNet3DConfig(base_features=8, depth=2),
            UNet3DConfig(base_features=4, depth=3, convs_per_block=1),
            UNet3DConfig(base_features=4, depth=2, norm="instance"),
            UNet3DConfig(base_features=4, depth=2, norm="none"),
        ],
    )
    def test_formula_oracle_across_configs(self, cfg):
        assert parameter_count(build_unet3d(cfg)) == oracles.unet3d_param_formula(cfg)

    def test_doubling_width_scales_quadratically(self):
        small = parameter_count(build_unet3d(UNet3DConfig(base_features=16)))
        big = parameter_count(build_unet3d(UNet3DConfig(base_features=32)))
        assert 3.5 < big / small < 4.5


class TestGradients:
    def test_combined_loss_gradients_match_finite_differences(self):
        torch.manual_seed(2)
        model = build_unet3d(UNet3DConfig(base_features=2, depth=2, norm="batch")).double().eval()
        x = torch.randn(1, 1, 8, 8, 8, dtype=torch.float64)
        targets = (torch.rand(1, 1, 8, 8, 8) > 0.5).double()

        loss = combined_loss(model(x), targets)
        loss.backward()

        params = [p for p in model.parameters() if p.grad is not None]
        flat_grad = torch.cat([p.grad.reshape(-1) for p in params])
        # sample 10 indices among weights with non-negligible gradient
        candidates = torch.nonzero(flat_grad.abs() > 1e-4).reshape(-1)
        rng = np.random.default_rng(0)
        picks = rng.choice(candidates.numpy(), size=10, replace=False)

        offsets = np.cumsum([0] + [p.numel() for p in params])
        h = 3e-5
        for flat_idx in picks:
            p_idx = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
            local = int(flat_idx - offsets[p_idx])
            param = params[p_idx]
            with torch.no_grad():
                orig = param.reshape(-1)[local].item()
                param.reshape(-1)[local] = orig + h
                up = float(combined_loss(model(x), targets))
                param.reshape(-1)[local] = orig - h
                down = float(combined_loss(model(x), targets))
                param.reshape(-1)[local] = orig
            numeric = (up - down) / (2 * h)
            analytic = float(flat_grad[flat_idx])
            rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic))
            assert rel < 1e-5, f"param {p_idx}[{local}]: {analytic} vs {numeric}"


class TestOverfit:
    def test_overfit_single_phantom_reaches_high_dice(self):
        torch.manual_seed(0)
        volume, mask = generate_phantom(PhantomSpec(seed=13))
        box = compute_crop_box([mask], margin_voxels=3)
        volume = crop(window_rescale(volume), box)
        mask_c = crop(mask, box)

        model = build_unet3d(UNet3DConfig(base_features=8, depth=2))
        x = torch.from_numpy(volume.data)[None, None]
        y = torch.from_numpy(mask_c.data.astype(np.float32))[None, None]
        optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
        model.train()
        for _ in range(150):
            optimizer.zero_grad()
            loss = combined_loss(model(x), y)
            loss.backward()
            optimizer.step()
            if loss.item() < 0.01:
                break

        predicted = predict_mask_volume(model, volume)
        assert dice_score(mask_c, predicted) >= 0.99
