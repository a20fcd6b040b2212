import math

import numpy as np
import pytest
import torch

import oracles
from meniseg.losses import bce_loss, combined_loss, dice_loss, get_loss


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


class TestBCE:
    def test_logit_zero_target_one(self):
        assert float(bce_loss(torch.tensor([0.0]), torch.tensor([1.0]))) == pytest.approx(
            math.log(2), abs=1e-7
        )

    def test_saturated_positive(self):
        loss = float(bce_loss(torch.tensor([100.0]), torch.tensor([1.0])))
        assert math.isfinite(loss) and loss < 1e-6

    def test_saturated_negative_on_empty_target(self):
        loss = float(bce_loss(torch.full((4, 4), -100.0), torch.zeros(4, 4)))
        assert math.isfinite(loss) and loss < 1e-6

    def test_no_overflow_at_large_magnitudes(self):
        logits = torch.tensor([100.0, -100.0, 100.0, -100.0])
        targets = torch.tensor([0.0, 1.0, 1.0, 0.0])
        assert math.isfinite(float(bce_loss(logits, targets)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            bce_loss(torch.zeros(3), torch.zeros(4))


class TestDiceLoss:
    def test_perfect_saturated_prediction(self):
        targets = (torch.rand(4, 4, 2) > 0.5).float()
        logits = torch.where(targets > 0, 50.0, -50.0)
        assert float(dice_loss(logits, targets)) < 1e-3

    def test_empty_target_stays_finite(self):
        logits = torch.randn(4, 4, 2)
        loss = float(dice_loss(logits, torch.zeros(4, 4, 2), smooth=1.0))
        assert math.isfinite(loss) and 0.0 <= loss <= 1.0

    def test_range(self):
        logits = torch.randn(5, 5)
        targets = (torch.rand(5, 5) > 0.5).float()
        assert 0.0 <= float(dice_loss(logits, targets)) <= 1.0

    def test_gradient_matches_central_differences(self):
        torch.manual_seed(3)
        logits = torch.randn(4, 4, 2, dtype=torch.float32, requires_grad=True)
        targets = (torch.rand(4, 4, 2) > 0.5).float()
        loss = dice_loss(logits, targets)
        loss.backward()
        analytic = logits.grad.numpy().copy()

        def f(x):
            return float(dice_loss(torch.from_numpy(x.astype(np.float32)), targets))

        numeric = oracles.central_difference_grad(f, logits.detach().numpy().astype(np.float64), h=1e-2)
        assert rel_error(analytic, numeric) < 1e-3


class TestCombinedLoss:
    def test_equals_sum_of_parts(self):
        torch.manual_seed(0)
        logits = torch.randn(6, 5, dtype=torch.float64)
        targets = (torch.rand(6, 5) > 0.5).double()
        total = float(combined_loss(logits, targets))
        parts = float(bce_loss(logits, targets)) + float(dice_loss(logits, targets))
        assert total == pytest.approx(parts, abs=1e-12)

    def test_perfect_prediction_near_zero(self):
        targets = (torch.rand(4, 4, 4) > 0.5).float()
        logits = torch.where(targets > 0, 60.0, -60.0)
        assert float(combined_loss(logits, targets)) < 1e-3

    def test_single_voxel_worsening_never_decreases_loss(self):
        torch.manual_seed(1)
        targets = (torch.rand(3, 3, 3) > 0.5).float()
        logits = torch.randn(3, 3, 3)
        base = float(combined_loss(logits, targets))
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    worse = logits.clone()
                    # push the probability away from the target
                    worse[i, j, k] += -0.5 if targets[i, j, k] > 0 else 0.5
                    assert float(combined_loss(worse, targets)) >= base - 1e-9

    def test_gradient_matches_central_differences(self):
        torch.manual_seed(7)
        logits = torch.randn(4, 4, 2, dtype=torch.float32, requires_grad=True)
        targets = (torch.rand(4, 4, 2) > 0.5).float()
        combined_loss(logits, targets).backward()
        analytic = logits.grad.numpy().copy()

        def f(x):
            return float(combined_loss(torch.from_numpy(x.astype(np.float32)), targets))

        numeric = oracles.central_difference_grad(f, logits.detach().numpy().astype(np.float64), h=1e-2)
        assert rel_error(analytic, numeric) < 1e-3

    def test_permutation_invariance(self):
        torch.manual_seed(5)
        logits = torch.randn(24, dtype=torch.float64)
        targets = (torch.rand(24) > 0.5).double()
        perm = torch.randperm(24)
        for fn in (bce_loss, dice_loss, combined_loss):
            assert float(fn(logits, targets)) == pytest.approx(
                float(fn(logits[perm], targets[perm])), abs=1e-12
            )


def test_get_loss_lookup():
    assert get_loss("bce") is bce_loss
    assert get_loss("bce_plus_dice") is combined_loss
    with pytest.raises(ValueError, match="unknown loss"):
        get_loss("focal")
