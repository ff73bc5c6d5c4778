import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from carotidseg.loss import (UNIFORM, LossMode, LossWeights, ScheduleState, atdl_weights,
                             component_losses, dice_loss, objective, weights_for)


def central_difference(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = fn(x).item()
        flat[i] = orig - h
        down = fn(x).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-300))


class TestDiceLoss:
    def test_perfect_overlap(self):
        y = torch.tensor([[1.0, 0.0], [1.0, 1.0]])
        assert dice_loss(y, y).item() == pytest.approx(0.0, abs=1e-6)

    def test_disjoint(self):
        y = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
        p = torch.tensor([[0.0, 1.0], [0.0, 0.0]])
        assert dice_loss(p, y).item() == pytest.approx(1.0, abs=1e-6)

    def test_hand_example(self):
        y = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        p = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
        assert dice_loss(p, y).item() == pytest.approx(0.5, abs=1e-6)

    def test_empty_vs_empty_is_zero(self):
        z = torch.zeros(4, 4)
        assert dice_loss(z, z).item() == 0.0

    def test_batched(self):
        y = torch.zeros(3, 4, 4)
        y[:, :2] = 1
        out = dice_loss(y.clone(), y)
        assert out.shape == (3,)

    def test_gradient_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(0)
        for _ in range(20):
            pred = torch.rand(8, 8, dtype=torch.float64, generator=gen).requires_grad_()
            target = (torch.rand(8, 8, generator=gen) > 0.5).double()
            dice_loss(pred, target).backward()
            fd = central_difference(lambda p: dice_loss(p, target), pred.detach().clone())
            assert rel_error(pred.grad, fd) <= 1e-4


class TestAtdlWeights:
    def test_endpoints(self):
        assert atdl_weights(0, 0, 0.5).as_tuple() == (0.0, 0.0, 1.0)
        w = atdl_weights(1, 1, 0.5)
        assert w.alpha == pytest.approx(1 / 3, abs=1e-15) and w.beta == pytest.approx(1 / 3, abs=1e-15)
        assert w.gamma == pytest.approx(1 / 3, abs=1e-15)

    def test_hand_evaluation(self):
        w = atdl_weights(0.5, 0.5, 0.5)
        assert w.alpha == pytest.approx(0.5 / (3 * 1.25))
        assert w.alpha == pytest.approx(0.13333, abs=1e-5)
        assert w.gamma == pytest.approx(0.73333, abs=1e-5)

    @pytest.mark.parametrize("a", [0.1, 0.5, 2.0])
    def test_monotone_on_grid(self, a):
        grid = np.linspace(0, 1, 101)
        alphas = np.array([atdl_weights(x, x, a).alpha for x in grid])
        assert np.all(np.diff(alphas) > 0)
        assert alphas[-1] == pytest.approx(1 / 3)

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(1e-3, 10))
    def test_invariants(self, l1, l2, a):
        w = atdl_weights(l1, l2, a)
        assert abs(w.alpha + w.beta + w.gamma - 1) <= 1e-12
        assert min(w.as_tuple()) >= 0
        assert w.gamma >= 1 / 3 - 1e-12
        assert w.alpha <= 1 / 3 + 1e-15 and w.beta <= 1 / 3 + 1e-15

    def test_rejects_nonpositive_a(self):
        with pytest.raises(ValueError):
            atdl_weights(0.5, 0.5, 0.0)


class TestSchedule:
    def test_first_half_uniform(self):
        assert weights_for("ATDL", ScheduleState(10, 50), 0.1, 0.2) == UNIFORM
        assert weights_for("ATDL", ScheduleState(24, 50), 0.1, 0.2) == UNIFORM

    def test_second_half_adaptive(self):
        w = weights_for("ATDL", ScheduleState(30, 50, 0.5), 0.1, 0.2)
        assert w.alpha == pytest.approx(0.1 / (3 * 1.45))
        assert w.alpha == pytest.approx(0.02299, abs=1e-5)
        assert w.beta == pytest.approx(0.04762, abs=1e-5)
        assert w.gamma == pytest.approx(0.92939, abs=1e-5)
        assert ScheduleState(25, 50).adaptive

    def test_odd_epoch_count_rounds_up(self):
        assert not ScheduleState(2, 5).adaptive
        assert ScheduleState(3, 5).adaptive

    def test_tdl_weights_uniform(self):
        assert weights_for("TDL").as_tuple() == pytest.approx((1 / 3, 1 / 3, 1 / 3))

    def test_atdl_needs_state(self):
        pred = torch.rand(1, 2, 4, 4)
        with pytest.raises(ValueError):
            objective(pred, pred[:, 0] > 0.5, pred[:, 1] > 0.5, "ATDL", None)

    def test_bad_state(self):
        with pytest.raises(ValueError):
            ScheduleState(5, 5)

    def test_weights_invariant(self):
        with pytest.raises(ValueError):
            LossWeights(0.5, 0.5, 0.5)


def random_case(gen, batch=1):
    mab = torch.zeros(batch, 8, 8)
    mab[:, 1:7, 1:7] = 1
    lib = torch.zeros(batch, 8, 8)
    lib[:, 3:5, 2:6] = 1
    pred = torch.rand(batch, 2, 8, 8, dtype=torch.float64, generator=gen)
    return pred, mab.double(), lib.double()


class TestObjective:
    @pytest.mark.parametrize("mode", list(LossMode))
    def test_perfect_prediction(self, mode):
        _, mab, lib = random_case(torch.Generator().manual_seed(0))
        pred = torch.stack([mab, lib], dim=1)
        loss, _ = objective(pred, mab, lib, mode, ScheduleState(40, 50))
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_mode_compositions(self):
        pred, mab, lib = random_case(torch.Generator().manual_seed(1))
        l_mab, l_lib, l_cvw = (t.item() for t in component_losses(pred, mab, lib))
        assert objective(pred, mab, lib, "SDL")[0].item() == pytest.approx(l_mab + l_lib)
        assert objective(pred, mab, lib, "DDL")[0].item() == pytest.approx(0.5 * (l_mab + l_lib))
        assert objective(pred, mab, lib, "TDL")[0].item() == pytest.approx((l_mab + l_lib + l_cvw) / 3)
        w = atdl_weights(l_mab, l_lib, 0.5)
        expected = w.alpha * l_mab + w.beta * l_lib + w.gamma * l_cvw
        assert objective(pred, mab, lib, "ATDL", ScheduleState(9, 10))[0].item() == pytest.approx(expected)

    def test_cvw_target_is_wall(self):
        pred, mab, lib = random_case(torch.Generator().manual_seed(2))
        wall_pred = torch.stack([mab, lib], dim=1)
        _, _, l_cvw = component_losses(wall_pred, mab, lib)
        assert l_cvw.item() == pytest.approx(0.0, abs=1e-6)

    @pytest.mark.parametrize("mode", ["SDL", "DDL", "TDL", "ATDL"])
    def test_gradients_match_finite_differences(self, mode):
        gen = torch.Generator().manual_seed(3)
        state = ScheduleState(7, 10)
        for _ in range(20):
            pred, mab, lib = random_case(gen)
            _, info = objective(pred, mab, lib, mode, state)
            # ATDL weights are constants of the gradient; freeze them for the FD oracle
            fixed = None if mode == "SDL" else LossWeights(info["alpha"], info["beta"], info["gamma"])
            p = pred.clone().requires_grad_()
            objective(p, mab, lib, mode, state)[0].backward()
            fd = central_difference(lambda q: objective(q, mab, lib, mode, state, weights=fixed)[0],
                                    pred.clone())
            assert rel_error(p.grad, fd) <= 1e-4

    def test_adaptive_weights_are_detached(self):
        gen = torch.Generator().manual_seed(4)
        pred, mab, lib = random_case(gen, batch=2)
        state = ScheduleState(9, 10)
        p1 = pred.clone().requires_grad_()
        _, info = objective(p1, mab, lib, "ATDL", state)
        objective(p1, mab, lib, "ATDL", state)[0].backward()
        p2 = pred.clone().requires_grad_()
        fixed = LossWeights(info["alpha"], info["beta"], info["gamma"])
        objective(p2, mab, lib, "TDL", weights=fixed)[0].backward()
        assert torch.equal(p1.grad, p2.grad)

    def test_batch_losses_are_means(self):
        gen = torch.Generator().manual_seed(5)
        pred, mab, lib = random_case(gen, batch=3)
        _, info = objective(pred, mab, lib, "TDL")
        per = [dice_loss(pred[i, 0], mab[i]).item() for i in range(3)]
        assert info["l_mab"] == pytest.approx(np.mean(per))
        assert not math.isnan(info["gamma"])
