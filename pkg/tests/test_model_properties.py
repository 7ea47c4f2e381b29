"""Gradient and causality checks for the recurrent student."""

import numpy as np
import pytest
import torch

from echodistill.data_model import VideoClip
from echodistill.model import ConvLSTMCell, ConvLSTMCellConfig, ModelConfig, build_model, forward, param_count


def _max_rel_error(fn, params, eps=1e-5):
    """Central finite differences on every entry of every tensor in ``params``.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-6)``; the floor sits well
    above the float64 round-off of a difference quotient at this step size
    (about 1e-11 for an O(1) loss), so vanishing gradients are compared in
    absolute terms.
    """
    loss = fn()
    grads = torch.autograd.grad(loss, params)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat, gflat = p.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = fn().item()
                flat[i] = old - eps
                down = fn().item()
                flat[i] = old
                numeric = (up - down) / (2 * eps)
                err = abs(numeric - gflat[i].item()) / max(1e-6, abs(numeric), abs(gflat[i].item()))
                worst = max(worst, err)
    return worst


@pytest.mark.parametrize("peephole", [False, True])
def test_convlstm_cell_gradients(peephole):
    torch.manual_seed(0)
    cell = ConvLSTMCell(ConvLSTMCellConfig(2, 3, uses_peephole=peephole)).double()
    with torch.no_grad():
        for p in cell.parameters():
            p.uniform_(-0.5, 0.5)
    x = torch.randn(4, 1, 2, 5, 5, dtype=torch.float64)
    target = torch.rand(1, 3, 5, 5, dtype=torch.float64)

    def loss():
        state = cell.zero_state(1, 5, 5, torch.float64)
        total = 0.0
        for t in range(len(x)):
            h, state = cell(x[t], state)
            total = total + ((h - target) ** 2).sum()
        return total

    assert _max_rel_error(loss, list(cell.parameters())) <= 1e-4


def test_tiny_model_gradients():
    cfg = ModelConfig(2, 1, channel_widths=(4, 6), residual_last_block=True, uses_peephole=True)
    assert param_count(cfg) <= 5000
    torch.manual_seed(0)
    model = build_model(cfg, seed=3).double()
    with torch.no_grad():
        # away from the zero-bias init so no ReLU sits on its kink
        for p in model.parameters():
            p.uniform_(-0.5, 0.5)
    frames = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    target = (torch.rand(1, 3, 8, 8, dtype=torch.float64) > 0.5).double()

    def loss():
        return torch.nn.functional.binary_cross_entropy_with_logits(model(frames), target)

    assert _max_rel_error(loss, list(model.parameters())) <= 1e-4


@pytest.mark.parametrize("case", range(10))
def test_outputs_never_depend_on_future_frames(case):
    rng = np.random.default_rng(case)
    cfg = ModelConfig(int(rng.integers(1, 4)), int(rng.integers(1, 3)), residual_last_block=bool(case % 2))
    model = build_model(cfg, seed=case)
    T = 6
    frames = rng.random((T, 16, 16))
    t = int(rng.integers(0, T - 1))
    mutated = frames.copy()
    mutated[t + 1 :] = rng.random((T - t - 1, 16, 16))
    prepad = int(rng.integers(0, 3))
    a = forward(model, VideoClip("a", frames, 30.0), prepad).masks
    b = forward(model, VideoClip("b", mutated, 30.0), prepad).masks
    assert np.array_equal(a[: t + 1], b[: t + 1])
    assert not np.array_equal(a[t + 1 :], b[t + 1 :])
