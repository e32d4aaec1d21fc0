import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dynct.errors import NumericalError, ValidationError
from dynct.neural_field import (
    GridEncoding,
    NeuralField,
    NFConfig,
    grid_coords,
    load_nf,
    nf_forward,
    nf_gradient,
    param_count,
    posenc,
    render_grid,
    save_nf,
)


def test_posenc_examples():
    assert np.allclose(posenc(np.zeros(3), 4), np.tile([0, 0, 0, 1, 1, 1], (4, 1)))
    rows = posenc(np.ones(3), 2)
    assert np.allclose(rows[0], [1, 1, 1, 0, 0, 0], atol=1e-15)
    assert np.allclose(rows[1], [0, 0, 0, -1, -1, -1], atol=1e-15)


def test_posenc_torch_matches_numpy():
    nu = np.random.default_rng(0).random((5, 3))
    assert np.allclose(posenc(torch.as_tensor(nu), 6).numpy(), posenc(nu, 6))


@pytest.mark.parametrize("bad", [[-0.1, 0, 0], [0, 1.01, 0.5]])
def test_posenc_rejects_out_of_range(bad):
    with pytest.raises(ValidationError):
        posenc(np.array(bad), 3)
    with pytest.raises(ValidationError):
        posenc(np.zeros(2), 3)


def test_param_count_closed_form_and_enumeration():
    cfg = NFConfig(L=10, hidden_layers=7, width=64)
    closed = (60 + 1) * 64 + 6 * (64 + 1) * 64 + (64 + 1)
    assert param_count(cfg) == closed == 28929
    for c in (cfg, NFConfig(3, 2, 5), NFConfig(1, 1, 1)):
        assert param_count(c) == sum(p.numel() for p in NeuralField(c).parameters())


def test_expressivity_guard():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert NFConfig().check_expressivity(128) < 5
    with pytest.warns(UserWarning):
        NFConfig(L=10, hidden_layers=2).check_expressivity(128)


def test_zero_final_layer_gives_zero():
    nf = NeuralField(NFConfig(2, 2, 4))
    with torch.no_grad():
        nf.layers[-1].weight.zero_()
        nf.layers[-1].bias.zero_()
    assert torch.all(nf_forward(nf, torch.rand(10, 3)) == 0)


def test_batch_equals_pointwise():
    nf = NeuralField(NFConfig(3, 2, 8), seed=1)
    pts = torch.rand(1500, 3, generator=torch.Generator().manual_seed(0))
    batch = nf_forward(nf, pts)
    single = torch.stack([nf_forward(nf, p[None])[0] for p in pts[::50]])
    assert torch.equal(batch[::50], single)
    perm = torch.randperm(1500)
    assert torch.equal(nf_forward(nf, pts[perm]), batch[perm])


def test_hand_computed_forward():
    """2 hidden layers of width 4 with hand-set weights, evaluated at the origin."""
    nf = NeuralField(NFConfig(L=1, hidden_layers=2, width=4), dtype=torch.float64)
    with torch.no_grad():
        for layer in nf.layers:
            layer.weight.zero_()
            layer.bias.zero_()
        # encoding at 0 is (0,0,0,1,1,1); first layer sums the cosines
        nf.layers[0].weight[:, 3:] = torch.tensor([[1.0], [2.0], [-1.0], [0.5]])
        nf.layers[0].bias[:] = torch.tensor([0.0, -1.0, 0.0, 0.5])
        nf.layers[1].weight[:] = torch.eye(4)
        nf.layers[1].bias[:] = torch.tensor([0.0, 0.0, 1.0, 0.0])
        nf.layers[2].weight[:] = torch.tensor([[1.0, 1.0, 1.0, 1.0]])
        nf.layers[2].bias[:] = 0.25
    # h1 = relu([3, 5, -3, 2]) = [3, 5, 0, 2]; h2 = relu(h1 + [0, 0, 1, 0]) = [3, 5, 1, 2]
    assert nf(torch.zeros(1, 3, dtype=torch.float64)).item() == pytest.approx(11.25)


def test_grid_coords_and_render():
    c = grid_coords(4, 3)
    assert c.shape == (3, 16, 3)
    assert np.allclose(c[0, :4, :2], [[0.125, 0.125], [0.125, 0.375], [0.125, 0.625], [0.125, 0.875]])
    assert np.allclose(c[:, 0, 2], [0, 0.5, 1])
    assert np.all(grid_coords(4, 1)[..., 2] == 0)
    nf = NeuralField(NFConfig(2, 2, 4))
    with torch.no_grad():
        for layer in nf.layers:
            layer.weight.zero_()
        nf.layers[-1].bias.fill_(0.7)
    obj = render_grid(nf, 5, 3)
    assert obj.frames.shape == (5, 5, 3)
    assert np.allclose(obj.frames, 0.7)


def test_render_is_deterministic_and_matches_encoding():
    nf = NeuralField(NFConfig(4, 3, 16), seed=3)
    a, b = render_grid(nf, 8, 4), render_grid(nf, 8, 4)
    assert np.array_equal(a.frames, b.frames)
    enc = GridEncoding(8, 4, 4)
    with torch.no_grad():
        frames = enc.render(nf, torch.tensor([2])).double().numpy()
    assert np.array_equal(frames[0], a.frames[:, :, 2])


def test_superresolution_consistency():
    """Render at 2J and 2x2-average vs render at J: bounded by a Lipschitz estimate."""
    nf = NeuralField(NFConfig(4, 3, 32), seed=5, dtype=torch.float64)
    J, P = 16, 3
    lo = render_grid(nf, J, P).frames
    hi = render_grid(nf, 2 * J, P).frames
    down = hi.reshape(J, 2, J, 2, P).mean(axis=(1, 3))
    # sub-pixel offsets are 1/(4J); bound by the largest finite-difference slope on the fine grid
    slope = max(np.abs(np.diff(hi, axis=0)).max(), np.abs(np.diff(hi, axis=1)).max()) * (2 * J)
    bound = slope * math.sqrt(2) / (4 * J)
    assert np.max(np.abs(down - lo)) <= 1.5 * bound


def test_gradient_of_constant_loss_is_zero():
    nf = NeuralField(NFConfig(2, 2, 3))
    g = nf_gradient(nf, lambda m: torch.tensor(0.0))
    assert all(torch.all(v == 0) for v in g.values())


def test_nonfinite_loss_rejected():
    nf = NeuralField(NFConfig(2, 2, 3))
    with pytest.raises(NumericalError):
        nf_gradient(nf, lambda m: m(torch.rand(2, 3)).sum().detach() * float("nan"))


def _flat(nf):
    return torch.cat([p.detach().reshape(-1) for p in nf.parameters()])


def _set_flat(nf, vec):
    with torch.no_grad():
        i = 0
        for p in nf.parameters():
            p.copy_(vec[i : i + p.numel()].reshape(p.shape))
            i += p.numel()


def finite_difference_check(nf, loss_fn, h=1e-5):
    grads = nf_gradient(nf, loss_fn)
    analytic = torch.cat([grads[k].reshape(-1) for k, _ in nf.named_parameters()])
    theta = _flat(nf)
    numeric = torch.empty_like(theta)
    for i in range(theta.numel()):
        e = torch.zeros_like(theta)
        e[i] = h
        _set_flat(nf, theta + e)
        fp = loss_fn(nf).item()
        _set_flat(nf, theta - e)
        fm = loss_fn(nf).item()
        numeric[i] = (fp - fm) / (2 * h)
    _set_flat(nf, theta)
    return analytic, numeric


def test_gradient_matches_finite_differences():
    nf = NeuralField(NFConfig(L=1, hidden_layers=2, width=3), seed=2, dtype=torch.float64)
    coords = torch.rand(5, 3, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    a, n = finite_difference_check(nf, lambda m: m(coords).sum())
    assert torch.allclose(a, n, rtol=1e-4, atol=1e-7)


def test_gradient_of_squared_render_uses_jacobian():
    """grad ||render||^2 = 2 J^T render with J the numerical Jacobian on a 2x2x2 grid."""
    nf = NeuralField(NFConfig(L=2, hidden_layers=2, width=3), seed=4, dtype=torch.float64)
    enc = GridEncoding(2, 2, 2, torch.float64)
    render = lambda m: enc.render(m).reshape(-1)
    grads = nf_gradient(nf, lambda m: (render(m) ** 2).sum())
    analytic = torch.cat([grads[k].reshape(-1) for k, _ in nf.named_parameters()])
    theta = _flat(nf)
    h = 1e-6
    cols = []
    for i in range(theta.numel()):
        e = torch.zeros_like(theta)
        e[i] = h
        _set_flat(nf, theta + e)
        fp = render(nf).detach()
        _set_flat(nf, theta - e)
        fm = render(nf).detach()
        cols.append((fp - fm) / (2 * h))
    _set_flat(nf, theta)
    jac = torch.stack(cols, 1)
    expected = 2 * jac.T @ render(nf).detach()
    assert torch.allclose(analytic, expected, rtol=1e-4, atol=1e-8)


def test_init_is_seeded():
    a, b = NeuralField(seed=9), NeuralField(seed=9)
    assert torch.equal(_flat(a), _flat(b))
    assert not torch.equal(_flat(a), _flat(NeuralField(seed=10)))
    for layer in a.layers:
        bound = math.sqrt(1.0 / layer.in_features)
        assert layer.weight.abs().max() <= bound and layer.bias.abs().max() <= bound
        assert layer.bias.abs().max() > 0
    he = NeuralField(NFConfig(init_gain=6.0), seed=9)
    assert he.layers[0].weight.abs().max() > math.sqrt(1.0 / 60)
    with pytest.raises(ValidationError):
        NFConfig(init_gain=0)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000))
def test_save_load_round_trip(tmp_path_factory, seed):
    path = tmp_path_factory.mktemp("nf") / "nf.dct"
    nf = NeuralField(NFConfig(3, 2, 8), seed=seed)
    save_nf(path, nf)
    back = load_nf(path)
    assert back.config == nf.config
    assert torch.equal(_flat(back), _flat(nf))
