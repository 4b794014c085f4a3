import numpy as np
import pytest


def fd_gradient(make_scalar, array, indices, h=1e-6):
    """Central finite differences of a scalar-valued rebuild function with
    respect to selected flat indices of `array` (mutated in place and
    restored).  `make_scalar` must re-run the forward pass from scratch."""
    flat = array.reshape(-1)
    out = {}
    for i in indices:
        old = flat[i]
        flat[i] = old + h
        f_plus = float(make_scalar())
        flat[i] = old - h
        f_minus = float(make_scalar())
        flat[i] = old
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return out


def assert_grad_matches(make_scalar, tensor, n_coords, rng, rtol=1e-3, h=1e-6):
    """Compare tensor.grad (already populated) against finite differences
    on up to n_coords randomly chosen coordinates."""
    assert tensor.grad is not None, "gradient was not populated"
    flat_grad = tensor.grad.reshape(-1)
    size = flat_grad.size
    idx = rng.choice(size, size=min(n_coords, size), replace=False)
    numeric = fd_gradient(make_scalar, tensor.data, idx, h=h)
    for i, num in numeric.items():
        ana = float(flat_grad[i])
        denom = max(abs(num), abs(ana), 1e-4)
        assert abs(ana - num) / denom <= rtol, (
            f"gradient mismatch at flat index {i}: analytic {ana}, numeric {num}"
        )


@pytest.fixture(scope="session")
def gradcheck():
    return assert_grad_matches


@pytest.fixture
def rng():
    return np.random.default_rng(20260826)
