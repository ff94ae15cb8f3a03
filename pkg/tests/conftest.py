import numpy as np
import pytest

from domadapt.models import init_bundle
from domadapt.tensor import Tensor


def tiny_bundle(seed=0, input_dim=3, feat_dim=4, hidden=5, num_classes=3):
    return init_bundle(input_dim, feat_dim, hidden, num_classes, seed)


def rand_tensor(rng, rows, cols, scale=1.0):
    return Tensor(rng.normal(0.0, scale, (rows, cols)))


def param_slots(*mlps):
    from domadapt.training import slots_of
    return slots_of(*mlps)


def loss_wrt(slot, build_loss):
    """f(x, tape) evaluating build_loss with `slot` temporarily holding x."""
    def f(x, tape):
        old = slot.get()
        slot.set(x)
        try:
            return build_loss(tape)
        finally:
            slot.set(old)
    return f


def bundle_state(bundle):
    return [p.data.copy() for net in bundle.networks() for p in net.parameters()]


def assert_params_equal(before, after_bundle, nets=None):
    """Bitwise comparison of a saved state against the bundle's current params."""
    current = bundle_state(after_bundle)
    assert len(before) == len(current)
    for b, c in zip(before, current):
        np.testing.assert_array_equal(b, c)


def net_state(mlp):
    return [p.data.copy() for p in mlp.parameters()]


def assert_net_unchanged(before, mlp):
    for b, p in zip(before, mlp.parameters()):
        np.testing.assert_array_equal(b, p.data)


def assert_net_changed(before, mlp):
    assert any(not np.array_equal(b, p.data)
               for b, p in zip(before, mlp.parameters()))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
