import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def weighted(op, shape_seed=0):
    """Wrap ``op`` so its output is contracted with fixed random weights.

    Keeps summed outputs well-conditioned for central differences.
    """
    cache = {}

    def wrapped(x):
        out = op(x)
        if out.shape not in cache:
            cache[out.shape] = np.random.default_rng(shape_seed).normal(size=out.shape)
        from dualcodec.autodiff import Tensor
        return out * Tensor(cache[out.shape])

    return wrapped


def snake_input(seed, shape, alpha=1.0, margin=1e-3):
    """Normal draws, redrawn while any coordinate sits where snake's derivative is below ``margin``.

    Relative finite-difference error is ill-conditioned where the true derivative vanishes.
    """
    r = np.random.default_rng(seed)
    while True:
        x = r.normal(size=shape)
        if np.min(1.0 + np.sin(2 * alpha * x)) > margin:
            return x


def parameter_probe(model, param, loss_fn):
    """An op for finite_diff_check over one model parameter.

    ``op(t)`` loads ``t`` into ``param``, evaluates ``loss_fn()`` with the
    quantizers' discrete choices frozen at the base point and, when recording,
    routes the engine's backward gradient of ``param`` to ``t``.
    """
    from dualcodec import autodiff as ad
    from dualcodec.quantizer import FrozenQuantization, freeze_quantization

    frozen = FrozenQuantization()
    with ad.no_grad(), freeze_quantization(frozen):
        loss_fn()  # records the discrete choices at the base point

    def op(t):
        saved = param.data
        param.data = np.array(t.data, copy=True)
        try:
            if not t.requires_grad:
                with ad.no_grad(), freeze_quantization(frozen):
                    return ad.Tensor(loss_fn().data)
            for p in model.parameters():
                p.grad = None
            with freeze_quantization(frozen):
                loss = loss_fn()
            loss.backward()
            g = np.zeros_like(param.data) if param.grad is None else param.grad.copy()
            return ad._make(np.array(loss.data), (t,), lambda up: ad._accumulate(t, up * g))
        finally:
            param.data = saved

    return op


def tiny_model(seed=0, n_layers=2, latent_dim=8):
    from dualcodec.codec import DualCodecConfig, DualCodecModel

    cfg = DualCodecConfig(variant="25hz", n_layers=n_layers, rvq1_size=16, rest_size=16, latent_dim=latent_dim,
                          code_dim=4, channels=(4, 4, 8, 8, 8), semantic_blocks=1)
    return DualCodecModel(cfg, seed=seed)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
