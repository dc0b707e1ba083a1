import os
import sys

import numpy as np
import pytest

from quantdiff import autodiff as ad
from quantdiff.checkpoint import load_model
from quantdiff.datasets import gmm8
from quantdiff.diffusion import make_linear_schedule, make_plan
from quantdiff.network import build_model
from quantdiff.rng import Rng

ASSETS = os.path.join(os.path.dirname(__file__), "..", "assets", "reference")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "CRITERION_RESULTS", None) if mod else None
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)


def assert_grad_close(tape_grad, fd_grad, rtol=1e-4, floor=1e-4):
    """|tape - fd| <= rtol * max(|fd|, floor) elementwise.

    The floor absorbs finite-difference rounding noise (~1e-9 here) on
    coordinates whose true gradient is zero, e.g. clipped quantizer codes.
    """
    err = np.abs(tape_grad - fd_grad)
    bound = rtol * np.maximum(np.abs(fd_grad), floor)
    worst = float((err - bound).max())
    assert np.all(err <= bound), f"gradient mismatch: worst excess {worst:.3e}"


def adaround_generic_state(model, block, jitter, bits=4):
    """Adaround optimizer state at a generic point for finite-difference checks.

    Gradients are checked away from the objective's measure-zero kinks: the
    scale is nudged off the exact grid the init places extreme weights on,
    and the rounding variables are jittered into the interior of h's range.
    Both margins are asserted so a bad seed fails loudly instead of flaking.
    """
    from quantdiff.calibration import _v_from_fraction
    from quantdiff.quantizer import init_scale_mse

    state = {}
    for name in block.layers:
        layer = model.layers()[name]
        q = init_scale_mse(layer.w.astype(np.float32), bits, "per_channel")
        log_s = q.log_scale.astype(np.float64) - 0.013 \
            + 0.002 * jitter.normal(q.scale.shape, dtype=np.float64)
        s_col = np.exp(log_s)[:, None]
        frac = layer.w / s_col - np.floor(layer.w / s_col)
        v = _v_from_fraction(np.clip(frac, 0.05, 0.95)).astype(np.float64)
        v = np.clip(v + 0.3 * jitter.normal(v.shape, dtype=np.float64), -2.2, 2.2)
        u = layer.w / s_col
        h = np.clip(ad.stable_sigmoid(v) * 1.2 - 0.1, 0, 1)
        assert np.abs(u - np.round(u)).min() > 1e-4
        assert min(h.min(), (1 - h).min()) > 1e-3
        state[name] = {"q": q, "v": v, "log_s": log_s}
    return state


@pytest.fixture(scope="session")
def schedule():
    return make_linear_schedule(1000)


@pytest.fixture(scope="session")
def plan(schedule):
    return make_plan(schedule, 100)


@pytest.fixture(scope="session")
def tiny_model():
    """Small random model (677 params in f64 paths) with full gradient flow."""
    return build_model(Rng(7), width=8, emb_dim=8, n_blocks=2, skips={1: 0},
                       zero_output=False)


@pytest.fixture(scope="session")
def toy_model():
    """Default-topology random (untrained) model."""
    return build_model(Rng(42), zero_output=False)


@pytest.fixture(scope="session")
def reference_model():
    """The committed trained checkpoint the acceptance criteria run against."""
    path = os.path.join(ASSETS, "model_fp32.qdck")
    if not os.path.exists(path):
        pytest.fail(f"reference checkpoint missing at {path}; see README for the training command")
    return load_model(path)


@pytest.fixture(scope="session")
def reference_data():
    """The training dataset of the reference checkpoint (same stream layout as the CLI)."""
    return gmm8(Rng(0).substream(1_000_000), 8192)
