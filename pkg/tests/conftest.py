import numpy as np
import pytest


def central_diff(fn, x, eps=1e-6):
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (fn(xp) - fn(xm)) / (2.0 * eps)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-6):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.abs(numeric), 1.0)
    err = np.abs(analytic - numeric)
    assert np.all(err <= atol + rtol * denom), (
        f"max abs err {err.max():.3e}, "
        f"max rel err {(err / denom).max():.3e}"
    )


@pytest.fixture
def tiny_corpus(tmp_path):
    """Small written corpus shared by pipeline-level tests."""
    from langtail.synth import SynthConfig, generate_corpus

    cfg = SynthConfig(n_classes=4, points_per_scene=200, n_scenes=3, seed=11)
    scenes, entities = generate_corpus(cfg, str(tmp_path / "corpus"))
    return str(tmp_path / "corpus"), scenes, entities
