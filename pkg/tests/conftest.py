import numpy as np
import pytest
import torch

from akb.codec import CodecConfig, JSCCModel


def tiny_config(**kw):
    base = dict(
        token_dim=8, reduction=4, width=6, jscc_width=8, n_blocks=1, conditioning_dim=4,
        rate_set=(0, 1, 2, 4), entropy_hidden=6,
    )
    base.update(kw)
    return CodecConfig(**base)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return JSCCModel(tiny_config()).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_images(n, size, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (n, size, size, 3), dtype=np.uint8)


def smooth_images(n, size, seed=0):
    """Low-frequency colour images that a tiny codec can learn quickly."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.empty((n, size, size, 3), dtype=np.uint8)
    for i in range(n):
        a = rng.uniform(0, 1, (3, 3))
        img = a[:, 0, None, None] * 0.5 + 0.5 * np.sin(2 * np.pi * (a[:, 1, None, None] * xx + a[:, 2, None, None] * yy)) * 0.4 + 0.1
        out[i] = np.clip(img.transpose(1, 2, 0) * 255, 0, 255).astype(np.uint8)
    return out


# -- acceptance summary: one pass/fail line per criterion ------------------------

_CRITERIA: dict[int, list[tuple[str, bool, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    if rep.skipped:
        detail = f"skipped: {rep.longrepr[-1] if isinstance(rep.longrepr, tuple) else rep.longrepr}"
    _CRITERIA.setdefault(marker.args[0], []).append((item.name, rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        results = _CRITERIA[n]
        ok = all(passed for _, passed, _ in results)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}")
        for name, passed, detail in results:
            terminalreporter.write_line(f"    {'ok  ' if passed else 'FAIL'} {name}: {detail}")
