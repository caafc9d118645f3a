"""The compiled kernels and the NumPy fallback must agree bit for bit."""

import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import random_cascade
from charcascade import _backend, _pykernels
from charcascade.boosting import pool_values
from charcascade.features import (
    CS, HAAR, LBP, Aperture, HaarGeometry, cell_geometry_arrays, enumerate_features, feature_value,
)
from charcascade.imaging import integral_table

compiled = pytest.importorskip("charcascade._kernels", reason="compiled kernels not built")
AP = Aperture(12, 12)


@pytest.fixture
def stack(rng):
    return integral_table(rng.integers(0, 256, (64, 12, 12), dtype=np.uint8))


def test_backend_selected_at_import():
    assert _backend.NAME == "cython"
    assert _backend.kernels is compiled


@pytest.mark.parametrize("kind", [CS, LBP])
def test_cell_codes(stack, kind):
    feats = enumerate_features(AP, kind, 1, 3, 1)
    xb, yb = cell_geometry_arrays(feats)
    a = compiled.batch_cell_codes(stack, xb, yb, kind == LBP)
    b = _pykernels.batch_cell_codes(stack, xb, yb, kind == LBP)
    assert a.dtype == b.dtype == np.uint16
    assert np.array_equal(a, b)
    for f in (0, len(feats) // 2, len(feats) - 1):
        for n in (0, 33):
            assert a[f, n] == feature_value(feats[f], stack[n], 0, 0)


def test_haar(stack):
    feats = enumerate_features(AP, HAAR, 1, 2, 2)
    g = HaarGeometry(feats)
    a = compiled.batch_haar(stack, g.nreg, g.x0, g.y0, g.x1, g.y1, g.int_weight)
    b = _pykernels.batch_haar(stack, g.nreg, g.x0, g.y0, g.x1, g.y1, g.int_weight)
    assert np.array_equal(a, b)
    assert a[5, 7] == feature_value(feats[5], stack[7], 0, 0)


def test_histograms(rng):
    codes = rng.integers(0, 512, (50, 400)).astype(np.uint16)
    w = rng.random(400)
    w /= w.sum()
    labels = (rng.random(400) < 0.3).astype(np.uint8)
    pa, na = compiled.weighted_histograms(codes, w, labels, 512)
    pb, nb = _pykernels.weighted_histograms(codes, w, labels, 512)
    assert np.array_equal(pa, pb) and np.array_equal(na, nb)


@pytest.mark.parametrize("kind", [CS, LBP, HAAR])
@pytest.mark.parametrize("scale", [1.0, 1.25, 2.0])
def test_scan_and_stack(rng, kind, scale):
    c = random_cascade(rng, kind, AP, stages=4, density=0.7)
    table = integral_table(rng.integers(0, 256, (60, 70), dtype=np.uint8))
    ww, wh = c.window_size(scale)
    ys, xs = np.mgrid[0:60 - wh + 1, 0:70 - ww + 1]
    xs = xs.ravel().astype(np.int32)
    ys = ys.ravel().astype(np.int32)
    cm = c.compile(scale)
    for x, y in zip(compiled.scan_windows(table, xs, ys, cm), _pykernels.scan_windows(table, xs, ys, cm)):
        assert np.array_equal(x, y)
    if scale == 1.0:
        st = integral_table(rng.integers(0, 256, (200, 12, 12), dtype=np.uint8))
        for x, y in zip(compiled.eval_stack(st, cm), _pykernels.eval_stack(st, cm)):
            assert np.array_equal(x, y)


def test_empty_inputs():
    st = np.zeros((0, 13, 13), np.int64)
    xb, yb = cell_geometry_arrays(enumerate_features(AP, CS))
    assert compiled.batch_cell_codes(st, xb, yb, False).shape == (len(xb), 0)
    assert _pykernels.batch_cell_codes(st, xb, yb, False).shape == (len(xb), 0)


def test_pure_python_switch(tmp_path):
    """The environment switch selects the fallback and training gives the same model."""
    code = (
        "import numpy as np\n"
        "from charcascade import _backend\n"
        "from charcascade.boosting import TrainConfig, train_cascade\n"
        "from charcascade.classifiers import dumps_cascade\n"
        "from charcascade.synthetic import bars_vs_noise\n"
        "pos, neg = bars_vs_noise(5, 120, 400, digits='8')\n"
        "c, _ = train_cascade(pos, neg, TrainConfig(size_step=6, max_stages=2))\n"
        "print(_backend.NAME)\n"
        "print(dumps_cascade(c))\n"
    )
    outs = {}
    for flag in ("", "1"):
        env = {**os.environ, "CHARCASCADE_PURE_PYTHON": flag}
        r = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                           check=True)
        name, _, model = r.stdout.partition("\n")
        outs[name] = model
    assert set(outs) == {"cython", "python"}
    assert outs["cython"] == outs["python"]


def test_pool_values_agree_with_fallback(rng, monkeypatch):
    patches = rng.integers(0, 256, (30, 12, 12), dtype=np.uint8)
    feats = enumerate_features(AP, LBP)
    a = pool_values(feats, patches)
    monkeypatch.setattr("charcascade.boosting.kernels", _pykernels)
    assert np.array_equal(a, pool_values(feats, patches))
