import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pae.analysis import (
    distance_spearman, linear_cka, prompt_cka_matrix, spectral_radius, spectrum_report,
    write_cka_csv, write_spectrum_json,
)
from pae.kld import init_system
from pae.oracles import dominant_matrix, power_radius
from pae.tensor_core.errors import NumericError, ShapeError


def test_radius_examples():
    assert spectral_radius(np.eye(5)) == pytest.approx(1.0)
    assert spectral_radius(0.5 * np.eye(5)) == pytest.approx(0.5)
    assert spectral_radius(np.array([[0.0, -1.0], [1.0, 0.0]])) == pytest.approx(1.0)
    with pytest.raises(ShapeError):
        spectral_radius(np.ones((2, 3)))


@pytest.mark.parametrize("seed", range(5))
def test_radius_matches_power_method(seed):
    rng = np.random.default_rng(seed)
    m = dominant_matrix(16, rng, top=rng.choice([-1.0, 1.0]) * rng.uniform(1.5, 3.0))
    assert abs(spectral_radius(m) - power_radius(m)) <= 1e-4


def test_identity_report():
    (rep,) = spectrum_report(init_system(8, 6, seed=0))
    assert rep.tag == "global" and rep.spectral_radius == pytest.approx(1.0)
    assert np.allclose(rep.eigenvalues, 1.0)
    assert rep.mean_abs <= rep.spectral_radius
    assert len(spectrum_report(init_system(8, 6, seed=0, layers=5, layerwise=True))) == 4


def test_spectrum_json_roundtrip(tmp_path, rng):
    s = init_system(8, 6, seed=0)
    s.K = rng.standard_normal((6, 6))
    reps = spectrum_report(s)
    data = json.loads(write_spectrum_json(reps, tmp_path / "s.json").read_text())
    ev = np.array([complex(re, im) for re, im in data["reports"][0]["eigenvalues"]])
    assert np.array_equal(ev, reps[0].eigenvalues)
    assert data["max_spectral_radius"] == reps[0].spectral_radius


def test_cka_self_and_scaling(rng):
    X = rng.standard_normal((10, 6))
    assert abs(linear_cka(X, X) - 1.0) <= 1e-9
    assert abs(linear_cka(X, -3.5 * X) - 1.0) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 12), st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_cka_orthogonal_invariance_and_bounds(n, p, seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.standard_normal((n, p)), rng.standard_normal((n, p + 1))
    R, _ = np.linalg.qr(rng.standard_normal((p, p)))
    assert abs(linear_cka(X, X @ R) - linear_cka(X, X)) <= 1e-7
    v = linear_cka(X, Y)
    assert -1e-9 <= v <= 1 + 1e-9
    assert v == pytest.approx(linear_cka(Y, X), abs=1e-12)


def test_cka_degenerate():
    with pytest.raises(NumericError):
        linear_cka(np.ones((4, 3)), np.eye(4)[:, :3])
    with pytest.raises(NumericError):
        linear_cka(np.ones((1, 3)), np.ones((1, 3)))


def test_cka_matrix_properties(rng):
    P = [rng.standard_normal((4, 8)) for _ in range(5)]
    M = prompt_cka_matrix(P)
    assert np.allclose(np.diag(M), 1.0, atol=1e-9)
    assert np.array_equal(M, M.T)
    assert M.min() >= -1e-9 and M.max() <= 1 + 1e-9
    assert np.allclose(prompt_cka_matrix([P[0]] * 4), 1.0)


def test_cka_matrix_names_bad_layer(rng):
    P = [rng.standard_normal((4, 8)), np.ones((4, 8)), rng.standard_normal((4, 8))]
    with pytest.raises(NumericError, match="layer 2"):
        prompt_cka_matrix(P)


def test_distance_spearman_sign():
    L = 5
    band = np.array([[1.0 / (1 + abs(i - j)) for j in range(L)] for i in range(L)])
    assert distance_spearman(band) == pytest.approx(-1.0)
    assert distance_spearman(1.0 - band + np.eye(L)) == pytest.approx(1.0)


def test_cka_csv(tmp_path):
    path = write_cka_csv(np.eye(3), tmp_path / "c.csv")
    rows = path.read_text().splitlines()
    assert rows[0] == "layer,p1,p2,p3" and rows[2] == "p2,0.0,1.0,0.0"
