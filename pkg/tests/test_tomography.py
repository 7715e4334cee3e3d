import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_density
from spinpair.core import PAULI_2Q, PAULI_LABELS, DensityMatrix4, bell_state, fidelity, pauli_expectations, trace_distance
from spinpair.errors import DomainError
from spinpair.readout import ReadoutModel
from spinpair.tomography import (
    TomogramData,
    design_matrix,
    estimate_correlators,
    linear_inversion,
    log_likelihood,
    mle_reconstruct,
    project_to_physical,
    pseudo_pure_decomposition,
    pseudo_pure_fidelity,
    setting_gates,
    simulate_tomography,
)

RO = ReadoutModel()


@pytest.fixture(scope="module")
def settings16(table):
    from spinpair.tomography import measurement_settings

    return measurement_settings(table)


def test_setting_gate_choices():
    gates, _ = setting_gates("ZI")
    assert gates == []
    gates, _ = setting_gates("XI")
    assert len(gates) == 1 and gates[0].kind == "LOCAL_E_PI2" and gates[0].axis_phase == "-y"
    assert [g.kind for g in setting_gates("IX")[0]][-1] == "SWAP"
    assert [g.kind for g in setting_gates("XZ")[0]][-1] == "CNOT_E"


def test_settings_informationally_complete(settings16):
    assert [s.label for s in settings16] == list(PAULI_LABELS)
    assert np.linalg.matrix_rank(design_matrix(settings16), tol=1e-8) == 16


def test_povms_are_projectors(settings16):
    for s in settings16:
        assert np.abs(s.povm @ s.povm - s.povm).max() < 1e-6
        assert np.trace(s.povm).real == pytest.approx(2.0, abs=1e-9)


def test_infinite_shots_exact(settings16):
    rho = bell_state("psi+")
    data = simulate_tomography(rho, settings16, RO, None, 0)
    assert trace_distance(linear_inversion(data, RO).rho, rho) < 1e-9
    assert trace_distance(mle_reconstruct(data, RO), rho) < 1e-6


def test_zz_correlator_within_three_sigma(settings16):
    rho = bell_state("psi+")
    shots = 10**4
    data = simulate_tomography(rho, settings16, RO, shots, 11)
    c = estimate_correlators(data, RO)
    a = design_matrix(settings16)[:, 1:]
    scale = shots * RO.counts_bright * RO.contrast
    var_p = (data.counts_signal + data.counts_reference) / scale**2
    pinv = np.linalg.pinv(a)
    se = np.sqrt(np.diag(pinv @ np.diag(var_p) @ pinv.T))
    k = PAULI_LABELS.index("ZZ")
    truth = pauli_expectations(rho)[k]
    assert abs(c[k] - truth) < 3 * se[k - 1]


def test_maximally_mixed_state(settings16):
    data = simulate_tomography(DensityMatrix4.maximally_mixed(), settings16, RO, 10**5, 5)
    rho = mle_reconstruct(data, RO)
    assert np.allclose(np.linalg.eigvalsh(rho.rho), 0.25, atol=0.02)


def test_linear_inversion_hermitian_and_flags_unphysical(settings16):
    # a pure state near the boundary: shot noise pushes an eigenvalue negative
    rho = bell_state("phi-")
    data = simulate_tomography(rho, settings16, RO, 200, 1)
    est = linear_inversion(data, RO)
    assert np.abs(est.rho - est.rho.conj().T).max() < 1e-14
    assert np.trace(est.rho).real == pytest.approx(1.0, abs=1e-12)
    assert not est.is_physical
    phys = project_to_physical(est.rho)
    assert np.linalg.eigvalsh(phys.rho).min() >= -1e-12


def test_mle_high_shot_fidelity(settings16):
    rho = bell_state("psi+")
    data = simulate_tomography(rho, settings16, RO, 10**5, 2)
    assert fidelity(mle_reconstruct(data, RO), rho) >= 0.99


def test_mle_likelihood_beats_projected_linear_inversion(settings16):
    rng = np.random.default_rng(8)
    for seed in range(5):
        truth = random_density(rng, rank=2)
        data = simulate_tomography(truth, settings16, RO, 500, seed)
        mle = mle_reconstruct(data, RO)
        li = project_to_physical(linear_inversion(data, RO).rho)
        assert log_likelihood(mle, data, RO) >= log_likelihood(li, data, RO) - 1e-9


def test_counts_bright_invariance(settings16):
    rho = bell_state("phi+")
    out = [mle_reconstruct(simulate_tomography(rho, settings16, ReadoutModel(counts_bright=cb), None, 0), ReadoutModel(counts_bright=cb)) for cb in (5.0, 50.0)]
    assert trace_distance(out[0], out[1]) < 1e-6


@settings(max_examples=25)
@given(counts=st.lists(st.integers(0, 5000), min_size=16, max_size=16), seed=st.integers(0, 100))
def test_mle_physical_for_any_counts(settings16, counts, seed):
    povm = np.array([s.povm for s in settings16])
    ref = np.random.default_rng(seed).integers(0, 5000, 16)
    data = TomogramData(PAULI_LABELS, counts, ref, 100, povm)
    rho = mle_reconstruct(data, RO).rho
    assert np.linalg.eigvalsh(rho).min() >= -1e-12
    assert np.trace(rho).real == pytest.approx(1.0, abs=1e-12)


def test_tomogram_validation():
    with pytest.raises(DomainError):
        TomogramData(PAULI_LABELS[:3], [1, 2, 3], [1, 2, 3], 10, np.zeros((3, 4, 4)))


def test_pseudo_pure_examples():
    psi = bell_state("psi-").rho
    eps, pp = pseudo_pure_decomposition(0.3 * psi + 0.7 * np.eye(4) / 4)
    assert eps == pytest.approx(0.3)
    assert fidelity(pp, psi) == pytest.approx(1.0, abs=1e-9)
    assert pseudo_pure_decomposition(psi)[0] == pytest.approx(1.0)
    with pytest.raises(DomainError):
        pseudo_pure_decomposition(np.eye(4) / 4)


@given(seed=st.integers(0, 2**32 - 1))
def test_pseudo_pure_epsilon_matches_scan(seed):
    rho = random_density(np.random.default_rng(seed))
    eps, pp = pseudo_pure_decomposition(rho)
    # brute force: smallest epsilon on a grid that keeps rho_pp positive
    grid = np.linspace(1e-3, 1, 2000)
    ok = [e for e in grid if np.linalg.eigvalsh((rho - (1 - e) * np.eye(4) / 4) / e).min() >= -1e-12]
    assert eps == pytest.approx(ok[0], abs=1e-3)
    assert np.allclose((1 - eps) * np.eye(4) / 4 + eps * pp.rho, rho, atol=1e-12)
    assert pseudo_pure_fidelity(rho, pp) == pytest.approx(1.0, abs=1e-6)


def test_pauli_basis_is_orthogonal():
    gram = np.einsum("iab,jba->ij", PAULI_2Q, PAULI_2Q).real
    assert np.allclose(gram, 4 * np.eye(16))
