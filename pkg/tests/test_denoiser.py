import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fitted_model, random_model, smooth_image
from oracles import dense_denoise, extraction_matrices
from pnpgmm import denoiser, gmm
from pnpgmm.patches import PatchGeometry, extract_patches


def isotropic(n, c, K=1):
    return gmm.GMMModel.from_covariances(np.full(K, 1.0 / K), np.stack([c * np.eye(n)] * K))


def plan_for(img, model, side, remove_means=True, sigma_train=0.0):
    return denoiser.freeze_weights(model, img, sigma_train, side, remove_means)


def test_mmse_isotropic_shrinks_toward_patch_mean(rng):
    img = rng.standard_normal((6, 6))
    c, sigma = 2.0, 0.7
    out = denoiser.denoise_mmse(isotropic(9, c), img, sigma, 3)
    # every patch estimate is mean + g (y - mean); averaging gives a linear map
    g = c / (c + sigma ** 2)
    geom = PatchGeometry(6, 6, 3)
    ps = extract_patches(img, geom, remove_means=True)
    means = np.zeros(36)
    np.add.at(means, geom.patch_indices(), np.broadcast_to(ps.means[:, None], (36, 9)))
    np.testing.assert_allclose(out.ravel(), g * img.ravel() + (1 - g) * means / 9, atol=1e-12)


@pytest.mark.parametrize("remove", [True, False])
def test_mmse_small_sigma_is_identity(rng, remove):
    img = smooth_image(rng, 8, 8)
    model = fitted_model(img, 2, 2, remove_means=remove)
    out = denoiser.denoise_mmse(model, img, 1e-7, 2, remove)
    assert np.abs(out - img).max() <= 1e-9


@pytest.mark.parametrize("remove", [True, False])
def test_mmse_matches_dense_oracle(rng, remove):
    img = smooth_image(rng, 8, 8)
    model = random_model(rng, 4, 2)
    noisy = img + 0.3 * rng.standard_normal(img.shape)
    ours = denoiser.denoise_mmse(model, noisy, 0.3, 2, remove)
    ref = dense_denoise(noisy, model.weights, model.covariances, 2, 0.3, remove_means=remove)
    assert np.abs(ours - ref).max() <= 1e-10


def test_mmse_input_errors(rng):
    model = isotropic(4, 1.0)
    with pytest.raises(ValueError):
        denoiser.denoise_mmse(model, np.full((4, 4), np.nan), 0.1, 2)
    with pytest.raises(ValueError):
        denoiser.denoise_mmse(model, np.zeros((4, 4)), 0.0, 2)


def test_single_component_plan_has_unit_weights(rng):
    plan = plan_for(rng.standard_normal((6, 6)), random_model(rng, 4, 1), 2)
    np.testing.assert_array_equal(plan.beta, 1.0)


def test_identical_training_images_give_identical_plans(rng):
    img = smooth_image(rng, 8, 8)
    model = random_model(rng, 4, 3)
    a = plan_for(img, model, 2)
    b = plan_for(img.copy(), model, 2)
    assert np.array_equal(a.beta, b.beta)


def test_plan_weights_equal_responsibilities(rng):
    img = smooth_image(rng, 8, 8)
    model = random_model(rng, 4, 3)
    plan = plan_for(img, model, 2, sigma_train=0.2)
    ps = extract_patches(img, PatchGeometry(8, 8, 2), remove_means=True)
    assert np.array_equal(plan.beta, gmm.responsibilities(model, ps, 0.2))


def test_plan_validation(rng):
    model = random_model(rng, 4, 2)
    with pytest.raises(ValueError):
        denoiser.freeze_weights(model, np.zeros((4, 4)), -1.0, 2)
    with pytest.raises(ValueError):
        denoiser.freeze_weights(model, np.zeros((6, 6)), 0.0, 3)
    plan = plan_for(np.zeros((4, 4)), model, 2)
    with pytest.raises(ValueError):
        denoiser.apply_fixed(plan, np.zeros((4, 6)), 0.5)


@pytest.mark.parametrize("remove", [True, False])
def test_apply_fixed_is_linear(rng, remove):
    img = smooth_image(rng, 8, 8)
    plan = plan_for(img, fitted_model(img, 2, 3), 2, remove)
    y1, y2 = rng.standard_normal((2, 8, 8))
    lhs = denoiser.apply_fixed(plan, 1.5 * y1 - 0.25 * y2, 0.4)
    rhs = 1.5 * denoiser.apply_fixed(plan, y1, 0.4) - 0.25 * denoiser.apply_fixed(plan, y2, 0.4)
    assert np.abs(lhs - rhs).max() <= 1e-10 * np.abs(rhs).max()


def test_apply_fixed_small_sigma_is_identity(rng):
    img = smooth_image(rng, 8, 8)
    plan = plan_for(img, fitted_model(img, 2, 2), 2)
    y = rng.standard_normal((8, 8))
    assert np.abs(denoiser.apply_fixed(plan, y, 1e-7) - y).max() <= 1e-9


@pytest.mark.parametrize("remove", [True, False])
def test_apply_fixed_matches_dense_oracle(rng, remove):
    img = smooth_image(rng, 8, 8)
    model = random_model(rng, 4, 3)
    plan = plan_for(img, model, 2, remove)
    y = rng.standard_normal((8, 8))
    ref = dense_denoise(y, model.weights, model.covariances, 2, 0.5, beta=plan.beta,
                        remove_means=remove)
    assert np.abs(denoiser.apply_fixed(plan, y, 0.5) - ref).max() <= 1e-10
    W = denoiser.dense_operator(plan, 0.5)
    assert np.abs(W @ y.ravel() - ref.ravel()).max() <= 1e-10


def test_apply_fixed_stack_and_threads_agree(rng):
    img = smooth_image(rng, 8, 8)
    plan = plan_for(img, fitted_model(img, 2, 2), 2)
    stack = rng.standard_normal((3, 8, 8))
    serial = denoiser.apply_fixed(plan, stack, 0.3)
    threaded = denoiser.apply_fixed(plan, stack, 0.3, jobs=3)
    assert np.array_equal(serial, threaded)
    assert np.array_equal(serial[1], denoiser.apply_fixed(plan, stack[1], 0.3))


def test_dense_operator_unit_patch_isotropic():
    c, sigma = 3.0, 0.5
    plan = plan_for(np.zeros((3, 4)), isotropic(1, c), 1, remove_means=False)
    W = denoiser.dense_operator(plan, sigma)
    np.testing.assert_array_equal(W, c / (c + sigma ** 2) * np.eye(12))


def test_dense_operator_columns_are_unit_responses(rng):
    img = smooth_image(rng, 6, 6)
    plan = plan_for(img, fitted_model(img, 3, 2), 3)
    W = denoiser.dense_operator(plan, 0.8)
    for j in (0, 7, 35):
        e = np.zeros(36)
        e[j] = 1.0
        col = denoiser.apply_fixed(plan, e.reshape(6, 6), 0.8).ravel()
        assert np.abs(W[:, j] - col).max() <= 1e-14


def test_dense_operator_matches_explicit_sum(rng):
    img = smooth_image(rng, 4, 6)
    plan = plan_for(img, random_model(rng, 4, 2), 2, remove_means=False)
    F = plan.patch_filters(0.6)
    W = sum(P.T @ Fi @ P for P, Fi in zip(extraction_matrices(4, 6, 2), F)) / 4
    assert np.abs(denoiser.dense_operator(plan, 0.6) - W).max() <= 1e-14


@pytest.mark.parametrize("remove", [True, False])
def test_partition_assembly_matches_direct(rng, remove):
    img = smooth_image(rng, 8, 8)
    plan = plan_for(img, fitted_model(img, 2, 3), 2, remove)
    blocks = denoiser.subset_operators(plan, 0.5)
    direct = denoiser.dense_operator(plan, 0.5)
    assert np.abs(sum(blocks) / 4 - direct).max() <= 1e-12
    # each tiling touches every pixel once, so each A_j is block diagonal
    for A in blocks:
        assert np.count_nonzero(np.abs(A) > 0) <= 64 * 4


def test_dense_cap():
    plan = plan_for(np.zeros((8, 8)), isotropic(4, 1.0), 2)
    with pytest.raises(ValueError):
        denoiser.dense_operator(plan, 0.5, cap=32)


def test_spectrum_isotropic_exact():
    c, sigma = 2.0, 0.5
    plan = plan_for(np.zeros((6, 6)), isotropic(4, c), 2, remove_means=False)
    rep = denoiser.spectrum_report(plan, sigma)
    g = c / (c + sigma ** 2)
    assert rep.eig_min == pytest.approx(g, abs=1e-14)
    assert rep.eig_max == pytest.approx(g, abs=1e-14)


@settings(max_examples=12, deadline=None)
@given(seed=st.integers(0, 2**31), side=st.sampled_from([2, 3]), K=st.integers(1, 4),
       sigma=st.sampled_from([0.05, 0.5, 2.0]))
def test_spectrum_properties(seed, side, K, sigma):
    rng = np.random.default_rng(seed)
    h = 3 * side
    img = smooth_image(rng, h, h)
    plan = plan_for(img, fitted_model(img, side, K, seed=seed, remove_means=False, max_iter=20),
                    side, remove_means=False)
    rep = denoiser.spectrum_report(plan, sigma)
    lo, hi = rep.hull
    assert rep.relative_symmetry_defect <= 1e-12
    assert 0 < rep.eig_min <= rep.eig_max < 1
    assert lo - 1e-12 <= rep.eig_min and rep.eig_max <= hi + 1e-12
    assert rep.eig_residual <= 1e-9
    # tiling sums are block diagonal; their eigenvalues share the same hull
    assert rep.subset_ranges.min() >= lo - 1e-12 and rep.subset_ranges.max() <= hi + 1e-12


def test_contraction(rng):
    img = smooth_image(rng, 8, 8)
    plan = plan_for(img, fitted_model(img, 2, 3, remove_means=False), 2, remove_means=False)
    rep = denoiser.spectrum_report(plan, 0.5)
    y1, y2 = rng.standard_normal((2, 8, 8))
    d_out = np.linalg.norm(denoiser.apply_fixed(plan, y1, 0.5) - denoiser.apply_fixed(plan, y2, 0.5))
    d_in = np.linalg.norm(y1 - y2)
    assert d_out <= rep.spectral_norm * d_in * (1 + 1e-12)
    assert d_out < d_in


def test_report_text_and_failures(rng):
    plan = plan_for(np.zeros((4, 4)), isotropic(4, 1.0), 2, remove_means=False)
    rep = denoiser.spectrum_report(plan, 1.0)
    text = rep.to_text()
    assert "status: ok" in text and "eig_max: 0.5" in text
    rep.eig_max = 1.5
    assert rep.failures()
    assert "status: FAILED" in rep.to_text()


def test_mean_mode_is_not_symmetric_and_check_raises(rng):
    # mean re-addition gives a nonsymmetric map; the dense check reports it
    img = smooth_image(rng, 8, 8)
    plan = plan_for(img, fitted_model(img, 2, 3), 2, remove_means=True)
    rep = denoiser.spectrum_report(plan, 0.5, check=False)
    if rep.failures():
        with pytest.raises(denoiser.DiagnosticError):
            denoiser.spectrum_report(plan, 0.5)


def test_prox_defect_zero_input(rng):
    plan = plan_for(np.zeros((4, 4)), random_model(rng, 4, 2), 2, remove_means=False)
    assert denoiser.prox_defect(plan, 0.5, np.zeros((4, 4))) == 0.0


def test_prox_scalar_isotropic():
    c, sigma = 2.0, 0.5
    plan = plan_for(np.zeros((2, 2)), isotropic(1, c), 1, remove_means=False)
    G = denoiser.implied_quadratic(plan, sigma)
    np.testing.assert_allclose(G, sigma ** 2 / c * np.eye(4), atol=1e-14)
    y = np.array([[1.0, -2.0], [0.5, 3.0]])
    np.testing.assert_allclose(denoiser.apply_fixed(plan, y, sigma), y * c / (c + sigma ** 2),
                               atol=1e-15)


@pytest.mark.parametrize("side,K,sigma", [(2, 1, 0.05), (2, 3, 0.5), (4, 2, 2.0)])
def test_prox_defect_random(rng, side, K, sigma):
    img = smooth_image(rng, 8, 8)
    plan = plan_for(img, fitted_model(img, side, K, remove_means=False), side, remove_means=False)
    assert denoiser.prox_defect(plan, sigma, rng.standard_normal((8, 8))) <= 1e-8


def test_scalar_map_equal_variances_is_line():
    y = np.linspace(-5, 5, 101)
    xhat = denoiser.scalar_mmse_map([0.3, 0.7], [2.0, 2.0], 1.0, y)
    np.testing.assert_allclose(xhat, y * 2 / 3, atol=1e-14)


def test_scalar_map_expansive_witness():
    y = np.linspace(-10, 10, 4001)
    xhat = denoiser.scalar_mmse_map([0.5, 0.5], [0.1, 10.0], 1.0, y)
    assert np.max(np.diff(xhat) / np.diff(y)) > 1


@settings(max_examples=20, deadline=None)
@given(b=st.floats(0.0, 1.0))
def test_scalar_map_fixed_weights_slope(b):
    y = np.linspace(-4, 4, 41)
    xhat = denoiser.scalar_mmse_map([0.5, 0.5], [0.1, 10.0], 1.0, y, fixed_beta=[b, 1 - b])
    slopes = np.diff(xhat) / np.diff(y)
    assert np.ptp(slopes) <= 1e-12
    assert 0 < slopes[0] < 1


def test_scalar_map_rejects_bad_variance():
    with pytest.raises(ValueError):
        denoiser.scalar_mmse_map([0.5, 0.5], [0.0, 1.0], 1.0, np.zeros(3))


def test_format_scalar_map():
    text = denoiser.format_scalar_map([0.0, 1.0], [0.0, 0.5], [0.0, 0.25])
    assert text.splitlines() == ["# y xhat xhat_fixed", "0 0 0", "1 0.5 0.25"]
