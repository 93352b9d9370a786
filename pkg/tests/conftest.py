import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

sys.path.insert(0, str(Path(__file__).parent))

from pnpgmm import gmm  # noqa: E402
from pnpgmm.patches import PatchGeometry, extract_patches  # noqa: E402

ACCEPTANCE_LINES = []


def smooth_image(rng, h, w, width=1.5, scale=1.0):
    img = gaussian_filter(rng.standard_normal((h, w)), width, mode="wrap")
    return scale * img / img.std()


def fitted_model(img, side, K, seed=0, remove_means=True, max_iter=50):
    geom = PatchGeometry.for_image(img, side)
    ps = extract_patches(img, geom, remove_means)
    return gmm.train_em(ps, K, gmm.EMOptions(max_iter=max_iter, seed=seed))


def random_model(rng, n, K, floor=0.05):
    """Random well-conditioned zero-mean GMM."""
    covs = []
    for _ in range(K):
        A = rng.standard_normal((n, n))
        covs.append(A @ A.T / n + floor * np.eye(n))
    w = rng.uniform(0.5, 1.5, K)
    return gmm.GMMModel.from_covariances(w / w.sum(), np.array(covs))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
