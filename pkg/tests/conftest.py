import numpy as np
import pytest

from neam import brdf_core as bc
from neam import data_io
from neam.data_io import sample_directions


def random_configs(n, seed=0, max_n_theta=0.4, min_z=0.05):
    """Non-degenerate (params, wi, wo) draws for numeric checks.

    Directions stay away from the horizon and shading-normal tilts stay
    moderate so clamp branches and pole singularities are never active.
    """
    rng = np.random.default_rng(seed)
    raw = rng.normal(0.0, 0.8, (2 * n, 12))
    raw[:, 9] = rng.uniform(0.0, max_n_theta, 2 * n)
    raw[:, 10] = rng.uniform(0.0, 2 * np.pi, 2 * n)
    raw[:, 11] = rng.uniform(0.0, 2 * np.pi, 2 * n)
    P = bc.decode_params(raw)
    wi, wo = sample_directions(2 * n, mode="anisotropic", seed=rng.integers(1 << 31))
    keep = (wi[:, 2] > min_z) & (wo[:, 2] > min_z)
    P, wi, wo = P[keep][:n], wi[keep][:n], wo[keep][:n]
    assert P.shape[0] == n, "not enough non-degenerate draws; lower min_z"
    return P, wi, wo


@pytest.fixture(scope="session")
def config_batch():
    return random_configs(256, seed=123)


def toy_corrupted_data(n_materials=2, n=1200, seed=0):
    """Samples from diffuse * Beckmann while the toy graph computes
    diffuse * GGX: the ndf slot is the planted culprit."""
    params = data_io.random_material_params(n_materials, seed=seed)
    out = []
    for m, p in enumerate(params):
        wi, wo = sample_directions(n, "anisotropic", seed=seed * 101 + m)
        frame = bc.shading_frame(p.n_theta, p.n_phi, p.t_theta)
        h = bc.half_vector(wi, wo)
        hl = bc.to_local(bc.ShadingFrame(*(np.broadcast_to(v, wi.shape) for v in frame)), h)
        d = bc.beckmann_ndf(p.alpha_x, p.alpha_y, *hl)
        value = bc.lambertian(p.rho_d)[None, :] * d[:, None]
        out.append(data_io.SampleSet(f"toy_{m}", wi, wo, value, "toy_corrupted"))
    return out
