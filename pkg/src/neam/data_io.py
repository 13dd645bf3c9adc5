"""Measured-data ingestion, synthetic virtual measurements, sample files.

MERL tables use the standard binary layout: three little-endian int32
dimensions (90, 90, 180) followed by channel-planar red/green/blue slabs
of float64 in (theta_half, theta_diff, phi_diff) order. The table keeps
the stored values raw; per-channel scale factors apply at lookup time so
that write(read(file)) reproduces the payload byte for byte.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import brdf_core as bc
from .errors import BadHeader, BadMagic, Truncated

MERL_DIMS = (90, 90, 180)
MERL_SCALES = (1.0 / 1500.0, 1.15 / 1500.0, 1.66 / 1500.0)

SAMPLESET_MAGIC = b"NEAS"
SAMPLESET_VERSION = 1


@dataclass
class SampleSet:
    """Directional reflectance measurements for one material."""

    material_id: str
    wi: np.ndarray  # [n, 3]
    wo: np.ndarray  # [n, 3]
    value: np.ndarray  # [n, 3]
    source: str = "file"

    @property
    def n_samples(self):
        return self.wi.shape[0]


@dataclass
class MerlTable:
    planes: np.ndarray  # [3, 90, 90, 180], raw stored values

    @property
    def dims(self):
        return MERL_DIMS


def read_merl(path):
    """Parse a MERL-format binary table, validating header and payload size."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise Truncated(f"{path}: shorter than the 12-byte header")
    dims = struct.unpack("<3i", blob[:12])
    if tuple(dims) != MERL_DIMS:
        raise BadHeader(f"{path}: dimensions {dims}, expected {MERL_DIMS}")
    n = dims[0] * dims[1] * dims[2]
    want = 12 + 3 * n * 8
    if len(blob) < want:
        raise Truncated(f"{path}: {len(blob)} bytes, expected {want}")
    planes = np.frombuffer(blob[12 : 12 + 3 * n * 8], dtype="<f8").reshape(3, *MERL_DIMS)
    return MerlTable(planes.copy())


def write_merl(table: MerlTable, path):
    with open(path, "wb") as f:
        f.write(struct.pack("<3i", *MERL_DIMS))
        f.write(np.ascontiguousarray(table.planes, dtype="<f8").tobytes())


def merl_indices(theta_h, theta_d, phi_d):
    """Grid indices with the square-root warp on theta_half."""
    ih = np.sqrt(np.clip(theta_h / (np.pi / 2), 0.0, 1.0)) * MERL_DIMS[0]
    ih = np.clip(ih.astype(np.int64), 0, MERL_DIMS[0] - 1)
    it = np.clip((theta_d / (np.pi / 2) * MERL_DIMS[1]).astype(np.int64), 0, MERL_DIMS[1] - 1)
    pd = np.mod(phi_d, 2 * np.pi)
    pd = np.where(pd >= np.pi, pd - np.pi, pd)  # reciprocity fold
    ip = np.clip((pd / np.pi * MERL_DIMS[2]).astype(np.int64), 0, MERL_DIMS[2] - 1)
    return ih, it, ip


def merl_lookup(table: MerlTable, wi, wo):
    """Nearest-neighbor scaled lookup; below-horizon queries return zero."""
    single = np.asarray(wi).ndim == 1
    wi = np.atleast_2d(np.asarray(wi, dtype=np.float64))
    wo = np.atleast_2d(np.asarray(wo, dtype=np.float64))
    angles = bc.dirs_to_halfdiff(wi, wo)
    ih, it, ip = merl_indices(angles.theta_h, angles.theta_d, angles.phi_d)
    rgb = np.stack([table.planes[c, ih, it, ip] * MERL_SCALES[c] for c in range(3)], axis=-1)
    rgb = np.maximum(rgb, 0.0)  # negative storage marks invalid cells
    valid = (wi[:, 2] > 0) & (wo[:, 2] > 0)
    rgb[~valid] = 0.0
    return rgb[0] if single else rgb


# ---------------------------------------------------------------------------
# Direction sampling in the half/difference parameterization.

def sample_directions(n, mode="isotropic", seed=0):
    """Draw n direction pairs uniform in the half/difference angles.

    Isotropic mode fixes phi_half = 0; anisotropic mode draws it too.
    Pairs with either direction below the horizon are rejected and
    redrawn, so every returned direction is unit length with z > 0.
    """
    if mode not in ("isotropic", "anisotropic"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    rng = np.random.default_rng(seed)
    out_wi, out_wo = [], []
    got = 0
    rounds = 0
    while got < n:
        m = max(int((n - got) * 1.8), 1024)
        th = rng.uniform(0.0, np.pi / 2, m)
        ph = rng.uniform(0.0, 2 * np.pi, m) if mode == "anisotropic" else np.zeros(m)
        td = rng.uniform(0.0, np.pi / 2, m)
        pd = rng.uniform(0.0, 2 * np.pi, m)
        wi, wo = bc.halfdiff_to_dirs(bc.HalfDiffAngles(th, ph, td, pd))
        keep = (wi[:, 2] > 0) & (wo[:, 2] > 0)
        out_wi.append(wi[keep])
        out_wo.append(wo[keep])
        got += int(keep.sum())
        rounds += 1
        assert rounds < 1000, "direction sampler failed to converge"
    wi = np.concatenate(out_wi)[:n]
    wo = np.concatenate(out_wo)[:n]
    return wi, wo


# ---------------------------------------------------------------------------
# Synthetic virtual measurements.

def random_material_params(k, seed=0):
    """Plausible random analytical parameter sets for k materials."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(k):
        out.append(
            bc.AnalyticalParams(
                rho_d=rng.uniform(0.02, 0.7, 3),
                rho_s=rng.uniform(0.2, 1.0, 3),
                alpha_x=rng.uniform(0.05, 0.5),
                alpha_y=rng.uniform(0.05, 0.5),
                f0=rng.uniform(0.02, 0.3),
                n_theta=0.0,
                n_phi=0.0,
                t_theta=rng.uniform(0.0, np.pi),
            )
        )
    return out


_BENCH_ALPHAS = ((0.2, 0.3), (0.4, 0.25), (0.15, 0.4), (0.35, 0.35))


def benchmark_material_params(k=4, seed=42):
    """Specular-dominant materials tuned for planted-term benchmarks.

    Diffuse is nearly black and normal-incidence reflectance is spread
    wide, so a swapped specular term leaves a strong signature that no
    refit of the clean model can absorb, and the per-material variation
    keeps operand-only modules from explaining it away.
    """
    rng = np.random.default_rng(seed)
    f0s = np.linspace(0.35, 0.8, max(k, 2))
    out = []
    for i in range(k):
        ax, ay = _BENCH_ALPHAS[i % len(_BENCH_ALPHAS)]
        out.append(
            bc.AnalyticalParams(
                rho_d=rng.uniform(0.0, 0.05, 3),
                rho_s=rng.uniform(0.8, 1.2, 3),
                alpha_x=ax,
                alpha_y=ay,
                f0=float(f0s[i % len(f0s)]),
                n_theta=0.0,
                n_phi=0.0,
                t_theta=float(np.pi * i / max(k, 1)),
            )
        )
    return out


def _corrupted_eval(params: bc.AnalyticalParams, wi, wo, corruption):
    """GGX closed form with one term swapped for a documented alternative."""
    P = params.to_vector()[None, :]
    frame = bc.shading_frame(params.n_theta, params.n_phi, params.t_theta)
    n = np.broadcast_to(frame.n, wi.shape)
    t = np.broadcast_to(frame.t, wi.shape)
    b = np.broadcast_to(frame.b, wi.shape)
    fr = bc.ShadingFrame(n, t, b)
    h = bc.half_vector(wi, wo)
    hl = bc.to_local(fr, h)
    wil, wol = bc.to_local(fr, wi), bc.to_local(fr, wo)
    cos_i = np.einsum("ij,ij->i", n, wi)
    cos_o = np.einsum("ij,ij->i", n, wo)
    wi_dot_h = np.einsum("ij,ij->i", wi, h)
    d = bc.ggx_ndf(params.alpha_x, params.alpha_y, *hl)
    if corruption == "fresnel":
        f = bc.fresnel_dielectric_from_f0(params.f0, wi_dot_h)
    else:
        f = bc.schlick_fresnel(params.f0, wi_dot_h)
    if corruption == "geometry":
        g = bc.smith_g_height_correlated(params.alpha_x, params.alpha_y, wil, wol)
    else:
        g = bc.smith_g(params.alpha_x, params.alpha_y, wil, wol)
    if corruption == "norm":
        ie = bc.recip_norm_max(cos_i, cos_o)
    else:
        ie = bc.recip_norm(cos_i, cos_o)
    return bc.lambertian(P[:, 0:3]) + P[:, 3:6] * (d * f * g * ie)[:, None]


CORRUPTIONS = ("fresnel", "geometry", "norm")


def gen_synthetic_ggx(
    params_list, n_per_material, noise_mu=1.0, noise_sigma=0.1, seed=0, mode="anisotropic"
):
    """Virtual measurements of the analytical model with multiplicative noise.

    Each reflectance value is multiplied by an independent draw from
    N(noise_mu, noise_sigma^2), clamped at zero to keep values physical.
    """
    return _generate(params_list, n_per_material, noise_mu, noise_sigma, seed, mode, None)


def gen_corrupted_ggx(
    params_list, corruption, n_per_material, noise_mu=1.0, noise_sigma=0.0, seed=0, mode="anisotropic"
):
    """Like gen_synthetic_ggx, but the generator swaps one closed-form term.

    corruption: "fresnel" (exact dielectric instead of Schlick), "geometry"
    (height-correlated instead of separable masking), or "norm" (divide by
    the larger cosine instead of the cosine product).
    """
    if corruption not in CORRUPTIONS:
        raise ValueError(f"unknown corruption {corruption!r}; pick from {CORRUPTIONS}")
    return _generate(params_list, n_per_material, noise_mu, noise_sigma, seed, mode, corruption)


def _generate(params_list, n_per_material, noise_mu, noise_sigma, seed, mode, corruption):
    sets = []
    for m, params in enumerate(params_list):
        pair_rng_seed = np.random.SeedSequence([int(seed), 21, m])
        wi, wo = sample_directions(n_per_material, mode=mode, seed=pair_rng_seed)
        if corruption is None:
            value = bc.eval_analytical_ggx(params, wi, wo)
            source = "synthetic_ggx"
        else:
            value = _corrupted_eval(params, wi, wo, corruption)
            source = f"synthetic_ggx_{corruption}"
        if noise_sigma > 0:
            noise_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 22, m]))
            value = value * np.maximum(noise_rng.normal(noise_mu, noise_sigma, value.shape), 0.0)
        sets.append(SampleSet(f"material_{m:03d}", wi, wo, np.maximum(value, 0.0), source))
    return sets


def gen_fixed_wo_dense_wi(params_list, wo, n_per_material, noise_mu=1.0, noise_sigma=0.1, seed=0):
    """Dense incoming-direction sweeps against one fixed outgoing direction.

    Stands in for single-view device captures (one viewing direction,
    thousands of lighting directions): wi is drawn uniformly over the
    upper hemisphere, wo is shared by every sample.
    """
    wo = np.asarray(wo, dtype=np.float64)
    wo = wo / np.linalg.norm(wo)
    if wo[2] <= 0:
        raise ValueError("fixed outgoing direction must be above the horizon")
    sets = []
    for m, params in enumerate(params_list):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 23, m]))
        z = rng.uniform(0.0, 1.0, n_per_material)
        phi = rng.uniform(0.0, 2 * np.pi, n_per_material)
        r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
        wi = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
        wi = wi[wi[:, 2] > 1e-9]
        wos = np.broadcast_to(wo, wi.shape).copy()
        value = bc.eval_analytical_ggx(params, wi, wos)
        if noise_sigma > 0:
            noise_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 24, m]))
            value = value * np.maximum(noise_rng.normal(noise_mu, noise_sigma, value.shape), 0.0)
        sets.append(SampleSet(f"material_{m:03d}", wi, wos, np.maximum(value, 0.0), "synthetic_fixed_wo"))
    return sets


def merl_to_sampleset(table: MerlTable, n, seed=0, material_id="merl"):
    """Query a MERL table at random isotropic direction pairs."""
    wi, wo = sample_directions(n, mode="isotropic", seed=seed)
    return SampleSet(material_id, wi, wo, merl_lookup(table, wi, wo), source="merl")


# ---------------------------------------------------------------------------
# Sample-set binary files: magic, version, count, then 9 x f32 per record.

def write_sampleset(s: SampleSet, path):
    records = np.concatenate([s.wi, s.wo, s.value], axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(SAMPLESET_MAGIC)
        f.write(struct.pack("<II", SAMPLESET_VERSION, s.n_samples))
        f.write(records.tobytes())


def read_sampleset(path, material_id=None):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != SAMPLESET_MAGIC:
        raise BadMagic(f"{path}: not a sample-set file")
    if len(blob) < 12:
        raise Truncated(f"{path}: header incomplete")
    version, count = struct.unpack("<II", blob[4:12])
    if version != SAMPLESET_VERSION:
        raise BadHeader(f"{path}: unsupported version {version}")
    want = 12 + count * 9 * 4
    if len(blob) < want:
        raise Truncated(f"{path}: {len(blob)} bytes, expected {want}")
    rec = np.frombuffer(blob[12:want], dtype="<f4").reshape(count, 9).astype(np.float64)
    name = material_id if material_id is not None else _stem(path)
    return SampleSet(name, rec[:, 0:3], rec[:, 3:6], rec[:, 6:9], source="file")


def _stem(path):
    import os

    return os.path.splitext(os.path.basename(str(path)))[0]


def data_content_hash(sets):
    """Stable digest over sample contents; guards checkpoint resumption."""
    h = hashlib.sha256()
    for s in sets:
        h.update(s.material_id.encode())
        for arr in (s.wi, s.wo, s.value):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
