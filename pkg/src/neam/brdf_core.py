"""Closed-form reflectance terms, shading-frame math, and parameter codecs.

Directions are numpy arrays, shape (3,) or [B, 3], expressed in the local
geometric frame (z = geometric normal). Material parameters travel either
as an `AnalyticalParams` record or as a decoded [B, 12] array with the
layout documented by `PARAM_NAMES`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import OutOfRange

COS_EPS = 1e-6  # clamp on cosine denominators; keeps 1/E and gradients bounded
ALPHA_MIN = 1e-3  # roughness floor; the NDF diverges as alpha -> 0

PARAM_NAMES = (
    "rho_d_r", "rho_d_g", "rho_d_b",
    "rho_s_r", "rho_s_g", "rho_s_b",
    "alpha_x", "alpha_y", "f0",
    "n_theta", "n_phi", "t_theta",
)
N_ANALYTICAL = 12


@dataclass
class AnalyticalParams:
    """The 12 scalar material parameters of the anisotropic specular models."""

    rho_d: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    rho_s: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    alpha_x: float = 0.3
    alpha_y: float = 0.3
    f0: float = 0.05
    n_theta: float = 0.0
    n_phi: float = 0.0
    t_theta: float = 0.0

    def __post_init__(self):
        self.rho_d = np.asarray(self.rho_d, dtype=np.float64)
        self.rho_s = np.asarray(self.rho_s, dtype=np.float64)

    def validate(self):
        if np.any(self.rho_d < 0) or np.any(self.rho_s < 0):
            raise OutOfRange("albedos must be >= 0")
        for a in (self.alpha_x, self.alpha_y):
            if not (ALPHA_MIN <= a <= 1.0):
                raise OutOfRange(f"roughness {a} outside [{ALPHA_MIN}, 1]")
        if not (0.0 <= self.f0 <= 1.0):
            raise OutOfRange(f"f0 {self.f0} outside [0, 1]")
        if not (0.0 <= self.n_theta < np.pi / 2):
            raise OutOfRange(f"n_theta {self.n_theta} outside [0, pi/2)")
        if not (0.0 <= self.n_phi < 2 * np.pi):
            raise OutOfRange(f"n_phi {self.n_phi} outside [0, 2pi)")
        if not (0.0 <= self.t_theta < 2 * np.pi):
            raise OutOfRange(f"t_theta {self.t_theta} outside [0, 2pi)")
        return self

    def to_vector(self):
        return np.concatenate(
            [
                self.rho_d,
                self.rho_s,
                [self.alpha_x, self.alpha_y, self.f0, self.n_theta, self.n_phi, self.t_theta],
            ]
        )

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (N_ANALYTICAL,):
            raise OutOfRange(f"expected {N_ANALYTICAL} parameters, got shape {v.shape}")
        return cls(v[0:3], v[3:6], v[6], v[7], v[8], v[9], v[10], v[11])


def default_params():
    """Fixed optimizer starting point (mid-range values)."""
    return AnalyticalParams()


# ---------------------------------------------------------------------------
# Smooth reparameterization: the optimizer works on unconstrained raw values;
# albedos go through softplus, roughness/f0 through scaled sigmoids, angles
# stay as-is (wrapped only when materializing an AnalyticalParams record).

def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0
    ex = np.exp(np.where(pos, -x, x))  # exponent always <= 0
    return np.where(pos, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def decode_params(raw):
    """Map raw [..., 12] optimizer values onto the constrained parameter space."""
    raw = np.asarray(raw, dtype=np.float64)
    out = np.empty_like(raw)
    out[..., 0:6] = np.logaddexp(0.0, raw[..., 0:6])
    out[..., 6:8] = ALPHA_MIN + (1.0 - ALPHA_MIN) * _sigmoid(raw[..., 6:8])
    out[..., 8] = _sigmoid(raw[..., 8])
    out[..., 9:12] = raw[..., 9:12]
    return out


def decode_jacobian(raw):
    """Diagonal d(decoded)/d(raw), same shape as `raw`."""
    raw = np.asarray(raw, dtype=np.float64)
    jac = np.empty_like(raw)
    jac[..., 0:6] = _sigmoid(raw[..., 0:6])
    s = _sigmoid(raw[..., 6:8])
    jac[..., 6:8] = (1.0 - ALPHA_MIN) * s * (1.0 - s)
    s0 = _sigmoid(raw[..., 8])
    jac[..., 8] = s0 * (1.0 - s0)
    jac[..., 9:12] = 1.0
    return jac


def encode_params(decoded):
    """Inverse of decode_params; decoded values must be strictly inside range."""
    decoded = np.asarray(decoded, dtype=np.float64)
    out = np.empty_like(decoded)
    y = np.clip(decoded[..., 0:6], 1e-9, None)
    out[..., 0:6] = y + np.log(-np.expm1(-y))
    t = np.clip((decoded[..., 6:8] - ALPHA_MIN) / (1.0 - ALPHA_MIN), 1e-9, 1 - 1e-9)
    out[..., 6:8] = np.log(t) - np.log1p(-t)
    f = np.clip(decoded[..., 8], 1e-9, 1 - 1e-9)
    out[..., 8] = np.log(f) - np.log1p(-f)
    out[..., 9:12] = decoded[..., 9:12]
    return out


def params_from_decoded_vector(v):
    """Materialize a record from a decoded 12-vector, wrapping angles into range."""
    v = np.array(v, dtype=np.float64)
    v[9] = min(max(v[9], 0.0), np.pi / 2 - 1e-9)
    v[10] = np.mod(v[10], 2 * np.pi)
    v[11] = np.mod(v[11], 2 * np.pi)
    return AnalyticalParams.from_vector(v)


# ---------------------------------------------------------------------------
# Shading frame and half/difference parameterization.

class ShadingFrame(NamedTuple):
    n: np.ndarray
    t: np.ndarray
    b: np.ndarray


class HalfDiffAngles(NamedTuple):
    theta_h: np.ndarray
    phi_h: np.ndarray
    theta_d: np.ndarray
    phi_d: np.ndarray


def shading_frame(n_theta, n_phi, t_theta):
    """Orthonormal (n, t, b) from spherical normal angles and a tangent rotation.

    The reference tangent is the world x-axis projected onto the plane
    perpendicular to n, then rotated about n by t_theta. Inputs broadcast;
    outputs have shape [..., 3].
    """
    n_theta, n_phi, t_theta = np.broadcast_arrays(
        np.asarray(n_theta, dtype=np.float64),
        np.asarray(n_phi, dtype=np.float64),
        np.asarray(t_theta, dtype=np.float64),
    )
    st, ct = np.sin(n_theta), np.cos(n_theta)
    n = np.stack([st * np.cos(n_phi), st * np.sin(n_phi), ct], axis=-1)
    x = np.zeros_like(n)
    x[..., 0] = 1.0
    w = x - n[..., 0:1] * n
    w_norm = np.maximum(np.linalg.norm(w, axis=-1, keepdims=True), 1e-12)
    t0 = w / w_norm
    ctt, stt = np.cos(t_theta), np.sin(t_theta)
    t = t0 * ctt[..., None] + np.cross(n, t0) * stt[..., None]
    b = np.cross(n, t)
    return ShadingFrame(n, t, b)


def to_local(frame: ShadingFrame, v):
    """Components of v in the (t, b, n) basis."""
    return (
        np.sum(v * frame.t, axis=-1),
        np.sum(v * frame.b, axis=-1),
        np.sum(v * frame.n, axis=-1),
    )


def half_vector(wi, wo):
    s = wi + wo
    return s / np.maximum(np.linalg.norm(s, axis=-1, keepdims=True), 1e-12)


def _wrap_2pi(x):
    y = np.mod(x, 2 * np.pi)
    return np.where(y >= 2 * np.pi, 0.0, y)  # mod can round up to the period itself


def dirs_to_halfdiff(wi, wo):
    """(wi, wo) -> half/difference angles; inverse of halfdiff_to_dirs."""
    wi = np.asarray(wi, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    h = half_vector(wi, wo)
    theta_h = np.arccos(np.clip(h[..., 2], -1.0, 1.0))
    phi_h = _wrap_2pi(np.arctan2(h[..., 1], h[..., 0]))
    cp, sp = np.cos(phi_h), np.sin(phi_h)
    ct, st = np.cos(theta_h), np.sin(theta_h)
    # rotate wi by -phi_h about z, then -theta_h about y
    tx = cp * wi[..., 0] + sp * wi[..., 1]
    ty = -sp * wi[..., 0] + cp * wi[..., 1]
    tz = wi[..., 2]
    dx = ct * tx - st * tz
    dy = ty
    dz = st * tx + ct * tz
    theta_d = np.arccos(np.clip(dz, -1.0, 1.0))
    phi_d = _wrap_2pi(np.arctan2(dy, dx))
    return HalfDiffAngles(theta_h, phi_h, theta_d, phi_d)


def halfdiff_to_dirs(angles: HalfDiffAngles):
    """Half/difference angles -> (wi, wo), both unit length."""
    th, ph, td, pd = (np.asarray(a, dtype=np.float64) for a in angles)
    if np.any(th < 0) or np.any(th > np.pi / 2 + 1e-12):
        raise OutOfRange("theta_h outside [0, pi/2]")
    if np.any(td < 0) or np.any(td > np.pi / 2 + 1e-12):
        raise OutOfRange("theta_d outside [0, pi/2]")
    if np.any(ph < 0) or np.any(ph >= 2 * np.pi) or np.any(pd < 0) or np.any(pd >= 2 * np.pi):
        raise OutOfRange("phi angles outside [0, 2pi)")
    d = np.stack(
        [np.sin(td) * np.cos(pd), np.sin(td) * np.sin(pd), np.cos(td)], axis=-1
    )
    ct, st = np.cos(th), np.sin(th)
    # rotate d by theta_h about y, then phi_h about z
    rx = ct * d[..., 0] + st * d[..., 2]
    ry = d[..., 1]
    rz = -st * d[..., 0] + ct * d[..., 2]
    cp, sp = np.cos(ph), np.sin(ph)
    wi = np.stack([cp * rx - sp * ry, sp * rx + cp * ry, rz], axis=-1)
    h = np.stack([st * cp, st * sp, ct], axis=-1)
    wo = 2.0 * np.sum(wi * h, axis=-1, keepdims=True) * h - wi
    return wi, wo


# ---------------------------------------------------------------------------
# Scalar term formulas (vectorized over a leading batch axis).

def lambertian(rho_d):
    return np.asarray(rho_d, dtype=np.float64) / np.pi


def ggx_ndf(alpha_x, alpha_y, hx, hy, hz):
    q = (hx / alpha_x) ** 2 + (hy / alpha_y) ** 2 + hz**2
    q = np.maximum(q, 1e-16)
    return np.where(hz > 0, 1.0 / (np.pi * alpha_x * alpha_y * q * q), 0.0)


def beckmann_ndf(alpha_x, alpha_y, hx, hy, hz):
    hz2 = np.maximum(hz * hz, 1e-16)
    e = np.exp(-((hx / alpha_x) ** 2 + (hy / alpha_y) ** 2) / hz2)
    return np.where(hz > 0, e / (np.pi * alpha_x * alpha_y * hz2 * hz2), 0.0)


def ward_lobe(alpha_x, alpha_y, hx, hy, hz):
    """Exponential lobe of the anisotropic Ward model (not a normalized NDF)."""
    hz2 = np.maximum(hz * hz, 1e-16)
    e = np.exp(-((hx / alpha_x) ** 2 + (hy / alpha_y) ** 2) / hz2)
    return np.where(hz > 0, e / (np.pi * alpha_x * alpha_y), 0.0)


def schlick_fresnel(f0, cos_d):
    c = np.clip(cos_d, 0.0, 1.0)
    return f0 + (1.0 - f0) * (1.0 - c) ** 5


def fresnel_dielectric_from_f0(f0, cos_d):
    """Exact unpolarized dielectric Fresnel with eta derived from f0."""
    f0 = np.clip(f0, 0.0, 1.0 - 1e-9)
    r = np.sqrt(f0)
    eta = (1.0 + r) / (1.0 - r)
    c = np.clip(cos_d, 0.0, 1.0)
    sin2t = (1.0 - c * c) / (eta * eta)
    ct = np.sqrt(np.clip(1.0 - sin2t, 0.0, 1.0))
    rs = (c - eta * ct) / np.maximum(c + eta * ct, 1e-12)
    rp = (eta * c - ct) / np.maximum(eta * c + ct, 1e-12)
    return np.clip(0.5 * (rs * rs + rp * rp), 0.0, 1.0)


def smith_g1(alpha_x, alpha_y, vx, vy, vz):
    s = (alpha_x * vx) ** 2 + (alpha_y * vy) ** 2
    denom = np.maximum(vz + np.sqrt(vz * vz + s), 1e-12)
    return np.where(vz > 0, 2.0 * vz / denom, 0.0)


def smith_g(alpha_x, alpha_y, wi_local, wo_local):
    """Separable masking-shadowing: G1(wi) * G1(wo)."""
    return smith_g1(alpha_x, alpha_y, *wi_local) * smith_g1(alpha_x, alpha_y, *wo_local)


def smith_g_height_correlated(alpha_x, alpha_y, wi_local, wo_local):
    def lam(vx, vy, vz):
        vz2 = np.maximum(vz * vz, 1e-16)
        s = ((alpha_x * vx) ** 2 + (alpha_y * vy) ** 2) / vz2
        return 0.5 * (-1.0 + np.sqrt(1.0 + s))

    above = (wi_local[2] > 0) & (wo_local[2] > 0)
    g = 1.0 / (1.0 + lam(*wi_local) + lam(*wo_local))
    return np.where(above, g, 0.0)


def vcavity_g(nh, cos_i, cos_o, voh):
    voh = np.maximum(voh, COS_EPS)
    g = np.minimum(1.0, np.minimum(2.0 * nh * cos_o / voh, 2.0 * nh * cos_i / voh))
    return np.maximum(g, 0.0)


def recip_norm(cos_i, cos_o):
    return 1.0 / (4.0 * np.maximum(cos_i, COS_EPS) * np.maximum(cos_o, COS_EPS))


def recip_norm_sqrt(cos_i, cos_o):
    return 1.0 / (4.0 * np.sqrt(np.maximum(cos_i, COS_EPS) * np.maximum(cos_o, COS_EPS)))


def recip_norm_max(cos_i, cos_o):
    """Alternative normalization by the larger cosine (planted-term generator)."""
    return 1.0 / (4.0 * np.maximum(np.maximum(cos_i, cos_o), COS_EPS))


# ---------------------------------------------------------------------------
# Full closed-form model evaluations.

def _batched(P, wi, wo):
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    wi = np.atleast_2d(np.asarray(wi, dtype=np.float64))
    wo = np.atleast_2d(np.asarray(wo, dtype=np.float64))
    b = max(P.shape[0], wi.shape[0])
    P = np.broadcast_to(P, (b, N_ANALYTICAL))
    wi = np.broadcast_to(wi, (b, 3))
    wo = np.broadcast_to(wo, (b, 3))
    return P, wi, wo


def eval_closed_form(model_name, P, wi, wo):
    """Evaluate a pure analytical model; P is a decoded [B, 12] array."""
    P, wi, wo = _batched(P, wi, wo)
    frame = shading_frame(P[:, 9], P[:, 10], P[:, 11])
    h = half_vector(wi, wo)
    hl = to_local(frame, h)
    ax, ay, f0 = P[:, 6], P[:, 7], P[:, 8]
    cos_i = np.sum(frame.n * wi, axis=-1)
    cos_o = np.sum(frame.n * wo, axis=-1)
    if model_name == "ggx":
        d = ggx_ndf(ax, ay, *hl)
        f = schlick_fresnel(f0, np.sum(wi * h, axis=-1))
        g = smith_g(ax, ay, to_local(frame, wi), to_local(frame, wo))
        ie = recip_norm(cos_i, cos_o)
    elif model_name == "cooktorrance":
        d = beckmann_ndf(ax, ay, *hl)
        f = schlick_fresnel(f0, np.sum(wi * h, axis=-1))
        g = vcavity_g(hl[2], cos_i, cos_o, np.sum(wo * h, axis=-1))
        ie = recip_norm(cos_i, cos_o)
    elif model_name == "ward":
        d = ward_lobe(ax, ay, *hl)
        f = np.ones_like(d)
        g = np.ones_like(d)
        ie = recip_norm_sqrt(cos_i, cos_o)
    else:
        raise ValueError(f"unknown analytical model {model_name!r}")
    spec = (d * f * g * ie)[:, None]
    return lambertian(P[:, 0:3]) + P[:, 3:6] * spec


def _as_vector(p):
    return p.to_vector() if isinstance(p, AnalyticalParams) else np.asarray(p)


def eval_analytical_ggx(p, wi, wo):
    """Lambertian plus anisotropic GGX specular lobe."""
    out = eval_closed_form("ggx", _as_vector(p), wi, wo)
    return out[0] if np.asarray(wi).ndim == 1 else out


def eval_analytical_cooktorrance(p, wi, wo):
    """Lambertian plus Beckmann / V-cavity / Schlick specular lobe."""
    out = eval_closed_form("cooktorrance", _as_vector(p), wi, wo)
    return out[0] if np.asarray(wi).ndim == 1 else out


def eval_analytical_ward(p, wi, wo):
    """Lambertian plus the anisotropic Ward exponential lobe."""
    out = eval_closed_form("ward", _as_vector(p), wi, wo)
    return out[0] if np.asarray(wi).ndim == 1 else out


# Spec'd single-sample node operations -------------------------------------

def node_lambertian(p: AnalyticalParams):
    return lambertian(p.rho_d)


def node_distribution_ggx(p: AnalyticalParams, h):
    frame = shading_frame(p.n_theta, p.n_phi, p.t_theta)
    hx, hy, hz = to_local(frame, np.asarray(h, dtype=np.float64))
    return float(ggx_ndf(p.alpha_x, p.alpha_y, hx, hy, hz))


def node_fresnel_schlick(p: AnalyticalParams, wi, h):
    return float(schlick_fresnel(p.f0, np.dot(wi, h)))


def node_geometry_smith(p: AnalyticalParams, wi, wo):
    frame = shading_frame(p.n_theta, p.n_phi, p.t_theta)
    return float(
        smith_g(p.alpha_x, p.alpha_y, to_local(frame, np.asarray(wi)), to_local(frame, np.asarray(wo)))
    )


def node_recip_norm(wi, wo, frame: ShadingFrame):
    return float(recip_norm(np.dot(frame.n, wi), np.dot(frame.n, wo)))
