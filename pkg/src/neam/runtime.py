"""Per-material fitting, model files, proxy refits, shader export, slices.

Fitting freezes all module weights and optimizes only the 12 analytical
plus p_neural latent parameters of one material. Models serialize to a
checksummed "NEAM" binary; fit results serialize to a human-editable
key=value text block.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import brdf_core as bc
from . import optimize as opt
from . import shader
from .data_io import SampleSet
from .errors import (
    BadMagic,
    ChecksumMismatch,
    NonFinite,
    OutOfRange,
    Truncated,
    VersionUnsupported,
)
from .graph import BUILDERS, EnhancedModel, EnhancementState, all_zero_model, forward_batch
from .neural import NeuralModule

MODEL_MAGIC = b"NEAM"
MODEL_VERSION = 1


@dataclass
class FitResult:
    analytical: bc.AnalyticalParams
    neural: np.ndarray
    final_loss: float
    epochs_run: int

    def param_vector(self):
        return np.concatenate([self.analytical.to_vector(), self.neural])


# ---------------------------------------------------------------------------
# Fitting.

DEFAULT_FIT_BATCH = 2048  # more optimizer steps per epoch than one full-batch pass


def fit_material(model: EnhancedModel, data: SampleSet, epochs=1000, lr=1e-3, seed=0, batch_size=None):
    """Optimize the per-material parameter vector against one sample set.

    Module weights never change; a diverging run restores the best
    parameters seen and reports them.
    """
    tm = opt.TrainableModel.fresh(model, 1, seed)
    weights_before = [w.copy() for m in model.modules.values() for w in m.weights]
    td, td_empty = opt.pack_samplesets([data], val_fraction=0.0, seed=seed)
    if batch_size is None:
        batch_size = min(max(td.n_samples, 1), DEFAULT_FIT_BATCH)
    cfg = opt.TrainConfig(batch_size=batch_size, seed=seed, lr=lr)
    epochs_run = epochs
    if epochs > 0:
        try:
            opt.train_model(tm, td, td_empty, epochs, cfg, train_weights=False)
        except NonFinite:
            pass  # best parameters were restored by the trainer
    final_loss = opt.evaluate_loss(tm, td) if td.n_samples else 0.0
    weights_after = [w for m in model.modules.values() for w in m.weights]
    for before, after in zip(weights_before, weights_after):
        assert np.array_equal(before, after, equal_nan=True), "module weights changed during fitting"
    decoded = bc.decode_params(tm.analytical_raw[0])
    return FitResult(bc.params_from_decoded_vector(decoded), tm.neural[0].copy(), final_loss, epochs_run)


def fit_analytical_proxy(data: SampleSet, model_name="ggx", epochs=1000, lr=1e-3, seed=0):
    """Best pure-analytical fit (all-zero state), e.g. to drive standard
    importance sampling of the original model."""
    graph = BUILDERS[model_name]()
    fit = fit_material(all_zero_model(graph), data, epochs=epochs, lr=lr, seed=seed)
    return fit.analytical


def edit_params(fit: FitResult, edits: dict):
    """Return a copy of a fit with fields changed; ranges are enforced."""
    p = bc.AnalyticalParams(
        fit.analytical.rho_d.copy(),
        fit.analytical.rho_s.copy(),
        fit.analytical.alpha_x,
        fit.analytical.alpha_y,
        fit.analytical.f0,
        fit.analytical.n_theta,
        fit.analytical.n_phi,
        fit.analytical.t_theta,
    )
    neural = fit.neural.copy()
    for key, value in edits.items():
        if key in ("rho_d", "rho_s"):
            setattr(p, key, np.asarray(value, dtype=np.float64) * np.ones(3))
        elif key in ("alpha_x", "alpha_y", "f0", "n_theta", "n_phi", "t_theta"):
            setattr(p, key, float(value))
        elif key == "neural":
            neural = np.asarray(value, dtype=np.float64)
            if neural.shape != fit.neural.shape:
                raise OutOfRange(f"latent vector must keep length {fit.neural.size}")
        else:
            raise OutOfRange(f"unknown parameter field {key!r}")
    p.validate()
    return FitResult(p, neural, fit.final_loss, fit.epochs_run)


def eval_fit(model: EnhancedModel, fit: FitResult, wi, wo):
    """Evaluate a fitted model at direction arrays."""
    wi = np.atleast_2d(np.asarray(wi, dtype=np.float64))
    n = wi.shape[0]
    P = np.tile(fit.analytical.to_vector(), (n, 1))
    Z = np.tile(fit.neural, (n, 1))
    rgb, _ = forward_batch(model, P, Z, wi, np.atleast_2d(np.asarray(wo, dtype=np.float64)))
    return rgb


# ---------------------------------------------------------------------------
# Model files.

def save_model(model: EnhancedModel, path):
    body = bytearray()
    name = model.graph.model_name.encode()
    body += struct.pack("<H", len(name)) + name
    body += struct.pack("<I", model.graph.n_slots)
    body += bytes(model.state.bits)
    body += struct.pack("<I", model.p_neural)
    slope = next(iter(model.modules.values())).leaky_slope if model.modules else 0.01
    body += struct.pack("<3d", bc.COS_EPS, bc.ALPHA_MIN, slope)
    body += struct.pack("<I", len(model.modules))
    for slot in sorted(model.modules):
        m = model.modules[slot]
        body += struct.pack("<IB", slot, len(m.dims))
        body += struct.pack(f"<{len(m.dims)}I", *m.dims)
        for w, b in zip(m.weights, m.biases):
            body += np.ascontiguousarray(w, dtype="<f8").tobytes()
            body += np.ascontiguousarray(b, dtype="<f8").tobytes()
    blob = MODEL_MAGIC + struct.pack("<I", MODEL_VERSION) + bytes(body)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(blob)


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise Truncated(f"{self.path}: model file ends early")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MODEL_MAGIC:
        raise BadMagic(f"{path}: not a model file")
    if len(blob) < 12:
        raise Truncated(f"{path}: shorter than any valid model file")
    (crc,) = struct.unpack("<I", blob[-4:])
    if crc != (zlib.crc32(blob[:-4]) & 0xFFFFFFFF):
        raise ChecksumMismatch(f"{path}: model checksum mismatch")
    r = _Reader(blob[:-4], path)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != MODEL_VERSION:
        raise VersionUnsupported(f"{path}: model file version {version}")
    (name_len,) = r.unpack("<H")
    name = r.take(name_len).decode()
    if name not in BUILDERS:
        raise BadMagic(f"{path}: unknown model name {name!r}")
    (n_slots,) = r.unpack("<I")
    bits = tuple(r.take(n_slots))
    (p_neural,) = r.unpack("<I")
    _eps, _amin, slope = r.unpack("<3d")
    (n_modules,) = r.unpack("<I")
    graph = BUILDERS[name]()
    modules = {}
    for _ in range(n_modules):
        slot, ndims = r.unpack("<IB")
        dims = r.unpack(f"<{ndims}I")
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(
                np.frombuffer(r.take(fan_in * fan_out * 8), dtype="<f8").reshape(fan_in, fan_out).copy()
            )
            biases.append(np.frombuffer(r.take(fan_out * 8), dtype="<f8").copy())
        modules[slot] = NeuralModule(tuple(dims), weights, biases, slope)
    return EnhancedModel(graph, EnhancementState(bits), modules, p_neural).validate()


# ---------------------------------------------------------------------------
# Fit files: key = value text, hand-editable.

def fit_to_text(model_name, state: EnhancementState, fit: FitResult):
    p = fit.analytical
    lines = [
        f"model = {model_name}",
        f"state = {state.to_string()}",
        f"final_loss = {float(fit.final_loss)!r}",
        f"epochs_run = {fit.epochs_run}",
        "rho_d = " + " ".join(repr(float(v)) for v in p.rho_d),
        "rho_s = " + " ".join(repr(float(v)) for v in p.rho_s),
        f"alpha_x = {float(p.alpha_x)!r}",
        f"alpha_y = {float(p.alpha_y)!r}",
        f"f0 = {float(p.f0)!r}",
        f"n_theta = {float(p.n_theta)!r}",
        f"n_phi = {float(p.n_phi)!r}",
        f"t_theta = {float(p.t_theta)!r}",
        "neural = " + " ".join(repr(float(v)) for v in fit.neural),
    ]
    return "\n".join(lines) + "\n"


def fit_from_text(text):
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    try:
        p = bc.AnalyticalParams(
            np.array([float(v) for v in fields["rho_d"].split()]),
            np.array([float(v) for v in fields["rho_s"].split()]),
            float(fields["alpha_x"]),
            float(fields["alpha_y"]),
            float(fields["f0"]),
            float(fields["n_theta"]),
            float(fields["n_phi"]),
            float(fields["t_theta"]),
        )
        neural = np.array([float(v) for v in fields["neural"].split()])
        fit = FitResult(p, neural, float(fields["final_loss"]), int(fields["epochs_run"]))
        return fields["model"], EnhancementState.from_string(fields["state"]), fit
    except KeyError as e:
        raise Truncated(f"fit text missing field {e}") from e


# ---------------------------------------------------------------------------
# Shader export.

def export_shader(model: EnhancedModel, fit: FitResult | None, path):
    text = shader.emit_shader(
        model,
        None if fit is None else fit.analytical.to_vector(),
        None if fit is None else fit.neural,
    )
    with open(path, "w") as f:
        f.write(text)
    return text


# ---------------------------------------------------------------------------
# PFM slice images.

def write_pfm(path, img):
    """Color PFM, little-endian (negative scale), rows bottom to top."""
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape[0], img.shape[1]
    with open(path, "wb") as f:
        f.write(b"PF\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(img).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        if f.readline().strip() != b"PF":
            raise BadMagic(f"{path}: not a color PFM file")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(w * h * 3 * 4), dtype="<f4" if scale < 0 else ">f4")
    if data.size != w * h * 3:
        raise Truncated(f"{path}: PFM payload incomplete")
    return np.flipud(data.reshape(h, w, 3)).astype(np.float64)


def concentric_square_to_hemisphere(u, v):
    """Shirley-Chiu concentric map from [0,1]^2 onto the upper hemisphere.

    Returns (directions [n, 3], valid mask); points outside the unit disk
    are flagged invalid.
    """
    a = 2.0 * np.asarray(u) - 1.0
    b = 2.0 * np.asarray(v) - 1.0
    r = np.where(np.abs(a) > np.abs(b), np.abs(a), np.abs(b))
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(
            np.abs(a) > np.abs(b),
            (np.pi / 4) * np.where(a != 0, b / np.where(a == 0, 1.0, a), 0.0),
            np.pi / 2 - (np.pi / 4) * np.where(b != 0, a / np.where(b == 0, 1.0, b), 0.0),
        )
    phi = np.where((a < 0) & (np.abs(a) > np.abs(b)), phi + np.pi, phi)
    phi = np.where((b < 0) & (np.abs(b) >= np.abs(a)), phi + np.pi, phi)
    x = r * np.cos(phi)
    y = r * np.sin(phi)
    z2 = 1.0 - x * x - y * y
    valid = z2 > 0
    z = np.sqrt(np.maximum(z2, 0.0))
    return np.stack([x, y, z], axis=-1), valid


def render_slice(model: EnhancedModel, fit: FitResult, mode, resolution, path=None):
    """Cosine-weighted reflectance slice as a float image.

    mode: ("fixed_wo", theta_o, phi_o) maps the image square onto the
    incoming hemisphere (concentric map); ("theta_h_theta_d",) sweeps the
    half/difference angle plane at phi_h = 0, phi_d = pi/2.
    """
    if resolution < 8:
        raise OutOfRange("slice resolution must be >= 8")
    px = (np.arange(resolution) + 0.5) / resolution
    u, v = np.meshgrid(px, px)
    if mode[0] == "fixed_wo":
        theta_o, phi_o = float(mode[1]), float(mode[2])
        wi, valid = concentric_square_to_hemisphere(u.ravel(), v.ravel())
        wo = np.tile(
            [np.sin(theta_o) * np.cos(phi_o), np.sin(theta_o) * np.sin(phi_o), np.cos(theta_o)],
            (wi.shape[0], 1),
        )
    elif mode[0] == "theta_h_theta_d":
        th = (u.ravel() * (np.pi / 2 - 1e-3))
        td = (v.ravel() * (np.pi / 2 - 1e-3))
        angles = bc.HalfDiffAngles(th, np.zeros_like(th), td, np.full_like(td, np.pi / 2))
        wi, wo = bc.halfdiff_to_dirs(angles)
        valid = (wi[:, 2] > 0) & (wo[:, 2] > 0)
    else:
        raise OutOfRange(f"unknown slice mode {mode[0]!r}")
    rgb = np.zeros((resolution * resolution, 3))
    if valid.any():
        vals = eval_fit(model, fit, wi[valid], wo[valid])
        rgb[valid] = vals * np.maximum(wi[valid, 2], 0.0)[:, None]
    img = rgb.reshape(resolution, resolution, 3)
    if path is not None:
        write_pfm(path, img)
    return img
