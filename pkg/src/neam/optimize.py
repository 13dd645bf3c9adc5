"""Loss, optimizer, and the joint training loop.

Training jointly updates three parameter groups: module weights, the
per-material latent (neural) parameters, and the per-material analytical
parameters (in raw, reparameterized form). The loss is an L1 distance
between log-transformed, cosine-weighted reflectance values; the cosine
always comes from the ground-truth geometric normal (0, 0, 1), not from
the shading normal being optimized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import brdf_core as bc
from .errors import NonFinite
from .graph import EnhancedModel, backward_batch, forward_batch

LOG_CLAMP = 1e-12  # floor on 1 + value*cos before the log

_SALT_SHUFFLE = 11
_SALT_SPLIT = 12
_SALT_MODULE = 13


def derive_rng(base_seed, *keys):
    """Deterministic generator for (seed, purpose, ...) tuples."""
    return np.random.default_rng(np.random.SeedSequence([int(base_seed), *map(int, keys)]))


@dataclass(frozen=True)
class LossConfig:
    """The training objective is fixed; this records its two conventions."""

    kind: str = "log_relative_l1"
    cosine_source: str = "ground_truth_normal"


@dataclass
class TrainConfig:
    batch_size: int = 100_000
    epochs_per_stage: int = 30
    seed: int = 0
    lr: float = 1e-3
    val_fraction: float = 0.1
    grad_clip: float = 1e3


def loss_log_l1(pred, truth, cos_i):
    """Per-sample loss: sum over channels of |log(1+t*c) - log(1+p*c)|."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    c = np.asarray(cos_i, dtype=np.float64).reshape(-1, 1)
    lt = np.log(np.maximum(1.0 + truth * c, LOG_CLAMP))
    lp = np.log(np.maximum(1.0 + pred * c, LOG_CLAMP))
    out = np.abs(lt - lp).sum(axis=1)
    return out if out.size > 1 else float(out[0])


def loss_log_l1_grad(pred, truth, cos_i):
    """(per-sample loss [B], d loss / d pred [B, 3]); truth held constant."""
    c = np.asarray(cos_i, dtype=np.float64).reshape(-1, 1)
    ap = 1.0 + pred * c
    at = np.maximum(1.0 + truth * c, LOG_CLAMP)
    inside = ap > LOG_CLAMP
    ap = np.maximum(ap, LOG_CLAMP)
    diff = np.log(ap) - np.log(at)
    loss = np.abs(diff).sum(axis=1)
    dpred = np.where(inside, np.sign(diff) * c / ap, 0.0)
    return loss, dpred


class RmsProp:
    """v <- alpha*v + (1-alpha)*g^2; theta <- theta - lr*g/(sqrt(v)+eps)."""

    def __init__(self, alpha=0.9, lr=1e-3, eps=1e-8):
        self.alpha = alpha
        self.lr = lr
        self.eps = eps
        self.v = None

    def step(self, params, grads):
        if self.v is None:
            self.v = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self.v):
            v *= self.alpha
            v += (1.0 - self.alpha) * g * g
            p -= self.lr * g / (np.sqrt(v) + self.eps)


def rmsprop_step(state: RmsProp, params, grads):
    state.step(params, grads)
    return params


# ---------------------------------------------------------------------------
# Per-material parameter tables and packed training data.

def init_material_params(n_materials, p_neural=27, seed=0):
    """Starting tables: latent parameters 0.5, analytical at mid-range defaults.

    Deterministic by construction; `seed` is accepted for interface
    stability with randomized schemes.
    """
    del seed
    raw = bc.encode_params(bc.default_params().to_vector())
    analytical_raw = np.tile(raw, (n_materials, 1))
    neural = np.full((n_materials, p_neural), 0.5)
    return analytical_raw, neural


@dataclass
class TrainingData:
    wi: np.ndarray
    wo: np.ndarray
    value: np.ndarray
    mat_idx: np.ndarray
    cos_i: np.ndarray
    n_materials: int

    @property
    def n_samples(self):
        return self.wi.shape[0]


def pack_samplesets(sets, val_fraction=0.1, seed=0):
    """Concatenate per-material sample sets and split off a validation slice.

    The split holds out `val_fraction` of the directional samples of every
    material, chosen deterministically from the seed.
    """
    tr, va = [], []
    for m, s in enumerate(sets):
        n = s.wi.shape[0]
        n_val = int(round(n * val_fraction))
        perm = derive_rng(seed, _SALT_SPLIT, m).permutation(n)
        va_idx, tr_idx = perm[:n_val], perm[n_val:]
        tr.append((s.wi[tr_idx], s.wo[tr_idx], s.value[tr_idx], m))
        va.append((s.wi[va_idx], s.wo[va_idx], s.value[va_idx], m))

    def build(parts):
        wi = np.concatenate([p[0] for p in parts])
        wo = np.concatenate([p[1] for p in parts])
        value = np.concatenate([p[2] for p in parts])
        mat = np.concatenate([np.full(p[0].shape[0], p[3], dtype=np.int64) for p in parts])
        cos_i = np.maximum(wi[:, 2], 0.0)
        return TrainingData(wi, wo, value, mat, cos_i, len(parts))

    return build(tr), build(va)


# ---------------------------------------------------------------------------
# A model plus its per-material parameter tables.

@dataclass
class TrainableModel:
    model: EnhancedModel
    analytical_raw: np.ndarray  # [n_materials, 12], raw optimizer space
    neural: np.ndarray  # [n_materials, p_neural]

    @classmethod
    def fresh(cls, model, n_materials, seed=0):
        a, z = init_material_params(n_materials, model.p_neural, seed)
        return cls(model, a, z)

    def copy(self):
        return TrainableModel(self.model.copy(), self.analytical_raw.copy(), self.neural.copy())

    def param_arrays(self, train_weights=True):
        """Flat list of the arrays the optimizer updates in place."""
        arrays = [self.analytical_raw, self.neural]
        if train_weights:
            for slot in sorted(self.model.modules):
                m = self.model.modules[slot]
                arrays.extend(m.weights)
                arrays.extend(m.biases)
        return arrays

    def snapshot(self):
        return [a.copy() for a in self.param_arrays()]

    def restore(self, snap):
        for dst, src in zip(self.param_arrays(), snap):
            np.copyto(dst, src)

    def decoded_params(self, material):
        return bc.decode_params(self.analytical_raw[material])


def _scatter_sum(idx, values, n_rows):
    out = np.empty((n_rows, values.shape[1]))
    for j in range(values.shape[1]):
        out[:, j] = np.bincount(idx, weights=values[:, j], minlength=n_rows)
    return out


def _batch_grads(tm: TrainableModel, td: TrainingData, rows, train_weights):
    """Forward + loss + backward on one batch; returns (loss, grad list)."""
    A_raw = tm.analytical_raw
    A = bc.decode_params(A_raw)
    jac = bc.decode_jacobian(A_raw)
    mi = td.mat_idx[rows]
    pred, cache = forward_batch(tm.model, A[mi], tm.neural[mi], td.wi[rows], td.wo[rows])
    loss, dpred = loss_log_l1_grad(pred, td.value[rows], td.cos_i[rows])
    mean_loss = float(loss.mean())
    grads = backward_batch(tm.model, cache, dpred / rows.size)
    g_raw = _scatter_sum(mi, grads.d_analytical, td.n_materials) * jac
    g_z = _scatter_sum(mi, grads.d_neural, td.n_materials)
    out = [g_raw, g_z]
    if train_weights:
        for slot in sorted(tm.model.modules):
            dw, db = grads.d_weights[slot]
            out.extend(dw)
            out.extend(db)
    return mean_loss, out


def _clip_global_norm(grads, max_norm):
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def evaluate_loss(tm: TrainableModel, td: TrainingData, chunk=65536):
    """Mean per-sample loss over a data split (forward only)."""
    if td.n_samples == 0:
        return 0.0
    A = bc.decode_params(tm.analytical_raw)
    total = 0.0
    for start in range(0, td.n_samples, chunk):
        rows = slice(start, min(start + chunk, td.n_samples))
        mi = td.mat_idx[rows]
        pred, _ = forward_batch(tm.model, A[mi], tm.neural[mi], td.wi[rows], td.wo[rows])
        total += float(loss_log_l1(pred, td.value[rows], td.cos_i[rows]).sum())
    return total / td.n_samples


@dataclass
class TrainResult:
    train_loss: float
    val_loss: float
    epochs_run: int
    diverged: bool = False


def train_model(
    tm: TrainableModel,
    train_td: TrainingData,
    val_td: TrainingData,
    epochs,
    cfg: TrainConfig,
    train_weights=True,
    log_fn=None,
    label="",
):
    """Run `epochs` passes of RMSProp over shuffled batches, in place.

    Divergence (non-finite loss or gradient) restores the best snapshot
    seen so far and raises NonFinite. Deterministic for a fixed config:
    shuffles derive from (cfg.seed, epoch).
    """
    opt = RmsProp(lr=cfg.lr)
    params = tm.param_arrays(train_weights)
    n = train_td.n_samples
    best = (np.inf, tm.snapshot())
    if epochs <= 0:
        loss = evaluate_loss(tm, train_td)
        return TrainResult(loss, evaluate_loss(tm, val_td) if val_td.n_samples else loss, 0, False)
    train_loss = val_loss = np.inf
    for epoch in range(epochs):
        perm = derive_rng(cfg.seed, _SALT_SHUFFLE, epoch).permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            rows = perm[start : start + cfg.batch_size]
            loss, grads = _batch_grads(tm, train_td, rows, train_weights)
            norm = _clip_global_norm(grads, cfg.grad_clip)
            if not np.isfinite(loss) or not np.isfinite(norm):
                tm.restore(best[1])
                raise NonFinite(f"loss diverged at epoch {epoch} ({label or 'train'})")
            opt.step(params, grads)
            losses.append(loss)
        train_loss = float(np.mean(losses))
        val_loss = evaluate_loss(tm, val_td) if val_td.n_samples else train_loss
        if train_loss < best[0]:
            best = (train_loss, tm.snapshot())
        if log_fn is not None:
            log_fn(f"{epoch},{label},{train_loss:.6e},{val_loss:.6e}")
    return TrainResult(train_loss, val_loss, epochs, False)


def train_jointly(candidates, train_td, val_td, cfg: TrainConfig, log_fn=None, threads=1):
    """Train each candidate independently from its own starting point.

    Returns one TrainResult per candidate, in input order; a diverging
    candidate reports +inf validation loss instead of aborting the batch.
    Candidate order does not affect any individual outcome.
    """

    def run(tm):
        label = tm.model.state.to_string()
        try:
            return train_model(
                tm, train_td, val_td, cfg.epochs_per_stage, cfg,
                train_weights=True, log_fn=log_fn, label=label,
            )
        except NonFinite:
            return TrainResult(np.inf, np.inf, cfg.epochs_per_stage, True)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, candidates))
    return [run(tm) for tm in candidates]


def module_init_seed(base_seed, stage, slot):
    """Seed for a module freshly switched on at (stage, slot)."""
    return np.random.SeedSequence([int(base_seed), _SALT_MODULE, int(stage), int(slot)])
