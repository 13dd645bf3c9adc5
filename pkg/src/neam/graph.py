"""Computational-graph form of the analytical models with per-slot neural
replacement.

A graph is a topologically ordered list of slots: semantic terminal nodes
(diffuse term, specular albedo, NDF, fresnel, shadowing, reciprocal
normalization) and binary arithmetic operators (add / mul with scalar-to-
RGB broadcast). An N-bit enhancement state picks, per slot, the analytical
realization (bit 0) or a small MLP (bit 1). Forward caches everything a
single fused backward pass needs; gradients of the analytical terminals
come from the tape in `autodiff`, operator and module gradients are routed
by hand at the slot level.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import autodiff as ad
from . import brdf_core as bc
from . import neural
from .errors import DimensionMismatch

TERMINAL = "terminal"
ADD = "add"
MUL = "mul"

SIG_PARAMS = "params"  # replacement MLP reads analytical + neural parameters
SIG_PARAMS_DIRS = "params_dirs"  # ... plus the direction pair
SIG_OPERANDS = "operands"  # operator replacement reads its two child outputs

DEFAULT_P_NEURAL = 27


@dataclass(frozen=True)
class NodeSpec:
    id: int
    kind: str
    term: str | None
    children: tuple
    out_dim: int
    input_signature: str


@dataclass(frozen=True)
class CompGraph:
    nodes: tuple
    model_name: str

    @property
    def n_slots(self):
        return len(self.nodes)

    @property
    def root_id(self):
        return self.nodes[-1].id

    def validate(self):
        referenced = set()
        for i, node in enumerate(self.nodes):
            assert node.id == i, "slot ids must equal list positions"
            for c in node.children:
                assert c < node.id, "children must precede parents (topological order)"
                referenced.add(c)
        roots = [n.id for n in self.nodes if n.id not in referenced]
        assert roots == [self.root_id], f"expected a single root, got {roots}"
        return self


def _terminal(i, term, out_dim, sig):
    return NodeSpec(i, TERMINAL, term, (), out_dim, sig)


def _operator(i, kind, a, b, nodes):
    out_dim = max(nodes[a].out_dim, nodes[b].out_dim)
    return NodeSpec(i, kind, None, (a, b), out_dim, SIG_OPERANDS)


def _microfacet_topology(model_name):
    # diffuse + specular_albedo * (ndf * fresnel * shadowing * recip_norm)
    nodes = []
    nodes.append(_terminal(0, "diffuse", 3, SIG_PARAMS))
    nodes.append(_terminal(1, "specular_albedo", 3, SIG_PARAMS))
    nodes.append(_terminal(2, "ndf", 1, SIG_PARAMS_DIRS))
    nodes.append(_terminal(3, "fresnel", 1, SIG_PARAMS_DIRS))
    nodes.append(_terminal(4, "shadowing", 1, SIG_PARAMS_DIRS))
    nodes.append(_terminal(5, "recip_norm", 1, SIG_PARAMS_DIRS))
    nodes.append(_operator(6, MUL, 2, 3, nodes))  # ndf * fresnel
    nodes.append(_operator(7, MUL, 6, 4, nodes))  # ... * shadowing
    nodes.append(_operator(8, MUL, 7, 5, nodes))  # ... * recip_norm
    nodes.append(_operator(9, MUL, 1, 8, nodes))  # specular_albedo * lobe
    nodes.append(_operator(10, ADD, 0, 9, nodes))
    return CompGraph(tuple(nodes), model_name).validate()


def build_ggx_graph():
    """11-slot graph of the anisotropic GGX microfacet model."""
    return _microfacet_topology("ggx")


def build_cooktorrance_graph():
    """Same topology with Beckmann NDF, V-cavity shadowing, Schlick fresnel."""
    return _microfacet_topology("cooktorrance")


def build_ward_graph():
    """Anisotropic Ward model on the shared topology.

    The closed form has no fresnel or shadowing factor, so those two slots
    evaluate to constant 1 analytically; they stay available as replacement
    sites. The all-zero state reproduces the Ward formula exactly.
    """
    return _microfacet_topology("ward")


def build_toy_graph():
    """3-slot test graph: diffuse * ndf (direction-dependent, cheap to enumerate)."""
    nodes = [
        _terminal(0, "diffuse", 3, SIG_PARAMS),
        _terminal(1, "ndf", 1, SIG_PARAMS_DIRS),
    ]
    nodes.append(_operator(2, MUL, 0, 1, nodes))
    return CompGraph(tuple(nodes), "toy3").validate()


BUILDERS = {
    "ggx": build_ggx_graph,
    "cooktorrance": build_cooktorrance_graph,
    "ward": build_ward_graph,
    "toy3": build_toy_graph,
}


# ---------------------------------------------------------------------------
# Enhancement states.

@dataclass(frozen=True)
class EnhancementState:
    bits: tuple

    @classmethod
    def zeros(cls, n):
        return cls((0,) * n)

    @classmethod
    def ones(cls, n):
        return cls((1,) * n)

    @classmethod
    def from_string(cls, s):
        return cls(tuple(int(c) for c in s))

    def to_string(self):
        return "".join(str(b) for b in self.bits)

    def flipped(self, *slots):
        bits = list(self.bits)
        for s in slots:
            bits[s] ^= 1
        return EnhancementState(tuple(bits))

    def count_ones(self):
        return sum(self.bits)

    def __len__(self):
        return len(self.bits)


def state_neighbors(state: EnhancementState, threshold, fixed_bits=None, max_ones=None):
    """All states within Hamming distance <= threshold of `state`.

    Respects fixed bits (never flipped) and an optional cap on the number
    of active modules. The input state itself is always first; the rest
    follow in order of (flip count, flipped slot indices).
    """
    fixed_bits = fixed_bits or {}
    free = [i for i in range(len(state)) if i not in fixed_bits]
    out = [state]
    for k in range(1, threshold + 1):
        for combo in combinations(free, k):
            cand = state.flipped(*combo)
            if max_ones is not None and cand.count_ones() > max_ones:
                continue
            out.append(cand)
    return out


# ---------------------------------------------------------------------------
# Enhanced model: graph + state + per-slot modules.

@dataclass
class EnhancedModel:
    graph: CompGraph
    state: EnhancementState
    modules: dict = field(default_factory=dict)
    p_neural: int = DEFAULT_P_NEURAL

    def validate(self):
        active = {i for i, b in enumerate(self.state.bits) if b == 1}
        assert set(self.modules) == active, "modules must exist exactly for bits set to 1"
        for slot, m in self.modules.items():
            node = self.graph.nodes[slot]
            want_in = module_input_dim(self.graph, slot, self.p_neural)
            assert m.d_in == want_in and m.d_out == node.out_dim
        return self

    @property
    def n_material_params(self):
        return bc.N_ANALYTICAL + self.p_neural

    def total_module_weights(self):
        return sum(m.n_weights() for m in self.modules.values())

    def copy(self):
        return EnhancedModel(
            self.graph,
            self.state,
            {s: m.copy() for s, m in self.modules.items()},
            self.p_neural,
        )


def module_input_dim(graph: CompGraph, slot, p_neural):
    node = graph.nodes[slot]
    if node.input_signature == SIG_PARAMS:
        return bc.N_ANALYTICAL + p_neural
    if node.input_signature == SIG_PARAMS_DIRS:
        return bc.N_ANALYTICAL + p_neural + 6
    return sum(graph.nodes[c].out_dim for c in node.children)


def make_module(graph: CompGraph, slot, p_neural, seed, hidden=neural.DEFAULT_HIDDEN):
    dims = neural.module_dims(module_input_dim(graph, slot, p_neural), graph.nodes[slot].out_dim, hidden)
    return neural.init_xavier(dims, seed)


def all_zero_model(graph: CompGraph, p_neural=DEFAULT_P_NEURAL):
    return EnhancedModel(graph, EnhancementState.zeros(graph.n_slots), {}, p_neural)


# ---------------------------------------------------------------------------
# Analytical terminal realizations on the autodiff tape.

class _TermContext:
    """Shared tape subexpressions (frame, half vector, cosines) per batch."""

    def __init__(self, P, wi, wo):
        self.P = P
        self.p = [ad.leaf(P[:, i : i + 1]) for i in range(bc.N_ANALYTICAL)]
        self.wi = ad.leaf(wi)
        self.wo = ad.leaf(wo)
        self.batch = P.shape[0]
        self._cache = {}

    def _memo(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def frame(self):
        def build():
            st, ct = ad.sin(self.p[9]), ad.cos(self.p[9])
            n = ad.concat(st * ad.cos(self.p[10]), st * ad.sin(self.p[10]), ct)
            x = np.zeros((self.batch, 3))
            x[:, 0] = 1.0
            w = x - ad.component(n, 0) * n
            t0 = ad.normalize(w)
            t = t0 * ad.cos(self.p[11]) + ad.cross(n, t0) * ad.sin(self.p[11])
            return n, t, ad.cross(n, t)

        return self._memo("frame", build)

    def half(self):
        return self._memo("half", lambda: ad.normalize(self.wi + self.wo))

    def local(self, v_key):
        def build():
            n, t, b = self.frame()
            v = {"h": self.half, "wi": lambda: self.wi, "wo": lambda: self.wo}[v_key]()
            return ad.dot(v, t), ad.dot(v, b), ad.dot(v, n)

        return self._memo(("local", v_key), build)

    def cos_n(self, v_key):
        def build():
            n, _, _ = self.frame()
            return ad.dot(n, self.wi if v_key == "wi" else self.wo)

        return self._memo(("cos", v_key), build)

    def dot_h(self, v_key):
        def build():
            v = self.wi if v_key == "wi" else self.wo
            return ad.dot(v, self.half())

        return self._memo(("dot_h", v_key), build)


def _rgb_triple(ctx, base):
    return ad.concat(ctx.p[base], ctx.p[base + 1], ctx.p[base + 2])


def _term_diffuse(ctx):
    return _rgb_triple(ctx, 0) * (1.0 / np.pi)


def _term_specular_albedo(ctx):
    return _rgb_triple(ctx, 3)


def _term_ndf_ggx(ctx):
    hx, hy, hz = ctx.local("h")
    ax, ay = ctx.p[6], ctx.p[7]
    q = ad.clamp_min(ad.square(hx / ax) + ad.square(hy / ay) + ad.square(hz), 1e-16)
    d = 1.0 / (np.pi * ax * ay * q * q)
    return ad.where(hz.data > 0, d, 0.0)


def _term_ndf_beckmann(ctx):
    hx, hy, hz = ctx.local("h")
    ax, ay = ctx.p[6], ctx.p[7]
    hz2 = ad.clamp_min(ad.square(hz), 1e-16)
    e = ad.exp(-((ad.square(hx / ax) + ad.square(hy / ay)) / hz2))
    return ad.where(hz.data > 0, e / (np.pi * ax * ay * hz2 * hz2), 0.0)


def _term_ndf_ward(ctx):
    hx, hy, hz = ctx.local("h")
    ax, ay = ctx.p[6], ctx.p[7]
    hz2 = ad.clamp_min(ad.square(hz), 1e-16)
    e = ad.exp(-((ad.square(hx / ax) + ad.square(hy / ay)) / hz2))
    return ad.where(hz.data > 0, e / (np.pi * ax * ay), 0.0)


def _term_fresnel_schlick(ctx):
    c = ad.clamp(ctx.dot_h("wi"), 0.0, 1.0)
    return ctx.p[8] + (1.0 - ctx.p[8]) * ad.powi(1.0 - c, 5)


def _g1_smith(ctx, v_key):
    vx, vy, vz = ctx.local(v_key)
    s = ad.square(ctx.p[6] * vx) + ad.square(ctx.p[7] * vy)
    denom = ad.clamp_min(vz + ad.sqrt(ad.square(vz) + s), 1e-12)
    return ad.where(vz.data > 0, 2.0 * vz / denom, 0.0)


def _term_shadowing_smith(ctx):
    return _g1_smith(ctx, "wi") * _g1_smith(ctx, "wo")


def _term_shadowing_vcavity(ctx):
    _, _, hz = ctx.local("h")
    voh = ad.clamp_min(ctx.dot_h("wo"), bc.COS_EPS)
    t1 = 2.0 * hz * ctx.cos_n("wo") / voh
    t2 = 2.0 * hz * ctx.cos_n("wi") / voh
    return ad.clamp_min(ad.minimum(1.0, ad.minimum(t1, t2)), 0.0)


def _term_one(ctx):
    return ad.Var(np.ones((ctx.batch, 1)))


def _term_recip_norm(ctx):
    ci = ad.clamp_min(ctx.cos_n("wi"), bc.COS_EPS)
    co = ad.clamp_min(ctx.cos_n("wo"), bc.COS_EPS)
    return 0.25 / (ci * co)


def _term_recip_norm_sqrt(ctx):
    ci = ad.clamp_min(ctx.cos_n("wi"), bc.COS_EPS)
    co = ad.clamp_min(ctx.cos_n("wo"), bc.COS_EPS)
    return 0.25 / ad.sqrt(ci * co)


TERM_FUNCS = {
    "ggx": {
        "diffuse": _term_diffuse,
        "specular_albedo": _term_specular_albedo,
        "ndf": _term_ndf_ggx,
        "fresnel": _term_fresnel_schlick,
        "shadowing": _term_shadowing_smith,
        "recip_norm": _term_recip_norm,
    },
    "cooktorrance": {
        "diffuse": _term_diffuse,
        "specular_albedo": _term_specular_albedo,
        "ndf": _term_ndf_beckmann,
        "fresnel": _term_fresnel_schlick,
        "shadowing": _term_shadowing_vcavity,
        "recip_norm": _term_recip_norm,
    },
    "ward": {
        "diffuse": _term_diffuse,
        "specular_albedo": _term_specular_albedo,
        "ndf": _term_ndf_ward,
        "fresnel": _term_one,
        "shadowing": _term_one,
        "recip_norm": _term_recip_norm_sqrt,
    },
    "toy3": {
        "diffuse": _term_diffuse,
        "ndf": _term_ndf_ggx,
    },
}


# ---------------------------------------------------------------------------
# Fused forward / backward.

@dataclass
class Gradients:
    d_analytical: np.ndarray  # [B, 12], w.r.t. decoded parameters
    d_neural: np.ndarray  # [B, p_neural]
    d_weights: dict  # slot -> (d_weights_list, d_biases_list), batch-summed
    d_wi: np.ndarray = None
    d_wo: np.ndarray = None


class _ForwardCache:
    __slots__ = ("ctx", "slot_out", "slot_var", "module_acts", "model", "params_dirs", "params_only")

    def __init__(self, ctx, model):
        self.ctx = ctx
        self.model = model
        self.slot_out = {}
        self.slot_var = {}
        self.module_acts = {}
        self.params_only = None
        self.params_dirs = None


def _module_input(cache: _ForwardCache, node: NodeSpec, Z):
    ctx = cache.ctx
    if node.input_signature == SIG_PARAMS:
        if cache.params_only is None:
            cache.params_only = np.concatenate([ctx.P, Z], axis=1)
        return cache.params_only
    if node.input_signature == SIG_PARAMS_DIRS:
        if cache.params_dirs is None:
            cache.params_dirs = np.concatenate([ctx.P, Z, ctx.wi.data, ctx.wo.data], axis=1)
        return cache.params_dirs
    return np.concatenate([cache.slot_out[c] for c in node.children], axis=1)


def forward_batch(model: EnhancedModel, P, Z, wi, wo):
    """Evaluate every slot per the state; returns (rgb [B, 3], cache).

    P is the decoded [B, 12] parameter array, Z the [B, p_neural] latent
    block, wi / wo unit direction arrays [B, 3].
    """
    P = np.ascontiguousarray(P, dtype=np.float64)
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != model.p_neural:
        raise DimensionMismatch(f"neural parameter block must be [B, {model.p_neural}]")
    ctx = _TermContext(P, np.asarray(wi, dtype=np.float64), np.asarray(wo, dtype=np.float64))
    cache = _ForwardCache(ctx, model)
    terms = TERM_FUNCS[model.graph.model_name]
    for node in model.graph.nodes:
        if model.state.bits[node.id] == 1:
            x = _module_input(cache, node, Z)
            y, acts = neural.mlp_forward_cached(model.modules[node.id], x)
            cache.module_acts[node.id] = acts
            cache.slot_out[node.id] = y
        elif node.kind == TERMINAL:
            var = terms[node.term](ctx)
            cache.slot_var[node.id] = var
            cache.slot_out[node.id] = var.data
        else:
            a = cache.slot_out[node.children[0]]
            b = cache.slot_out[node.children[1]]
            cache.slot_out[node.id] = a + b if node.kind == ADD else a * b
    return cache.slot_out[model.graph.root_id], cache


def _shrink(g, dim):
    return g.sum(axis=1, keepdims=True) if (dim == 1 and g.shape[1] != 1) else g


def backward_batch(model: EnhancedModel, cache: _ForwardCache, grad_out, want_dirs=False):
    """Reverse pass over the slots of a cached forward evaluation."""
    graph, ctx = model.graph, cache.ctx
    B = ctx.batch
    root_dim = graph.nodes[graph.root_id].out_dim
    grad_out = np.broadcast_to(np.asarray(grad_out, dtype=np.float64), (B, root_dim))
    slot_grad = {graph.root_id: grad_out}
    d_analytical = np.zeros((B, bc.N_ANALYTICAL))
    d_neural = np.zeros((B, model.p_neural))
    d_wi = np.zeros((B, 3))
    d_wo = np.zeros((B, 3))
    d_weights = {}
    term_seeds = []
    for node in reversed(graph.nodes):
        g = slot_grad.pop(node.id, None)
        if g is None:
            continue
        if model.state.bits[node.id] == 1:
            m = model.modules[node.id]
            dw, db, dx = neural.mlp_backward(m, cache.module_acts[node.id], g)
            d_weights[node.id] = (dw, db)
            if node.input_signature == SIG_OPERANDS:
                off = 0
                for c in node.children:
                    d = graph.nodes[c].out_dim
                    _accum(slot_grad, c, dx[:, off : off + d])
                    off += d
            else:
                d_analytical += dx[:, : bc.N_ANALYTICAL]
                d_neural += dx[:, bc.N_ANALYTICAL : bc.N_ANALYTICAL + model.p_neural]
                if node.input_signature == SIG_PARAMS_DIRS:
                    d_wi += dx[:, -6:-3]
                    d_wo += dx[:, -3:]
        elif node.kind == TERMINAL:
            term_seeds.append((cache.slot_var[node.id], g))
        else:
            c1, c2 = node.children
            a, b = cache.slot_out[c1], cache.slot_out[c2]
            if node.kind == ADD:
                _accum(slot_grad, c1, _shrink(g, a.shape[1]))
                _accum(slot_grad, c2, _shrink(g, b.shape[1]))
            else:
                _accum(slot_grad, c1, _shrink(g * b, a.shape[1]))
                _accum(slot_grad, c2, _shrink(g * a, b.shape[1]))
    if term_seeds:
        ad.backward(term_seeds)
        for i, p_var in enumerate(ctx.p):
            if p_var.grad is not None:
                d_analytical[:, i : i + 1] += p_var.grad
        if ctx.wi.grad is not None:
            d_wi += ctx.wi.grad
        if ctx.wo.grad is not None:
            d_wo += ctx.wo.grad
    if not want_dirs:
        d_wi = d_wo = None
    return Gradients(d_analytical, d_neural, d_weights, d_wi, d_wo)


def _accum(table, key, g):
    if key in table:
        table[key] = table[key] + g
    else:
        table[key] = g


def forward(model: EnhancedModel, a, z, wi, wo):
    """Single-sample evaluation; `a` is an AnalyticalParams or a 12-vector."""
    P = a.to_vector() if isinstance(a, bc.AnalyticalParams) else np.asarray(a)
    rgb, _ = forward_batch(
        model, P[None, :], np.asarray(z)[None, :], np.asarray(wi)[None, :], np.asarray(wo)[None, :]
    )
    return rgb[0]


def backward(model: EnhancedModel, a, z, wi, wo, grad_out, want_dirs=False):
    """Single-sample fused forward+backward; returns squeezed Gradients."""
    P = a.to_vector() if isinstance(a, bc.AnalyticalParams) else np.asarray(a)
    _, cache = forward_batch(
        model, P[None, :], np.asarray(z)[None, :], np.asarray(wi)[None, :], np.asarray(wo)[None, :]
    )
    g = backward_batch(model, cache, np.asarray(grad_out)[None, :], want_dirs=want_dirs)
    return Gradients(
        g.d_analytical[0],
        g.d_neural[0],
        g.d_weights,
        None if g.d_wi is None else g.d_wi[0],
        None if g.d_wo is None else g.d_wo[0],
    )
