"""Graph structure, state enumeration, and slot-level forward/backward."""

import math
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neam import brdf_core as bc
from neam import graph as gr
from neam.errors import DimensionMismatch
from neam.graph import EnhancedModel, EnhancementState, make_module, state_neighbors

from conftest import random_configs


class TestBuilders:
    def test_ggx_slot_budget(self):
        g = gr.build_ggx_graph()
        assert g.n_slots == 11
        terminals = [n for n in g.nodes if n.kind == gr.TERMINAL]
        operators = [n for n in g.nodes if n.kind != gr.TERMINAL]
        assert len(terminals) == 6
        assert len(operators) == 5
        assert sum(1 for n in operators if n.kind == gr.MUL) == 4
        assert sum(1 for n in operators if n.kind == gr.ADD) == 1

    def test_all_graphs_valid_dags(self):
        for name, build in gr.BUILDERS.items():
            g = build()
            g.validate()
            assert g.model_name == name

    def test_terminal_dims_and_signatures(self):
        g = gr.build_ggx_graph()
        dims = {n.term: n.out_dim for n in g.nodes if n.kind == gr.TERMINAL}
        assert dims == {
            "diffuse": 3, "specular_albedo": 3, "ndf": 1,
            "fresnel": 1, "shadowing": 1, "recip_norm": 1,
        }
        sigs = {n.term: n.input_signature for n in g.nodes if n.kind == gr.TERMINAL}
        assert sigs["diffuse"] == gr.SIG_PARAMS
        assert sigs["specular_albedo"] == gr.SIG_PARAMS
        for t in ("ndf", "fresnel", "shadowing", "recip_norm"):
            assert sigs[t] == gr.SIG_PARAMS_DIRS

    def test_module_input_widths(self):
        g = gr.build_ggx_graph()
        # direction-dependent terminal: 12 + 27 + 6
        assert gr.module_input_dim(g, 3, 27) == 45
        # parameter-only terminal: 12 + 27
        assert gr.module_input_dim(g, 0, 27) == 39
        # operators read their operands
        assert gr.module_input_dim(g, 6, 27) == 2
        assert gr.module_input_dim(g, 9, 27) == 4
        assert gr.module_input_dim(g, 10, 27) == 6

    def test_toy_graph(self):
        g = gr.build_toy_graph()
        assert g.n_slots == 3
        g.validate()


class TestEnhancementState:
    def test_round_trip_and_flip(self):
        s = EnhancementState.from_string("01011")
        assert s.to_string() == "01011"
        assert s.count_ones() == 3
        assert s.flipped(0).to_string() == "11011"
        assert s.flipped(0, 1).to_string() == "10011"

    def test_zeros_ones(self):
        assert EnhancementState.zeros(4).to_string() == "0000"
        assert EnhancementState.ones(4).count_ones() == 4


class TestStateNeighbors:
    def test_threshold_one_count(self):
        s = EnhancementState.zeros(11)
        out = state_neighbors(s, 1)
        assert len(out) == 12
        assert out[0] == s

    def test_threshold_two_count(self):
        out = state_neighbors(EnhancementState.zeros(11), 2)
        assert len(out) == 1 + 11 + 11 * 10 // 2 == 67

    def test_max_ones_zero(self):
        s = EnhancementState.zeros(11)
        assert state_neighbors(s, 2, max_ones=0) == [s]

    def test_fixed_bits_never_flip(self):
        s = EnhancementState.from_string("10000")
        out = state_neighbors(s, 1, fixed_bits={0: 1})
        assert all(c.bits[0] == 1 for c in out)
        assert len(out) == 5

    def test_deterministic_order(self):
        s = EnhancementState.zeros(4)
        out = state_neighbors(s, 2)
        strings = [c.to_string() for c in out]
        assert strings[:5] == ["0000", "1000", "0100", "0010", "0001"]
        assert strings[5] == "1100"

    @settings(max_examples=60, deadline=None)
    @given(
        n=st.integers(2, 6),
        threshold=st.integers(0, 3),
        bits=st.lists(st.integers(0, 1), min_size=6, max_size=6),
        max_ones=st.one_of(st.none(), st.integers(0, 6)),
    )
    def test_matches_brute_force(self, n, threshold, bits, max_ones):
        s = EnhancementState(tuple(bits[:n]))
        got = {c.bits for c in state_neighbors(s, threshold, max_ones=max_ones)}
        want = set()
        for cand in product((0, 1), repeat=n):
            dist = sum(a != b for a, b in zip(cand, s.bits))
            if dist > threshold:
                continue
            if cand != s.bits and max_ones is not None and sum(cand) > max_ones:
                continue
            want.add(cand)
        assert got == want

    def test_closed_form_count(self):
        for n in range(2, 7):
            for t in range(0, n + 1):
                got = len(state_neighbors(EnhancementState.zeros(n), t))
                assert got == sum(math.comb(n, k) for k in range(t + 1))


class TestForward:
    @pytest.mark.parametrize("name,eval_fn", [
        ("ggx", bc.eval_analytical_ggx),
        ("cooktorrance", bc.eval_analytical_cooktorrance),
        ("ward", bc.eval_analytical_ward),
    ])
    def test_all_zero_matches_closed_form(self, name, eval_fn, config_batch):
        P, wi, wo = config_batch
        model = gr.all_zero_model(gr.BUILDERS[name]())
        Z = np.full((P.shape[0], 27), 0.5)
        got, _ = gr.forward_batch(model, P, Z, wi, wo)
        want = eval_fn(P, wi, wo)
        rel = np.abs(got - want) / np.maximum(np.abs(want), 1e-300)
        assert np.max(rel) < 1e-12

    def test_repeat_calls_bit_identical(self, config_batch):
        P, wi, wo = config_batch
        g = gr.build_ggx_graph()
        st_ = EnhancementState.from_string("00110010010")
        mods = {i: make_module(g, i, 27, seed=50 + i) for i, b in enumerate(st_.bits) if b}
        model = EnhancedModel(g, st_, mods).validate()
        Z = np.full((P.shape[0], 27), 0.5)
        a, _ = gr.forward_batch(model, P, Z, wi, wo)
        b, _ = gr.forward_batch(model, P, Z, wi, wo)
        assert np.array_equal(a, b)

    def test_single_sample_wrapper(self):
        g = gr.build_ggx_graph()
        model = gr.all_zero_model(g)
        p = bc.default_params()
        n = np.array([0.0, 0.0, 1.0])
        out = gr.forward(model, p, np.full(27, 0.5), n, n)
        assert out.shape == (3,)
        assert np.allclose(out, bc.eval_analytical_ggx(p, n, n), rtol=1e-12)

    def test_wrong_z_width_rejected(self):
        model = gr.all_zero_model(gr.build_ggx_graph())
        with pytest.raises(DimensionMismatch):
            gr.forward(model, bc.default_params(), np.full(5, 0.5), [0, 0, 1], [0, 0, 1])

    def test_zero_weight_module_outputs_bias(self, config_batch):
        from neam.neural import zero_module, module_dims

        P, wi, wo = config_batch
        g = gr.build_ggx_graph()
        st_ = EnhancementState.from_string("00000100000")  # recip_norm slot
        dims = module_dims(gr.module_input_dim(g, 5, 27), 1)
        model = EnhancedModel(g, st_, {5: zero_module(dims)}).validate()
        Z = np.full((P.shape[0], 27), 0.5)
        got, _ = gr.forward_batch(model, P, Z, wi, wo)
        # slot 5 outputs exactly 0, killing the whole specular product
        want = bc.lambertian(P[:, 0:3])
        assert np.allclose(got, want, atol=1e-15)

    def test_fuzz_all_states_finite(self):
        P, wi, wo = random_configs(10_000, seed=77, max_n_theta=1.0, min_z=1e-3)
        g = gr.build_ggx_graph()
        Z = np.full((P.shape[0], 27), 0.5)
        rng = np.random.default_rng(5)
        states = [EnhancementState.zeros(11), EnhancementState.ones(11)] + [
            EnhancementState(tuple(rng.integers(0, 2, 11))) for _ in range(14)
        ]
        for k, st_ in enumerate(states):
            mods = {i: make_module(g, i, 27, seed=1000 + 13 * k + i) for i, b in enumerate(st_.bits) if b}
            model = EnhancedModel(g, st_, mods).validate()
            out, _ = gr.forward_batch(model, P, Z, wi, wo)
            assert np.isfinite(out).all(), f"state {st_.to_string()} produced non-finite output"


class TestBackward:
    def _grad_check(self, model, n=100, seed=99, h=1e-5, tol=1e-4):
        P, wi, wo = random_configs(n, seed=seed)
        Z = np.full((n, 27), 0.5)
        _, cache = gr.forward_batch(model, P, Z, wi, wo)
        grads = gr.backward_batch(model, cache, np.ones((n, 3)), want_dirs=True)
        worst = 0.0

        def fd(arr_plus, arr_minus):
            fp, _ = gr.forward_batch(model, *arr_plus)
            fm, _ = gr.forward_batch(model, *arr_minus)
            return (fp - fm).sum(axis=1) / (2 * h)

        for j in range(12):
            Pp, Pm = P.copy(), P.copy()
            Pp[:, j] += h
            Pm[:, j] -= h
            d = fd((Pp, Z, wi, wo), (Pm, Z, wi, wo))
            worst = max(worst, _rel_err(grads.d_analytical[:, j], d))
        for j in range(0, 27, 9):
            Zp, Zm = Z.copy(), Z.copy()
            Zp[:, j] += h
            Zm[:, j] -= h
            d = fd((P, Zp, wi, wo), (P, Zm, wi, wo))
            worst = max(worst, _rel_err(grads.d_neural[:, j], d))
        for j in range(3):
            Wp, Wm = wi.copy(), wi.copy()
            Wp[:, j] += h
            Wm[:, j] -= h
            d = fd((P, Z, Wp, wo), (P, Z, Wm, wo))
            worst = max(worst, _rel_err(grads.d_wi[:, j], d))
        assert worst < tol, f"worst relative gradient error {worst}"

    def test_all_zero_state(self):
        # exercises the hand-coded derivatives of every analytical term
        self._grad_check(gr.all_zero_model(gr.build_ggx_graph()))

    def test_cooktorrance_terms(self):
        self._grad_check(gr.all_zero_model(gr.build_cooktorrance_graph()))

    def test_ward_terms(self):
        self._grad_check(gr.all_zero_model(gr.build_ward_graph()))

    def test_mixed_state(self):
        g = gr.build_ggx_graph()
        st_ = EnhancementState.from_string("10010010001")
        mods = {i: make_module(g, i, 27, seed=60 + i) for i, b in enumerate(st_.bits) if b}
        self._grad_check(EnhancedModel(g, st_, mods).validate())

    def test_lambertian_path_gradient(self):
        # all-zero state: d out / d rho_d = grad_out / pi exactly
        model = gr.all_zero_model(gr.build_ggx_graph())
        p = bc.default_params()
        n = np.array([0.0, 0.0, 1.0])
        g = gr.backward(model, p, np.full(27, 0.5), n, n, np.array([1.0, 2.0, 3.0]))
        assert np.allclose(g.d_analytical[0:3], np.array([1.0, 2.0, 3.0]) / np.pi, rtol=1e-12)

    def test_zero_grad_out(self):
        g = gr.build_ggx_graph()
        st_ = EnhancementState.from_string("00010000000")
        mods = {3: make_module(g, 3, 27, seed=3)}
        model = EnhancedModel(g, st_, mods).validate()
        p = bc.default_params()
        n = np.array([0.0, 0.0, 1.0])
        res = gr.backward(model, p, np.full(27, 0.5), n, n, np.zeros(3))
        assert np.all(res.d_analytical == 0) and np.all(res.d_neural == 0)
        dw, db = res.d_weights[3]
        assert all(np.all(a == 0) for a in dw + db)


def _rel_err(got, want):
    mag = np.maximum(np.abs(got), np.abs(want))
    mask = mag > 1e-6
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(got - want)[mask] / mag[mask]))


class TestEnhancedModel:
    def test_validation_requires_matching_modules(self):
        g = gr.build_ggx_graph()
        st_ = EnhancementState.from_string("10000000000")
        with pytest.raises(AssertionError):
            EnhancedModel(g, st_, {}).validate()

    def test_parameter_accounting(self):
        g = gr.build_ggx_graph()
        model = gr.all_zero_model(g)
        assert model.n_material_params == 39
        assert gr.all_zero_model(g, p_neural=14).n_material_params == 26

    def test_published_final_state_weight_total(self):
        # fresnel, shadowing, recip_norm nodes plus the mul joining the
        # ndf*fresnel product with shadowing: 3*1825 + 1137 weights
        g = gr.build_ggx_graph()
        st_ = EnhancementState(tuple(1 if i in (3, 4, 5, 7) else 0 for i in range(11)))
        mods = {i: make_module(g, i, 27, seed=i) for i in (3, 4, 5, 7)}
        model = EnhancedModel(g, st_, mods).validate()
        assert model.total_module_weights() == 6612
        assert 6500 <= model.total_module_weights() <= 7500
