"""Loss metric, optimizer recurrence, and the joint training loop."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neam import brdf_core as bc
from neam import data_io
from neam import graph as gr
from neam import optimize as opt
from neam.errors import NonFinite
from neam.graph import EnhancedModel, EnhancementState, make_module


class TestLoss:
    def test_zero_when_equal(self):
        pred = np.array([[0.2, 0.4, 0.8]])
        assert opt.loss_log_l1(pred, pred, np.array([0.7])) == 0.0

    def test_hand_value(self):
        # |log(1+1) - log(1+0)| per channel = log 2
        truth = np.ones((1, 3))
        pred = np.zeros((1, 3))
        got = opt.loss_log_l1(pred, truth, np.array([1.0]))
        assert got == pytest.approx(3 * np.log(2.0), rel=1e-12)

    def test_cosine_zero_annihilates(self):
        truth = np.array([[5.0, 1.0, 0.1]])
        pred = np.array([[0.0, 9.0, 3.0]])
        assert opt.loss_log_l1(pred, truth, np.array([0.0])) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(
        a=st.lists(st.floats(0, 50), min_size=3, max_size=3),
        b=st.lists(st.floats(0, 50), min_size=3, max_size=3),
        c=st.lists(st.floats(0, 50), min_size=3, max_size=3),
        cos_i=st.floats(0.01, 1.0),
    )
    def test_metric_properties(self, a, b, c, cos_i):
        a, b, c = (np.array([v]) for v in (a, b, c))
        cos = np.array([cos_i])
        ab = opt.loss_log_l1(a, b, cos)
        ba = opt.loss_log_l1(b, a, cos)
        assert ab == pytest.approx(ba, rel=1e-12, abs=1e-12)  # symmetry
        ac = opt.loss_log_l1(a, c, cos)
        cb = opt.loss_log_l1(c, b, cos)
        assert ab <= ac + cb + 1e-9  # triangle inequality

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(0)
        pred = rng.uniform(0, 2, (32, 3))
        truth = rng.uniform(0, 2, (32, 3))
        cos = rng.uniform(0.05, 1, 32)
        _, dpred = opt.loss_log_l1_grad(pred, truth, cos)
        h = 1e-7
        for j in range(3):
            up, dn = pred.copy(), pred.copy()
            up[:, j] += h
            dn[:, j] -= h
            fd = (opt.loss_log_l1(up, truth, cos) - opt.loss_log_l1(dn, truth, cos)) / (2 * h)
            assert np.allclose(dpred[:, j], fd, rtol=1e-5, atol=1e-7)


class TestRmsProp:
    def test_single_step_closed_form(self):
        o = opt.RmsProp()
        theta = [np.array([1.0])]
        o.step(theta, [np.array([1.0])])
        # v = 0.1, delta = -1e-3 / (sqrt(0.1) + 1e-8)
        assert o.v[0][0] == pytest.approx(0.1, rel=1e-12)
        assert theta[0][0] == pytest.approx(1.0 - 1e-3 / (np.sqrt(0.1) + 1e-8), rel=1e-12)
        assert theta[0][0] == pytest.approx(1.0 - 3.1623e-3, abs=1e-6)

    def test_zero_gradient_decays_v(self):
        o = opt.RmsProp()
        theta = [np.array([2.0])]
        o.step(theta, [np.array([1.0])])
        before = theta[0].copy()
        o.step(theta, [np.array([0.0])])
        assert theta[0][0] == before[0]
        assert o.v[0][0] == pytest.approx(0.09, rel=1e-12)

    def test_two_step_hand_iteration(self):
        o = opt.RmsProp()
        theta = [np.array([0.0])]
        o.step(theta, [np.array([1.0])])
        o.step(theta, [np.array([1.0])])
        # v1 = 0.1, v2 = 0.19
        d1 = 1e-3 / (np.sqrt(0.1) + 1e-8)
        d2 = 1e-3 / (np.sqrt(0.19) + 1e-8)
        assert theta[0][0] == pytest.approx(-(d1 + d2), rel=1e-12)

    def test_rmsprop_step_wrapper(self):
        state = opt.RmsProp()
        params = opt.rmsprop_step(state, [np.zeros(3)], [np.ones(3)])
        assert np.allclose(params[0], -1e-3 / (np.sqrt(0.1) + 1e-8))


class TestInitTables:
    def test_default_latent_at_half(self):
        a, z = opt.init_material_params(5)
        assert z.shape == (5, 27)
        assert np.all(z == 0.5)
        decoded = bc.decode_params(a)
        assert np.allclose(decoded[0], bc.default_params().to_vector(), atol=1e-9)

    @pytest.mark.parametrize("p_neural", [14, 27, 40])
    def test_other_latent_widths(self, p_neural):
        _, z = opt.init_material_params(3, p_neural=p_neural)
        assert z.shape == (3, p_neural)

    def test_deterministic(self):
        a1, z1 = opt.init_material_params(4, seed=7)
        a2, z2 = opt.init_material_params(4, seed=7)
        assert np.array_equal(a1, a2) and np.array_equal(z1, z2)


def _tiny_data(n_mat=2, n=600, seed=0, sigma=0.0):
    params = data_io.random_material_params(n_mat, seed=seed)
    return data_io.gen_synthetic_ggx(params, n, noise_sigma=sigma, seed=seed)


class TestPackSplit:
    def test_val_fraction(self):
        tr, va = opt.pack_samplesets(_tiny_data(n=1000), val_fraction=0.1, seed=1)
        assert va.n_samples == 200 and tr.n_samples == 1800
        assert tr.n_materials == 2
        assert np.all(tr.cos_i >= 0)

    def test_split_deterministic_and_disjoint(self):
        data = _tiny_data(n=500)
        tr1, va1 = opt.pack_samplesets(data, 0.2, seed=5)
        tr2, va2 = opt.pack_samplesets(data, 0.2, seed=5)
        assert np.array_equal(tr1.wi, tr2.wi) and np.array_equal(va1.wi, va2.wi)
        seen = {tuple(r) for r in np.round(tr1.wi, 12)}
        overlap = sum(tuple(r) in seen for r in np.round(va1.wi, 12))
        assert overlap == 0


class TestTraining:
    def test_loss_decreases_on_self_data(self):
        tr, va = opt.pack_samplesets(_tiny_data(), val_fraction=0.1, seed=2)
        tm = opt.TrainableModel.fresh(gr.all_zero_model(gr.build_ggx_graph()), 2)
        cfg = opt.TrainConfig(batch_size=256, seed=0)
        first = opt.evaluate_loss(tm, tr)
        losses = [first]
        for _ in range(10):
            opt.train_model(tm, tr, va, 1, cfg)
            losses.append(opt.evaluate_loss(tm, tr))
        assert losses[-1] < losses[0], f"no descent: {losses[0]} -> {losses[-1]}"

    def test_zero_lr_keeps_parameters(self):
        tr, va = opt.pack_samplesets(_tiny_data(), val_fraction=0.1, seed=2)
        tm = opt.TrainableModel.fresh(gr.all_zero_model(gr.build_ggx_graph()), 2)
        before = tm.snapshot()
        cfg = opt.TrainConfig(batch_size=256, seed=0, lr=0.0)
        r1 = opt.train_model(tm, tr, va, 3, cfg)
        for a, b in zip(before, tm.param_arrays()):
            assert np.array_equal(a, b)
        r2 = opt.train_model(tm, tr, va, 3, cfg)
        assert r1.train_loss == r2.train_loss

    def test_seeded_runs_bit_identical(self):
        data = _tiny_data()
        cfg = opt.TrainConfig(batch_size=128, seed=9)
        outs = []
        for _ in range(2):
            tr, va = opt.pack_samplesets(data, 0.1, seed=9)
            g = gr.build_ggx_graph()
            st_ = EnhancementState.from_string("00010000000")
            mods = {3: make_module(g, 3, 27, opt.module_init_seed(9, 1, 3))}
            tm = opt.TrainableModel.fresh(EnhancedModel(g, st_, mods), 2)
            res = opt.train_model(tm, tr, va, 3, cfg)
            outs.append((res.val_loss, tm.snapshot()))
        assert outs[0][0] == outs[1][0]
        for a, b in zip(outs[0][1], outs[1][1]):
            assert np.array_equal(a, b)

    def test_candidate_order_independence(self):
        data = _tiny_data()
        tr, va = opt.pack_samplesets(data, 0.1, seed=4)
        g = gr.build_ggx_graph()
        cfg = opt.TrainConfig(batch_size=256, seed=4, epochs_per_stage=2)

        def build(states):
            out = []
            for s in states:
                mods = {i: make_module(g, i, 27, opt.module_init_seed(4, 1, i))
                        for i, b in enumerate(s.bits) if b}
                out.append(opt.TrainableModel.fresh(EnhancedModel(g, s, mods), 2))
            return out

        states = [EnhancementState.zeros(11), EnhancementState.from_string("00100000000"),
                  EnhancementState.from_string("00000100000")]
        res_fwd = opt.train_jointly(build(states), tr, va, cfg)
        res_rev = opt.train_jointly(build(states[::-1]), tr, va, cfg)
        fwd = [r.val_loss for r in res_fwd]
        rev = [r.val_loss for r in res_rev]
        assert fwd == rev[::-1]

    def test_log_line_format(self):
        tr, va = opt.pack_samplesets(_tiny_data(), 0.1, seed=2)
        tm = opt.TrainableModel.fresh(gr.all_zero_model(gr.build_ggx_graph()), 2)
        lines = []
        cfg = opt.TrainConfig(batch_size=512, seed=0)
        opt.train_model(tm, tr, va, 2, cfg, log_fn=lines.append, label="00000000000")
        assert len(lines) == 2
        epoch, state_bits, train_loss, val_loss = lines[0].split(",")
        assert epoch == "0" and state_bits == "00000000000"
        float(train_loss), float(val_loss)

    def test_divergence_reports_inf(self):
        tr, va = opt.pack_samplesets(_tiny_data(), 0.1, seed=2)
        g = gr.build_ggx_graph()
        st_ = EnhancementState.from_string("00010000000")
        mods = {3: make_module(g, 3, 27, seed=1)}
        mods[3].weights[0][0, 0] = np.nan  # poisoned candidate
        bad = opt.TrainableModel.fresh(EnhancedModel(g, st_, mods), 2)
        good = opt.TrainableModel.fresh(gr.all_zero_model(g), 2)
        cfg = opt.TrainConfig(batch_size=256, seed=0, epochs_per_stage=1)
        res = opt.train_jointly([bad, good], tr, va, cfg)
        assert res[0].diverged and res[0].val_loss == np.inf
        assert not res[1].diverged and np.isfinite(res[1].val_loss)

    def test_train_model_raises_nonfinite(self):
        tr, va = opt.pack_samplesets(_tiny_data(), 0.1, seed=2)
        g = gr.build_ggx_graph()
        st_ = EnhancementState.from_string("00010000000")
        mods = {3: make_module(g, 3, 27, seed=1)}
        mods[3].weights[0][0, 0] = np.nan
        tm = opt.TrainableModel.fresh(EnhancedModel(g, st_, mods), 2)
        with pytest.raises(NonFinite):
            opt.train_model(tm, tr, va, 1, opt.TrainConfig(batch_size=256, seed=0))

    def test_threaded_matches_serial(self):
        data = _tiny_data()
        tr, va = opt.pack_samplesets(data, 0.1, seed=4)
        g = gr.build_ggx_graph()
        cfg = opt.TrainConfig(batch_size=512, seed=4, epochs_per_stage=2)

        def build():
            s = EnhancementState.from_string("00100000000")
            return [
                opt.TrainableModel.fresh(gr.all_zero_model(g), 2),
                opt.TrainableModel.fresh(
                    EnhancedModel(g, s, {2: make_module(g, 2, 27, opt.module_init_seed(4, 1, 2))}), 2
                ),
            ]

        serial = [r.val_loss for r in opt.train_jointly(build(), tr, va, cfg, threads=1)]
        threaded = [r.val_loss for r in opt.train_jointly(build(), tr, va, cfg, threads=2)]
        assert serial == threaded
