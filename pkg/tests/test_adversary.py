import numpy as np
import pytest

import recourselab as rl
from recourselab.adversary import (
    AdversarialArtifact, HessianConditionError, Phase1Config, Phase2Config,
    counterfactual_term_grad, implicit_jacobian, load_artifact, phase1_fit, phase2_fit,
    save_artifact,
)
from recourselab.explainers import CfObjective, Initializer, SearchBudget


@pytest.fixture(scope="module")
def tiny_ds():
    return rl.make_synthetic(30, seed=201)


@pytest.fixture(scope="module")
def tiny_net(tiny_ds):
    return rl.train_baseline(tiny_ds, steps=12, seed=1, hidden=(3,)).model


@pytest.fixture(scope="module")
def tiny_search(tiny_ds, tiny_net):
    budget = SearchBudget(steps=2500, lr=0.002)
    negs = sorted((i for i in tiny_ds.test_idx
                   if tiny_net.forward(tiny_ds.features[i]) <= 0.5),
                  key=lambda i: -tiny_net.forward(tiny_ds.features[i]))
    x = tiny_ds.features[negs[0]]
    res = rl.find_counterfactual(tiny_net, x, CfObjective("wachter"), tiny_ds,
                                 budget=budget)
    assert res.found
    return x, res, budget


class TestImplicitJacobian:
    def test_zero_validity_weight_gives_zero_jacobian(self, tiny_ds, tiny_net):
        # pure-distance objective: no parameter dependence anywhere
        x = tiny_ds.features[0]
        x_cf = x + np.array([0.4, -0.3])
        obj = CfObjective("sparse-wachter", lam=0.0)
        est = implicit_jacobian(tiny_net, x, obj, x_cf, tiny_ds, lam=0.0)
        assert np.all(est.matrix == 0.0)

    def test_deterministic_for_identical_models(self, tiny_ds, tiny_net, tiny_search):
        x, res, _ = tiny_search
        obj = CfObjective("wachter")
        a = implicit_jacobian(tiny_net, x, obj, res.x_cf, tiny_ds, lam=res.final_lam)
        b = implicit_jacobian(tiny_net.clone(), x, obj, res.x_cf, tiny_ds,
                              lam=res.final_lam)
        assert a.matrix.tobytes() == b.matrix.tobytes()

    def test_shape_and_finite(self, tiny_ds, tiny_net, tiny_search):
        x, res, _ = tiny_search
        est = implicit_jacobian(tiny_net, x, CfObjective("wachter"), res.x_cf,
                                tiny_ds, lam=res.final_lam)
        assert est.matrix.shape == (tiny_ds.d, tiny_net.param_count)
        assert np.isfinite(est.matrix).all()
        assert est.mode == "full-inverse"

    def test_pinned_coordinates_zero_rows(self, tiny_ds, tiny_net, tiny_search):
        x, res, _ = tiny_search
        est = implicit_jacobian(tiny_net, x, CfObjective("wachter"), res.x_cf,
                                tiny_ds, lam=res.final_lam)
        pinned = np.abs(res.x_cf - x) <= 1e-6
        if pinned.any():
            assert np.all(est.matrix[pinned] == 0.0)

    def test_diagonal_mode(self, tiny_ds, tiny_net, tiny_search):
        x, res, _ = tiny_search
        est = implicit_jacobian(tiny_net, x, CfObjective("wachter"), res.x_cf,
                                tiny_ds, lam=res.final_lam,
                                mode="diagonal-approximation")
        assert est.mode == "diagonal-approximation"
        assert np.isfinite(est.matrix).all()

    def test_masked_rows_zero(self, tiny_ds, tiny_net, tiny_search):
        x, res, _ = tiny_search
        obj = CfObjective("wachter", feature_mask=(True, False))
        est = implicit_jacobian(tiny_net, x, obj, res.x_cf, tiny_ds, lam=res.final_lam)
        assert np.all(est.matrix[1] == 0.0)

    def test_singular_hessian_refused(self, tiny_ds, tiny_net):
        # a pure-distance wachter objective away from every kink has an
        # exactly zero candidate Hessian
        x = tiny_ds.features[0]
        x_cf = x + np.array([0.7, -0.6])
        obj = CfObjective("wachter", lam=0.0)
        with pytest.raises(HessianConditionError):
            implicit_jacobian(tiny_net, x, obj, x_cf, tiny_ds, lam=0.0,
                              mode="full-inverse")

    def test_stationarity_flag(self, tiny_ds, tiny_net):
        x = tiny_ds.features[0]
        x_cf = x + np.array([0.5, -0.4])  # arbitrary, not converged
        est = implicit_jacobian(tiny_net, x, CfObjective("sparse-wachter"), x_cf,
                                tiny_ds, lam=4.0)
        assert est.approximate
        assert est.stationarity_inf_norm > 1e-2


class TestCounterfactualTermGrad:
    def test_zero_validity_weight_zero_grad(self, tiny_ds, tiny_net):
        obj = CfObjective("sparse-wachter", lam=0.0)
        out = counterfactual_term_grad(tiny_net, tiny_ds.features[0], None, obj, tiny_ds,
                                       budget=SearchBudget(steps=50))
        assert np.all(out.grad == 0.0)

    def test_shape_and_finite(self, tiny_ds, tiny_net, tiny_search):
        x, _, budget = tiny_search
        out = counterfactual_term_grad(tiny_net, x, None, CfObjective("wachter"),
                                       tiny_ds, budget=budget)
        assert out.grad.shape == (tiny_net.param_count,)
        assert np.isfinite(out.grad).all()
        assert out.found

    def test_already_valid_query_zero_grad(self, tiny_ds, tiny_net):
        pos = [i for i in tiny_ds.test_idx
               if tiny_net.forward(tiny_ds.features[i]) > 0.5]
        out = counterfactual_term_grad(tiny_net, tiny_ds.features[pos[0]], None,
                                       CfObjective("wachter"), tiny_ds)
        assert out.found and np.all(out.grad == 0.0)

    def test_directional_derivative_matches_research(self, tiny_ds, tiny_net, tiny_search):
        # full re-search finite differences along random parameter directions
        x, res, budget = tiny_search
        obj = CfObjective("wachter")
        out = counterfactual_term_grad(tiny_net, x, None, obj, tiny_ds, budget=budget)
        rng = np.random.default_rng(0)
        flat = tiny_net.flatten()
        h = 3e-2
        checked = 0
        for _ in range(3):
            u = rng.normal(size=flat.size)
            u /= np.linalg.norm(u)
            costs = []
            for sign in (+1, -1):
                net2 = tiny_net.with_flat(flat + sign * h * u)
                r2 = rl.find_counterfactual(net2, x, obj, tiny_ds, budget=budget)
                assert r2.found
                costs.append(r2.cost)
            fd = (costs[0] - costs[1]) / (2 * h)
            got = float(out.grad @ u)
            if abs(fd) > 1e-3:
                assert abs(got - fd) / abs(fd) <= 0.10
                checked += 1
        assert checked >= 1


def mini_phase1(steps=300, seed=2):
    return Phase1Config(steps=steps, seed=seed, hidden=(8, 8),
                        bce_weight=2.0, counterfactual_weight=1.0,
                        delta_size_weight=0.25)


class TestPhase1:
    def test_zero_steps_keeps_zero_delta(self, synth_small):
        out = phase1_fit(synth_small, mini_phase1(steps=0))
        assert np.all(out.delta == 0.0)
        fresh = rl.MlpClassifier([synth_small.d, 8, 8, 1], seed=2)
        assert out.model.flatten().tobytes() == fresh.flatten().tobytes()

    def test_perturbed_negatives_become_accepted(self, synth_small):
        out = phase1_fit(synth_small, Phase1Config(
            steps=1500, seed=2, hidden=(8, 8), bce_weight=1.0,
            counterfactual_weight=4.0, delta_size_weight=0.05))
        tr = synth_small.train_idx
        rows = tr[~synth_small.protected[tr]]
        X = synth_small.features[rows]
        neg = out.model.forward(X) <= 0.5
        if neg.sum() == 0:
            pytest.skip("no predicted negatives left to measure")
        frac = (out.model.forward(X[neg] + out.delta) > 0.5).mean()
        assert frac >= 0.9

    def test_delta_l1_reasonable_scale(self, synth_small):
        out = phase1_fit(synth_small, mini_phase1(steps=800))
        assert 0.0 < np.abs(out.delta).sum() < 5.0

    def test_deterministic(self, synth_small):
        a = phase1_fit(synth_small, mini_phase1())
        b = phase1_fit(synth_small, mini_phase1())
        assert a.model.flatten().tobytes() == b.model.flatten().tobytes()
        assert a.delta.tobytes() == b.delta.tobytes()

    def test_masked_delta_coordinates_stay_zero(self, synth_small):
        cfg = mini_phase1(steps=200)
        cfg.feature_mask = (True, False)
        out = phase1_fit(synth_small, cfg)
        assert out.delta[1] == 0.0


def mini_phase2(steps=2, subsample=12):
    return Phase2Config(objective=CfObjective("wachter"), steps=steps,
                        subsample=subsample, seed=0,
                        budget=SearchBudget(steps=150))


class TestPhase2:
    def test_zero_steps_keeps_model(self, synth_small, baseline_small):
        delta = np.array([0.2, -0.1])
        art = phase2_fit(baseline_small, delta, synth_small, mini_phase2(steps=0))
        assert art.model.flatten().tobytes() == baseline_small.flatten().tobytes()
        assert len(art.phase2_steps) == 1

    def test_delta_never_mutated(self, synth_small, baseline_small):
        delta = np.array([0.3, -0.2])
        before = delta.tobytes()
        art = phase2_fit(baseline_small, delta, synth_small, mini_phase2())
        assert delta.tobytes() == before
        assert art.delta.tobytes() == before

    def test_input_model_not_mutated(self, synth_small, baseline_small):
        before = baseline_small.flatten().tobytes()
        phase2_fit(baseline_small, np.zeros(2), synth_small, mini_phase2())
        assert baseline_small.flatten().tobytes() == before

    def test_telemetry_fields(self, synth_small, baseline_small):
        art = phase2_fit(baseline_small, np.zeros(2), synth_small, mini_phase2())
        assert len(art.phase2_steps) == 3
        step = art.phase2_steps[0]
        assert np.isfinite(step.bce)
        assert step.not_found >= 0
        assert isinstance(step.constraint_ok, bool)

    def test_deterministic(self, synth_small, baseline_small):
        delta = np.array([0.1, 0.0])
        a = phase2_fit(baseline_small, delta, synth_small, mini_phase2())
        b = phase2_fit(baseline_small, delta, synth_small, mini_phase2())
        assert a.model.flatten().tobytes() == b.model.flatten().tobytes()


class TestArtifactSerialization:
    def test_round_trip(self, tmp_path, synth_small, baseline_small):
        art = phase2_fit(baseline_small, np.array([0.05, -0.02]), synth_small,
                         mini_phase2(steps=1))
        art.phase1_loss_trace = np.array([1.0, 0.5])
        art.phase1_delta_l1_trace = np.array([0.0, 0.1])
        paths = save_artifact(art, tmp_path / "art")
        again = load_artifact(tmp_path / "art")
        assert again.model.flatten().tobytes() == art.model.flatten().tobytes()
        assert np.array_equal(again.delta, art.delta)
        assert again.constraint_satisfied == art.constraint_satisfied
        assert len(again.phase2_steps) == len(art.phase2_steps)
        assert set(paths) == {"model", "delta", "telemetry"}

    def test_telemetry_sections(self, tmp_path, synth_small, baseline_small):
        import json
        art = phase2_fit(baseline_small, np.zeros(2), synth_small, mini_phase2(steps=1))
        art.phase1_loss_trace = np.array([1.0])
        art.phase1_delta_l1_trace = np.array([0.0])
        save_artifact(art, tmp_path / "art")
        blob = json.loads((tmp_path / "art" / "telemetry.json").read_text())
        assert set(blob) == {"phase1", "phase2"}
