import numpy as np
import pytest

from reachtrain import checkpoint as ckpt
from reachtrain import trainer
from reachtrain.models import MlpPolicy
from reachtrain.scenario import TrainConfig, bundled
from reachtrain.trainer import AdamState, TrainingAborted, adam_step, evaluator, loss_value, train


def small(name="unicycle_reach_avoid", T=3, **train_kw):
    s = bundled(name)
    pol = MlpPolicy([s.n_x, 8, s.dynamics.n_u])
    cfg = TrainConfig(**{"lr": 1e-2, "epochs": 20, "cert_every": 5, **train_kw})
    return s.replace(T=T, policy=pol, train=cfg)


# ---- Adam -----------------------------------------------------------------------------


def test_adam_first_step():
    st = AdamState.for_params({"w": np.array(0.0)}, lr=0.1)
    out = adam_step(st, {"w": np.array(0.0)}, {"w": np.array(1.0)})
    assert out["w"] == pytest.approx(-0.1, rel=1e-7)
    assert st.t == 1


def test_adam_zero_gradient_is_noop():
    p = {"a": np.array([1.0, -2.0]), "b": np.ones((2, 2))}
    st = AdamState.for_params(p, lr=0.1)
    out = p
    for _ in range(5):
        out = adam_step(st, out, {k: np.zeros_like(v) for k, v in p.items()})
    assert all(np.array_equal(out[k], p[k]) for k in p)


def test_adam_on_square_decreases():
    st = AdamState.for_params({"x": np.array(1.0)}, lr=0.01)
    p = {"x": np.array(1.0)}
    trace = []
    for _ in range(100):
        p = adam_step(st, p, {"x": 2 * p["x"]})
        trace.append(abs(float(p["x"])))
    assert all(b < a for a, b in zip(trace[5:], trace[6:]))


def test_adam_shape_and_key_errors():
    st = AdamState.for_params({"x": np.zeros(2)})
    with pytest.raises(ValueError, match="shape"):
        adam_step(st, {"x": np.zeros(2)}, {"x": np.zeros(3)})
    with pytest.raises(ValueError, match="keys"):
        adam_step(st, {"x": np.zeros(2)}, {"y": np.zeros(2)})


def test_adam_nan_names_parameter():
    st = AdamState.for_params({"x": np.zeros(3)})
    with pytest.raises(FloatingPointError, match=r"'x'.*\(1,\)"):
        adam_step(st, {"x": np.zeros(3)}, {"x": np.array([0.0, np.nan, 0.0])})


# ---- gradient routes ---------------------------------------------------------------------


@pytest.mark.parametrize("name", ["unicycle_reach_avoid", "quadrotor_obstacles", "unicycle_invariance"])
def test_jax_and_diffcore_agree(name):
    s = small(name, T=4)
    if s.weights.t_inv is not None:
        s.weights.t_inv = 2
    p = {k: v * 5 for k, v in s.policy.init_params(3).items()}
    a, b = evaluator(s, "jax")(p), evaluator(s, "diffcore")(p)
    assert a.loss == pytest.approx(b.loss, rel=1e-10)
    assert a.loss == pytest.approx(loss_value(s, p), rel=1e-10)
    for k in p:
        np.testing.assert_allclose(a.grads[k], b.grads[k], rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(a.tube.lo, b.tube.lo, rtol=1e-12, atol=1e-12)


def test_unknown_backend():
    with pytest.raises(ValueError, match="backend"):
        evaluator(small(), "torch")


# ---- training loop ------------------------------------------------------------------------


def test_zero_epochs_returns_initial_params():
    s = small(epochs=0)
    r = train(s)
    assert r.history == [] and r.epochs == 0
    init = s.policy.init_params(s.train.seed)
    assert all(np.array_equal(r.params[k], init[k]) for k in init)
    assert r.tube is not None and r.cert is not None


def test_negative_epochs_rejected():
    with pytest.raises(ValueError):
        train(small(epochs=-1))


def test_deterministic_given_seed():
    a, b = train(small(seed=4)), train(small(seed=4))
    assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_first_epoch_changes_params():
    r = train(small(epochs=1))
    assert any(not np.array_equal(r.params[k], r.initial_params[k]) for k in r.params)


def test_history_records_terms_and_losses():
    r = train(small(epochs=7))
    assert len(r.history) == 7 == len(r.losses)
    assert [h["epoch"] for h in r.history] == list(range(7))
    assert {"goal", "overlap_goal", "overlap_obs", "vol"} <= set(r.history[0])
    assert all(np.isfinite(r.losses))
    assert [c["epoch"] for c in r.cert_checks] == [0, 5]


def test_loss_decreases_on_small_problem():
    r = train(small(epochs=200, lr=3e-3))
    assert r.losses[-1] < r.losses[0]


def test_plateau_stop():
    # a zero-weight objective is perfectly flat
    s = small(epochs=50, plateau_window=10, plateau_tol=1e-5)
    s.weights.w_goal = s.weights.w_overlap_goal = s.weights.w_overlap_obs = s.weights.w_vol = 0.0
    r = train(s)
    assert r.stop_reason == "plateau" and r.epochs == 11


def test_oscillating_loss_is_not_a_plateau():
    assert trainer._window_spread([1.0, 2.0, 1.0]) == 1.0
    assert trainer._window_spread([5.0, 5.0, 5.0]) == 0.0


def test_certified_early_stop_returns_checked_params():
    s = small(epochs=30, early_stop_on_cert=True, cert_every=1)
    s.certify.require_goal = False  # obstacle-free from the start
    r = train(s)
    assert r.stop_reason == "certified" and r.epochs == 1
    assert all(np.array_equal(r.params[k], r.initial_params[k]) for k in r.params)
    assert r.cert.satisfied(require_goal=False)


def test_nan_aborts_and_keeps_last_good_checkpoint(tmp_path, monkeypatch):
    s = small(epochs=10, checkpoint_every=2)
    real = trainer.evaluator

    def poisoned(scenario, backend="jax"):
        run = real(scenario, backend)
        calls = {"n": 0}

        def wrapped(p):
            ev = run(p)
            calls["n"] += 1
            if calls["n"] == 4:
                ev.grads = {k: np.full_like(g, np.nan) for k, g in ev.grads.items()}
            return ev
        return wrapped

    monkeypatch.setattr(trainer, "evaluator", poisoned)
    path = tmp_path / "ck.json"
    with pytest.raises(TrainingAborted, match="epoch 3") as info:
        train(s, checkpoint_path=path)
    rep = info.value.report
    assert rep.stop_reason == "aborted" and rep.epochs == 3
    saved = ckpt.load(path)
    assert saved["epoch"] == 3
    assert all(np.array_equal(saved["params"][k], rep.params[k]) for k in rep.params)
    assert all(np.all(np.isfinite(v)) for v in saved["params"].values())


def test_resume_matches_uninterrupted_run(tmp_path):
    full = train(small(epochs=10, seed=2))
    path = tmp_path / "ck.json"
    first = train(small(epochs=6, seed=2), checkpoint_path=path)
    saved = ckpt.load(path)
    assert saved["epoch"] == 6
    a = saved["adam"]
    state = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["t"], a["m"], a["v"])
    rest = train(small(epochs=4, seed=2), params=saved["params"], adam=state, start_epoch=6)
    assert first.losses + rest.losses == full.losses
    assert [h["epoch"] for h in rest.history] == [6, 7, 8, 9]
    assert all(np.array_equal(rest.params[k], full.params[k]) for k in full.params)


def test_report_to_dict_is_json_ready():
    import json
    r = train(small(epochs=3))
    d = json.loads(json.dumps(r.to_dict()))
    assert d["epochs"] == 3 and d["config_hash"] == r.config_hash and d["stop_reason"] == "max_epochs"
