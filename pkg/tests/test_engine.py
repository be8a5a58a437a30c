import numpy as np
import pytest

from dynloss import autodiff as ad
from dynloss import engine as E
from dynloss import models as mdl
from dynloss import oracles as O
from dynloss.data import make_synthetic


@pytest.fixture(scope="module")
def prob():
    return O.tiny_problem(O.TinySpec(N=3))


def _same(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


def test_zero_steps_leave_student_unchanged(prob):
    theta, traj = E.student_stage(prob.theta0, prob.phi, [], prob.cfg)
    assert _same(theta, prob.theta0) and traj.N == 0 and len(traj) == 1


def test_zero_learning_rate_leaves_student_unchanged(prob):
    cfg = E.StageConfig(N=3, K=1, eta=0.0, epochs=1)
    theta, traj = E.student_stage(prob.theta0, prob.phi, prob.batches1, cfg)
    assert _same(theta, prob.theta0) and len(traj) == 4


def test_single_step_matches_hand_gradient():
    # one input, two classes, linear DLN(a, b) = b - a on raw scores
    theta = {"w0": np.array([[0.5, -0.25]]), "b0": np.array([0.1, 0.2])}
    phi = {"w0": np.array([[-1.0], [1.0]]), "b0": np.zeros(1)}
    x, y = np.array([[2.0], [1.0]]), np.array([0, 1])
    cfg = E.StageConfig(N=1, K=1, eta=0.1, epochs=1, dln_input="score")
    new, value = E.sgd_step(theta, phi, x, y, cfg)
    # loss = mean(s1 - s0 for example 0, s0 - s1 for example 1)
    #      = 0.5 * [(w1 - w0) * 2 + (b1 - b0) + (w0 - w1) * 1 + (b0 - b1)] = 0.5 * (w1 - w0)
    assert value == pytest.approx(0.5 * (-0.25 - 0.5))
    np.testing.assert_allclose(new["w0"], theta["w0"] - 0.1 * np.array([[-0.5, 0.5]]))
    np.testing.assert_allclose(new["b0"], theta["b0"], atol=1e-17)


def test_trajectory_replay_is_bitwise(prob):
    _, traj = E.student_stage(prob.theta0, prob.phi, prob.batches1, prob.cfg)
    for i in range(1, traj.N + 1):
        assert _same(traj.replay(i, prob.phi, prob.cfg), traj.thetas[i])


def test_nonfinite_student_step_names_the_step(prob):
    # raw-score DLN: the first step makes weights ~1e200, the second step's scores overflow
    cfg = E.StageConfig(N=3, K=1, eta=prob.cfg.eta, epochs=1, dln_input="score")
    huge = [(x * 1e200, y) for x, y in prob.batches1]
    with pytest.raises(E.StageError, match="student step 2"):
        E.student_stage(prob.theta0, prob.phi, huge, cfg)


@pytest.mark.parametrize("n", [1, 3])
def test_rmd_matches_finite_differences(n):
    err, _ = O.check_rmd(O.tiny_problem(O.TinySpec(N=n, seed=2)))
    assert err < 1e-4


@pytest.mark.parametrize("n", [1, 2, 4])
def test_rmd_equals_forward_unroll(n):
    err, _ = O.check_unroll_identity(O.tiny_problem(O.TinySpec(N=n, seed=1)))
    assert err < 1e-10


def test_rmd_with_raw_score_inputs():
    err, _ = O.check_rmd(O.tiny_problem(O.TinySpec(N=2, dln_input="score")))
    assert err < 1e-4


def test_no_dln_influence_means_zero_hypergradient(prob):
    cfg = E.StageConfig(N=3, K=1, eta=prob.cfg.eta, w=0.0, epochs=1)
    _, traj = E.student_stage(prob.theta0, prob.phi, prob.batches1, cfg)
    grad = E.rmd_dln_grad(traj, prob.phi, prob.val1, cfg)
    assert all(not v.any() for v in grad.values())


def test_rmd_rejects_incomplete_trajectory(prob):
    _, traj = E.student_stage(prob.theta0, prob.phi, prob.batches1, prob.cfg)
    traj.thetas.pop()
    with pytest.raises(ValueError):
        E.rmd_dln_grad(traj, prob.phi, prob.val1, prob.cfg)


def _update(prob, gamma, zero_output=False):
    teacher = mdl.init_teacher(np.random.default_rng(0), prob.spec.teacher_hidden, zero_output=zero_output)
    grad = {k: np.random.default_rng(1).standard_normal(v.shape) for k, v in prob.phi.items()}
    state = mdl.TeacherState.zeros(mdl.count(prob.phi), prob.spec.teacher_hidden)
    return E.dln_update(prob.phi, grad, mdl.as_constants(teacher), state, gamma)


def test_dln_update_definition(prob):
    new, g, _ = _update(prob, 0.001)
    step = mdl.flatten(mdl.numpy_params(new)) - mdl.flatten(prob.phi)
    np.testing.assert_allclose(step, 0.001 * g.data, rtol=1e-9, atol=1e-18)
    assert np.any(g.data)


def test_dln_update_identities(prob):
    new, _, _ = _update(prob, 0.0)
    assert _same(mdl.numpy_params(new), prob.phi)
    new, g, _ = _update(prob, 0.1, zero_output=True)
    assert not g.data.any() and _same(mdl.numpy_params(new), prob.phi)


def test_dln_update_shape_mismatch(prob):
    teacher = mdl.as_constants(mdl.init_teacher(np.random.default_rng(0), (2, 1)))
    with pytest.raises(ad.ShapeError):
        E.dln_update(prob.phi, {"w0": np.ones(3)}, teacher, mdl.TeacherState.zeros(3, (2, 1)), 0.1)


@pytest.mark.parametrize("n", [1, 3])
def test_teacher_gradient_matches_finite_differences(n):
    err, _ = O.check_teacher(O.tiny_problem(O.TinySpec(N=n, seed=3)))
    assert err < 1e-3


def _teacher_grad(prob, gamma, teacher):
    cfg = E.StageConfig(N=prob.spec.N, K=1, eta=prob.spec.eta, gamma=gamma, epochs=1)
    theta1, traj = E.student_stage(prob.theta0, prob.phi, prob.batches1, cfg)
    grad_phi = E.rmd_dln_grad(traj, prob.phi, prob.val1, cfg)
    tape = ad.Tape()
    t = mdl.as_leaves(tape, teacher)
    state = mdl.TeacherState.zeros(mdl.count(prob.phi), prob.spec.teacher_hidden)
    new, _, _ = E.dln_update(prob.phi, grad_phi, t, state, gamma)
    _, traj2 = E.student_stage(theta1, mdl.numpy_params(new), prob.batches2, cfg)
    return E.teacher_stage(traj2, new, prob.val2, t, cfg), theta1, cfg


def test_zero_rate_cuts_the_teacher_off(prob):
    (grads, _), _, _ = _teacher_grad(prob, 0.0, prob.teacher)
    assert all(not v.any() for v in grads.values())


def test_zero_output_teacher_matches_frozen_dln(prob):
    teacher = mdl.init_teacher(np.random.default_rng(5), prob.spec.teacher_hidden, zero_output=True)
    (grads, rev), theta1, cfg = _teacher_grad(prob, 0.1, teacher)
    frozen, _ = O.stage_val_ce(prob, prob.phi, prob.batches2, prob.val2, theta0=theta1)
    assert rev.val_ce == frozen
    assert any(v.any() for v in grads.values())


def test_teacher_stage_needs_recorded_update(prob):
    tape = ad.Tape()
    t = mdl.as_leaves(tape, prob.teacher)
    _, traj2 = E.student_stage(prob.theta0, prob.phi, prob.batches2, prob.cfg)
    with pytest.raises(ad.TapeError):
        E.teacher_stage(traj2, mdl.as_constants(prob.phi), prob.val2, t, prob.cfg)


# -- full loop on a toy problem ------------------------------------------------------


@pytest.fixture(scope="module")
def toy():
    full = make_synthetic("moons", 240, noise=0.15, seed=0)
    return full.subset(np.arange(200)), full.subset(np.arange(200, 240))


SMALL = dict(student_hidden=(8,), dln_sizes=(2, 6, 6, 1), teacher_hidden=(4, 1), warm_start_steps=100)


def test_stage_accounting_and_record(toy):
    cfg = E.StageConfig(N=2, K=5, epochs=2, train_batch=10, val_batch=20, gamma=0.01)
    res = E.run_l2t_dln(cfg, *toy, E.ModelConfig(**SMALL))
    assert res.student_steps == 2 * cfg.K * cfg.N
    assert len(res.record) == 2 * cfg.K
    assert [r.stage for r in res.record.rows] == list(range(1, 11))
    assert [r.kind for r in res.record.rows] == ["dln", "teacher"] * 5
    assert sorted(res.phi_history) == [0, 1, 2]
    header = res.record.to_csv().splitlines()[0]
    assert header == "stage,kind,train_loss,val_ce,test_acc,grad_phi_norm,g_norm,wall_ms"


def test_run_is_deterministic(toy):
    cfg = E.StageConfig(N=2, K=3, epochs=2, train_batch=10, val_batch=20, seed=11)
    a = E.run_l2t_dln(cfg, *toy, E.ModelConfig(**SMALL))
    b = E.run_l2t_dln(cfg, *toy, E.ModelConfig(**SMALL))
    assert a.record.to_csv() == b.record.to_csv()
    assert _same(a.phi, b.phi) and _same(a.teacher, b.teacher)


def test_no_outer_iterations(toy):
    cfg = E.StageConfig(N=2, K=0, epochs=1)
    res = E.run_l2t_dln(cfg, *toy, E.ModelConfig(**SMALL))
    assert len(res.record) == 0 and res.student_steps == 0


@pytest.mark.parametrize("opt", ["adam", "sgd", "rmsprop", "none"])
def test_handcrafted_dln_optimizers(toy, opt):
    cfg = E.StageConfig(N=2, K=2, epochs=1, train_batch=10, val_batch=20)
    res = E.run_l2t_dln(cfg, *toy, E.ModelConfig(dln_optimizer=opt, **SMALL))
    assert len(res.record) == 4
    moved = not _same(res.phi, res.phi_history[0])
    assert moved == (opt != "none")


def test_fixed_loss_baseline_budget(toy):
    cfg = E.StageConfig(N=2, K=4, epochs=2, train_batch=10, val_batch=20)
    res = E.run_fixed_loss(cfg, *toy, E.ModelConfig(**SMALL))
    assert res.student_steps == 2 * cfg.K * cfg.N and len(res.record) == 2 * cfg.K


def test_epoch_schedule():
    assert E.epoch_schedule(40, 10) == [4] * 10
    assert E.epoch_schedule(5, 3) == [2, 2, 1]
    assert sum(E.epoch_schedule(7, 10)) == 7


@pytest.mark.parametrize("bad", [dict(K=3, M=4), dict(val_ratio=1.0), dict(N=-1), dict(teacher_lr=0.0),
                                 dict(nonfinite="ignore"), dict(dln_input="logits")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        E.StageConfig(**bad)


def test_warm_start_fits_cross_entropy():
    rng = np.random.default_rng(0)
    phi = E.warm_start_dln(mdl.init_dln(rng), np.random.default_rng(1), 600, 0.005)
    s = np.array([[3.0, -3.0], [2.0, -1.0], [0.0, 0.0], [-1.0, 2.0], [-3.0, 3.0]])
    got = mdl.dln_forward(mdl.as_constants(phi), mdl.score_pairs_to_inputs(s)).data.ravel()
    assert np.all(np.diff(got) > 0)
    np.testing.assert_allclose(got[1:4], np.logaddexp(0, s[1:4, 1] - s[1:4, 0]), atol=0.25)
