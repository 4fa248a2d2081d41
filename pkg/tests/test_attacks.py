"""Attack contracts: budgets, degeneracies, selection, objectives."""

import numpy as np
import pytest

from gradcheck import numerical_grad, rel_error
from toys import LogisticSource
from longattack import tensor as T
from longattack.attacks import (
    AdversarialExample,
    AttackConfig,
    AttackTrajectory,
    CWConfig,
    TrajectoryPoint,
    _ascend,
    _ce_objective,
    cw_l2,
    distance_guided_attack,
    distance_loss,
    distance_reg_attack,
    feature_distance,
    fgsm,
    ifgsm,
    knowledge_guided_attack,
    mifgsm,
    pgd,
    run_attack,
    select_adversarial_candidate,
)
from longattack.models import BackboneConfig, init_source
from longattack.tensor import Tensor

TINY = BackboneConfig(input_shape=(1, 8, 8), conv_channels=(4, 8), embed_dim=16,
                      heads=2, tokens=4)


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


# ---------------------------------------------------------------- config


def test_config_defaults_match_protocol():
    cfg = AttackConfig()
    assert cfg.epsilon == 0.01
    assert cfg.iterations == 15
    assert cfg.lam == 0.05
    assert cfg.alpha == max(cfg.epsilon / cfg.iterations, cfg.epsilon / 10.0)


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epsilon=2.5)
    with pytest.raises(ValueError):
        AttackConfig(iterations=0)
    with pytest.raises(ValueError):
        AttackConfig(lam=-0.1)
    with pytest.raises(ValueError):
        # budget unreachable: 5 * 0.001 < 0.01
        AttackConfig(epsilon=0.01, iterations=5, step_size=0.001)


def test_config_json_round_trip():
    cfg = AttackConfig(epsilon=0.05, iterations=7, momentum=0.5, lam=0.2, seed=9,
                       cw=CWConfig(confidence=1.0, steps=42))
    blob = cfg.to_json()
    assert blob["lambda"] == 0.2
    back = AttackConfig.from_json(blob)
    assert back == cfg
    with pytest.raises(ValueError):
        AttackConfig.from_json({"epsilonn": 0.1})


# ---------------------------------------------------------------- fgsm


def test_fgsm_zero_epsilon_is_identity():
    model = LogisticSource([1.0])
    x = np.array([0.25])
    ex = fgsm(model, x, 1, 0.0)
    assert np.array_equal(ex.image, x)


def test_fgsm_logistic_hand_example():
    # w=1, b=0, x=[0], t=1: dCE/dx = sigmoid(0) - 1 = -0.5, so the step is
    # eps * sign(-0.5) = -0.1
    model = LogisticSource([1.0])
    ex = fgsm(model, np.array([0.0]), 1, 0.1)
    assert np.allclose(ex.image, [-0.1], atol=1e-15)


def test_fgsm_respects_bounds():
    rng = np.random.default_rng(0)
    model = LogisticSource(rng.normal(size=4))
    for _ in range(20):
        x = rng.uniform(-1, 1, 4)
        ex = fgsm(model, x, int(rng.integers(0, 2)), 0.3)
        assert np.abs(ex.image - x).max() <= 0.3 + 1e-9
        assert (np.abs(ex.image) <= 1.0).all()


# ---------------------------------------------------------------- ifgsm


def test_ifgsm_single_step_equals_fgsm():
    model = LogisticSource([1.0, -2.0])
    x = np.array([0.2, -0.4])
    cfg = AttackConfig(epsilon=0.1, iterations=1, step_size=0.1)
    ex_i, _ = ifgsm(model, x, 1, cfg)
    ex_f = fgsm(model, x, 1, 0.1)
    assert np.array_equal(ex_i.image, ex_f.image)


def test_ifgsm_trajectory_contract():
    model = LogisticSource([1.0])
    x = np.array([0.3])
    cfg = AttackConfig(epsilon=0.2, iterations=6)
    ex, traj = ifgsm(model, x, 1, cfg)
    assert len(traj) == cfg.iterations + 1
    assert np.array_equal(traj.points[0].image, x)  # first iterate is the clean input
    for p in traj.points:
        assert np.abs(p.image - x).max() <= cfg.epsilon + 1e-9
        assert (np.abs(p.image) <= 1.0).all()
    losses = [p.loss for p in traj.points]
    assert all(b >= a - 1e-12 for a, b in zip(losses, losses[1:]))


# ---------------------------------------------------------------- degeneracies


def test_mifgsm_zero_momentum_equals_ifgsm_per_iterate():
    rng = np.random.default_rng(1)
    model = LogisticSource(rng.normal(size=6))
    x = rng.uniform(-0.5, 0.5, 6)
    cfg = AttackConfig(epsilon=0.08, iterations=10)
    obj = _ce_objective(model, 1)
    pts_plain, _ = _ascend(obj, x, 1, cfg.epsilon, cfg.alpha, cfg.iterations)
    pts_mom, _ = _ascend(obj, x, 1, cfg.epsilon, cfg.alpha, cfg.iterations, momentum=0.0)
    for a, b in zip(pts_plain, pts_mom):
        assert np.abs(a.image - b.image).max() <= 1e-12


def test_pgd_zero_radius_equals_ifgsm():
    rng = np.random.default_rng(2)
    model = LogisticSource(rng.normal(size=5))
    x = rng.uniform(-0.5, 0.5, 5)
    cfg = AttackConfig(epsilon=0.06, iterations=8)
    ex_i, _ = ifgsm(model, x, 0, cfg)
    ex_p = pgd(model, x, 0, cfg, rng_seed=77, start_radius=0.0)
    assert np.abs(ex_p.image - ex_i.image).max() <= 1e-12


def test_pgd_deterministic_per_seed_and_bounded():
    rng = np.random.default_rng(3)
    model = LogisticSource(rng.normal(size=5))
    x = rng.uniform(-0.9, 0.9, 5)
    cfg = AttackConfig(epsilon=0.1, iterations=5)
    a = pgd(model, x, 1, cfg, rng_seed=5)
    b = pgd(model, x, 1, cfg, rng_seed=5)
    c = pgd(model, x, 1, cfg, rng_seed=6)
    assert np.array_equal(a.image, b.image)
    assert not np.array_equal(a.image, c.image)
    assert np.abs(a.image - x).max() <= cfg.epsilon + 1e-9
    assert (np.abs(a.image) <= 1.0).all()


def test_mifgsm_two_step_hand_computation():
    # 1-feature toy, t=1, so dCE/dx = sigmoid(x) - 1 (always negative).
    # With L1 normalization each step contributes -1; momentum accumulates
    # but the sign stays -1, so iterates move down by alpha each step.
    model = LogisticSource([1.0])
    x0 = 0.5
    cfg = AttackConfig(epsilon=0.2, iterations=2, momentum=0.5, step_size=0.1)
    ex = mifgsm(model, np.array([x0]), 1, cfg)
    assert np.allclose(ex.image, [x0 - 2 * 0.1], atol=1e-12)


def test_distance_reg_lambda_zero_equals_base():
    rng = np.random.default_rng(4)
    model = LogisticSource(rng.normal(size=4))
    x = rng.uniform(-0.5, 0.5, 4)
    prior = rng.uniform(-0.5, 0.5, 4)
    cfg = AttackConfig(epsilon=0.07, iterations=6, lam=0.0)
    ex_reg = distance_reg_attack("ifgsm", model, x, prior, 1, cfg)
    ex_base, _ = ifgsm(model, x, 1, cfg)
    assert np.abs(ex_reg.image - ex_base.image).max() <= 1e-12


# ---------------------------------------------------------------- cw


def test_cw_already_misclassified_keeps_zero_delta():
    model = LogisticSource([1.0])
    x = np.array([-0.4])  # true label 1 but model says 0: already fooled
    ex = cw_l2(model, x, 1, AttackConfig())
    assert ex.success
    assert np.linalg.norm(ex.image - x) <= 1e-6


def test_cw_finds_smaller_l2_than_fgsm_on_toy():
    model = LogisticSource([1.0])
    x = np.array([0.3])
    eps = 0.5
    ex_f = fgsm(model, x, 1, eps)
    ex_c = cw_l2(model, x, 1, AttackConfig(epsilon=eps))
    assert ex_f.success and ex_c.success
    assert np.linalg.norm(ex_c.image - x) < np.linalg.norm(ex_f.image - x)
    # grid-search oracle: smallest |delta| that crosses the boundary (x' < 0)
    grid = np.linspace(-1, 1, 20001)
    crossing = grid[sigmoid(grid) < 0.5]
    best = crossing[np.argmin(np.abs(crossing - x[0]))]
    assert np.linalg.norm(ex_c.image - x) <= abs(best - x[0]) + 0.02


def test_cw_stays_in_box():
    rng = np.random.default_rng(5)
    model = LogisticSource(rng.normal(size=4))
    for _ in range(5):
        x = rng.uniform(-1, 1, 4)
        ex = cw_l2(model, x, int(rng.integers(0, 2)),
                   AttackConfig(cw=CWConfig(steps=30, search_steps=2)))
        assert (np.abs(ex.image) <= 1.0).all()


# ---------------------------------------------------------------- distances


def test_feature_distance_contract():
    assert feature_distance(np.zeros(3), np.zeros(3)) == 0.0
    assert feature_distance(np.array([0.0, 0.0]), np.array([3.0, 4.0])) == 5.0
    rng = np.random.default_rng(6)
    for _ in range(20):
        a, b = rng.normal(size=5), rng.normal(size=5)
        assert feature_distance(a, b) == feature_distance(b, a)
    with pytest.raises(ValueError):
        feature_distance(np.zeros(3), np.zeros(4))


def test_distance_loss_zero_and_sign_flip():
    model = LogisticSource([1.0, 1.0])
    x = np.array([0.3, -0.2])
    assert distance_loss(model.features, x, x.copy(), 1).item() == 0.0
    assert distance_loss(model.features, x, x.copy(), 0).item() == 0.0
    prior = np.array([0.1, 0.4])
    v1 = distance_loss(model.features, x, prior, 1).item()
    v0 = distance_loss(model.features, x, prior, 0).item()
    assert v1 == -v0
    assert v0 > 0


def test_distance_loss_gradient_matches_finite_differences():
    model = init_source(TINY, seed=3)
    rng = np.random.default_rng(7)
    x = rng.uniform(-1, 1, TINY.input_shape)
    prior = rng.uniform(-1, 1, TINY.input_shape)
    xt = Tensor(x.copy(), requires_grad=True)
    g = T.backward(distance_loss(model.features, xt, prior, 1))[xt]
    gn = numerical_grad(lambda a: distance_loss(model.features, Tensor(a), prior, 1).item(), x)
    assert rel_error(g, gn) <= 1e-4


def test_distance_guided_step_moves_toward_prior_for_cancer():
    model = LogisticSource([1.0, 1.0])
    x = np.array([0.5, 0.5])
    prior = np.array([-0.5, -0.5])
    before = feature_distance(x, prior)
    ex = distance_guided_attack("fgsm", model, x, prior, 1, AttackConfig(epsilon=0.1))
    assert feature_distance(ex.image, prior) < before
    assert ex.feature_distance_to_prior == feature_distance(ex.image, prior)


def test_distance_guided_zero_epsilon_and_bounds():
    model = LogisticSource([1.0])
    x = np.array([0.2])
    ex = distance_guided_attack("ifgsm", model, x, np.array([-0.3]), 0,
                                AttackConfig(epsilon=0.0, iterations=3))
    assert np.array_equal(ex.image, x)
    ex2 = distance_guided_attack("ifgsm", model, np.array([0.95]), np.array([-1.0]), 0,
                                 AttackConfig(epsilon=0.2, iterations=4))
    assert np.abs(ex2.image - 0.95).max() <= 0.2 + 1e-9
    assert (np.abs(ex2.image) <= 1.0).all()


def test_distance_reg_gradient_is_sum_of_parts():
    model = init_source(TINY, seed=4)
    rng = np.random.default_rng(8)
    x = rng.uniform(-1, 1, TINY.input_shape)
    prior = rng.uniform(-1, 1, TINY.input_shape)
    lam = 0.05

    def combined(a):
        feats, logits = model.features_and_logits(Tensor(a))
        ce = T.cross_entropy(logits, 1)
        prior_feats = model.features(Tensor(prior)).data
        diff = feats - Tensor(prior_feats)
        dist = T.sqrt(T.sum_(diff * diff)) * -1.0  # label 1 convention
        return (ce + dist * lam).item()

    xt = Tensor(x.copy(), requires_grad=True)
    g_ce = T.backward(T.cross_entropy(model.logits(xt), 1))[xt].copy()
    xt2 = Tensor(x.copy(), requires_grad=True)
    g_d = T.backward(distance_loss(model.features, xt2, prior, 1))[xt2].copy()
    gn = numerical_grad(combined, x)
    assert rel_error(g_ce + lam * g_d, gn) <= 1e-4


# ---------------------------------------------------------------- selection


def _fake_trajectory(distances, crossed):
    pts = [TrajectoryPoint(np.array([d]), 0, 0.0, c)
           for d, c in zip(distances, crossed)]
    return AttackTrajectory(pts)


def _scalar_feature(img):
    return np.array([img[0]])


def test_selection_spec_examples():
    traj = _fake_trajectory([0.5, 0.2, 0.9], [True, True, True])
    prior = np.array([0.0])
    assert select_adversarial_candidate(traj, prior, _scalar_feature, 1) == 1
    assert select_adversarial_candidate(traj, prior, _scalar_feature, 0) == 2


def test_selection_filters_non_crossing_and_falls_back():
    traj = _fake_trajectory([0.1, 0.5, 0.9], [False, True, False])
    prior = np.array([0.0])
    assert select_adversarial_candidate(traj, prior, _scalar_feature, 1) == 1
    none_crossed = _fake_trajectory([0.1, 0.5], [False, False])
    assert select_adversarial_candidate(none_crossed, prior, _scalar_feature, 1) == 1


def test_selection_tie_breaks_to_lowest_index():
    traj = _fake_trajectory([0.4, 0.4, 0.4], [True, True, True])
    prior = np.array([0.0])
    assert select_adversarial_candidate(traj, prior, _scalar_feature, 1) == 0
    assert select_adversarial_candidate(traj, prior, _scalar_feature, 0) == 0


def test_selection_empty_trajectory_errors():
    with pytest.raises(ValueError):
        select_adversarial_candidate(AttackTrajectory([]), np.zeros(1), _scalar_feature, 1)


def test_selection_matches_brute_force():
    rng = np.random.default_rng(9)
    for _ in range(500):
        n = int(rng.integers(1, 16))
        vals = rng.uniform(-1, 1, n)
        crossed = rng.uniform(size=n) < 0.5
        label = int(rng.integers(0, 2))
        prior = rng.uniform(-1, 1, 1)
        traj = _fake_trajectory(vals, crossed)
        got = select_adversarial_candidate(traj, prior, _scalar_feature, label)
        dists = [abs(v - prior[0]) for v in vals]
        idxs = [i for i in range(n) if crossed[i]]
        if not idxs:
            expected = n - 1
        elif label == 1:
            expected = min(idxs, key=lambda i: (dists[i], i))
        else:
            expected = min(idxs, key=lambda i: (-dists[i], i))
        assert got == expected


# ---------------------------------------------------------------- knowledge-guided


def test_knowledge_guided_single_crossing_returns_it():
    # craft a model/path where the boundary is crossed exactly once at the end
    model = LogisticSource([1.0])
    x = np.array([0.05])
    cfg = AttackConfig(epsilon=0.06, iterations=3, step_size=0.02)
    ex, traj = ifgsm(model, x, 1, cfg)
    crossing = [i for i, p in enumerate(traj.points) if p.crossed]
    kg = knowledge_guided_attack(model, x, np.array([-0.9]), 1, cfg)
    if len(crossing) == 1:
        assert kg.selected_iterate_index == crossing[0]
    assert kg.success == bool(crossing)


def test_knowledge_guided_picks_min_distance_for_cancer():
    rng = np.random.default_rng(10)
    model = init_source(TINY, seed=5)
    x = rng.uniform(-0.8, 0.8, TINY.input_shape)
    prior = rng.uniform(-0.8, 0.8, TINY.input_shape)
    cfg = AttackConfig(epsilon=0.3, iterations=8)
    ex = knowledge_guided_attack(model, x, prior, 1, cfg)
    _, traj = ifgsm(model, x, 1, cfg)
    prior_feats = model.features(Tensor(prior)).data
    dists = [feature_distance(model.features(Tensor(p.image)).data, prior_feats)
             for p in traj.points]
    crossing = [i for i, p in enumerate(traj.points) if p.crossed]
    if crossing:
        assert ex.selected_iterate_index == min(crossing, key=lambda i: (dists[i], i))
        assert ex.feature_distance_to_prior == pytest.approx(
            dists[ex.selected_iterate_index], abs=1e-12)


def test_knowledge_guided_never_touches_prior_and_respects_budget():
    rng = np.random.default_rng(11)
    model = init_source(TINY, seed=6)
    x = rng.uniform(-1, 1, TINY.input_shape)
    prior = rng.uniform(-1, 1, TINY.input_shape)
    prior_bytes = prior.tobytes()
    cfg = AttackConfig(epsilon=0.05, iterations=6)
    ex = knowledge_guided_attack(model, x, prior, 1, cfg)
    assert prior.tobytes() == prior_bytes
    assert np.abs(ex.image - x).max() <= cfg.epsilon + 1e-9
    assert (np.abs(ex.image) <= 1.0).all()


# ---------------------------------------------------------------- registry


def test_run_attack_dispatch_and_determinism():
    rng = np.random.default_rng(12)
    model = init_source(TINY, seed=7)
    x = rng.uniform(-1, 1, TINY.input_shape)
    prior = rng.uniform(-1, 1, TINY.input_shape)
    cfg = AttackConfig(epsilon=0.05, iterations=4,
                       cw=CWConfig(steps=20, search_steps=1))
    for name in ("fgsm", "ifgsm", "mifgsm", "pgd", "cw", "knowledge_guided",
                 "distance_guided_fgsm", "distance_reg_ifgsm"):
        a = run_attack(name, model, x, 1, cfg, prior=prior, rng_seed=3)
        b = run_attack(name, model, x, 1, cfg, prior=prior, rng_seed=3)
        assert np.array_equal(a.image, b.image), name
        assert isinstance(a, AdversarialExample)
    with pytest.raises(ValueError):
        run_attack("unknown", model, x, 1, cfg)
    with pytest.raises(ValueError):
        run_attack("knowledge_guided", model, x, 1, cfg)  # missing prior
