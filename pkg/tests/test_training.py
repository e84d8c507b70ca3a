"""Tests for the loss, optimizer, schedule, metric, scenes, and train loop."""

import numpy as np
import pytest

from pointcf.network import NetConfig
from pointcf.tensor import Tensor, backward, grad_check
from pointcf.training import (
    EDGE_BAND,
    OptimState,
    SegModel,
    SynthSceneSpec,
    TrainConfig,
    TrainReport,
    adam_step,
    class_weights_from,
    edge_band_mask,
    evaluate,
    generate_scene,
    lr_at,
    miou,
    train,
    weighted_cross_entropy,
)


def tiny_config(**kw):
    defaults = dict(feature_width=3, num_classes=2, levels=2, base_width=8,
                    base_grid=0.12, blocks_per_level=(1, 1), k=8, heads=2, c_mid=4,
                    norm=True)
    defaults.update(kw)
    return NetConfig(**defaults)


class TestWeightedCrossEntropy:
    def test_perfect_logits_drive_loss_to_zero(self):
        labels = np.array([0, 1, 2])
        logits = Tensor(np.eye(3) * 200.0)
        loss = weighted_cross_entropy(logits, labels, np.ones(3))
        assert 0.0 <= float(loss.data) < 1e-12

    def test_uniform_binary_is_ln2(self):
        logits = Tensor(np.zeros((5, 2)))
        loss = weighted_cross_entropy(logits, np.array([0, 1, 0, 1, 1]), np.ones(2))
        np.testing.assert_allclose(float(loss.data), np.log(2.0), atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(20, 4))
        labels = rng.integers(0, 4, 20)
        weights = rng.uniform(0.5, 2.0, 4)
        a = weighted_cross_entropy(Tensor(logits), labels, weights)
        b = weighted_cross_entropy(Tensor(logits + 7.5), labels, weights)
        assert abs(float(a.data) - float(b.data)) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        labels = rng.integers(0, 3, 6)
        weights = rng.uniform(0.5, 2.0, 3)
        err = grad_check(lambda: weighted_cross_entropy(logits, labels, weights), [logits])
        assert err < 1e-6

    def test_invalid_label_rejected(self):
        with pytest.raises(IndexError):
            weighted_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]), np.ones(3))

    def test_nonpositive_weights_rejected(self):
        with pytest.raises(ValueError):
            weighted_cross_entropy(Tensor(np.zeros((2, 2))), np.array([0, 1]),
                                   np.array([1.0, 0.0]))


def reference_adam(params, grads_per_step, lr, wd):
    """Scalar-loop Adam twin used as the trajectory oracle."""
    import math
    p = [list(map(float, x)) for x in params]
    m = [[0.0] * len(x) for x in params]
    v = [[0.0] * len(x) for x in params]
    for t, grads in enumerate(grads_per_step, start=1):
        for i, g in enumerate(grads):
            for j in range(len(p[i])):
                p[i][j] -= lr * wd * p[i][j]
                m[i][j] = 0.9 * m[i][j] + 0.1 * g[j]
                v[i][j] = 0.999 * v[i][j] + 0.001 * g[j] * g[j]
                mh = m[i][j] / (1.0 - 0.9 ** t)
                vh = v[i][j] / (1.0 - 0.999 ** t)
                p[i][j] -= lr * mh / (math.sqrt(vh) + 1e-8)
    return p


class TestAdam:
    def test_zero_gradient_zero_decay_is_identity(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        state = OptimState.init([p], lr=0.1, weight_decay=0.0)
        adam_step([p], state)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_signed_lr(self):
        p = Tensor(np.array([0.5, -0.5, 2.0]), requires_grad=True)
        p.grad = np.array([0.3, -0.7, 1e-3])
        state = OptimState.init([p], lr=0.01, weight_decay=0.0)
        before = p.data.copy()
        adam_step([p], state)
        step = p.data - before
        np.testing.assert_allclose(step, -np.sign(p.grad) * 0.01, rtol=1e-4)

    def test_matches_scalar_reference_over_100_steps(self):
        rng = np.random.default_rng(2)
        init = [rng.normal(size=4), rng.normal(size=3)]
        a = rng.uniform(0.5, 2.0, 4)
        b = rng.uniform(0.5, 2.0, 3)
        params = [Tensor(init[0].copy(), requires_grad=True),
                  Tensor(init[1].copy(), requires_grad=True)]
        state = OptimState.init(params, lr=0.01, weight_decay=1e-4)
        grads_per_step = []
        for _ in range(100):
            g0 = a * params[0].data
            g1 = b * params[1].data
            grads_per_step.append([g0.tolist(), g1.tolist()])
            params[0].grad, params[1].grad = g0, g1
            adam_step(params, state)
        # replay the recorded gradient stream through the scalar twin
        ref = reference_adam([x.tolist() for x in init], grads_per_step, 0.01, 1e-4)
        np.testing.assert_allclose(params[0].data, ref[0], atol=1e-12)
        np.testing.assert_allclose(params[1].data, ref[1], atol=1e-12)


class TestSchedule:
    def test_published_anchor_points(self):
        cfg = TrainConfig(epochs=400)
        assert lr_at(0, cfg) == 0.001
        assert lr_at(79, cfg) == 0.001
        assert lr_at(80, cfg) == 0.0005
        assert lr_at(160, cfg) == 0.00025

    def test_drop_count(self):
        cfg = TrainConfig(epochs=400, decay_every_epochs=80)
        values = [lr_at(e, cfg) for e in range(400)]
        drops = sum(1 for a, b in zip(values, values[1:]) if b != a)
        assert drops == (400 - 1) // 80


class TestMiou:
    def test_perfect_prediction(self):
        labels = np.array([0, 1, 2, 1, 0])
        per_class, mean = miou(labels, labels, 3)
        np.testing.assert_array_equal(per_class, [1.0, 1.0, 1.0])
        assert mean == 1.0

    def test_disjoint_class_is_zero(self):
        per_class, _ = miou(np.array([0, 0]), np.array([1, 1]), 2)
        np.testing.assert_array_equal(per_class, [0.0, 0.0])

    def test_absent_class_excluded(self):
        per_class, mean = miou(np.array([0, 0]), np.array([0, 0]), 3)
        assert per_class[0] == 1.0
        assert np.isnan(per_class[1]) and np.isnan(per_class[2])
        assert mean == 1.0

    def test_hand_tabulated_three_class_case(self):
        pred = np.array([0, 0, 1, 1, 2, 2, 0, 1, 2, 0])
        true = np.array([0, 1, 1, 1, 2, 0, 0, 0, 2, 2])
        # class 0: tp=2 fp=2 fn=2 -> 1/3; class 1: tp=2 fp=1 fn=1 -> 1/2
        # class 2: tp=2 fp=1 fn=1 -> 1/2
        per_class, mean = miou(pred, true, 3)
        np.testing.assert_allclose(per_class, [1 / 3, 1 / 2, 1 / 2])
        np.testing.assert_allclose(mean, (1 / 3 + 1 / 2 + 1 / 2) / 3)


class TestGenerateScene:
    def test_deterministic_from_seed(self):
        spec = SynthSceneSpec(num_points=500, num_classes=3, seed=7)
        a = generate_scene(spec)
        b = generate_scene(spec)
        np.testing.assert_array_equal(a.positions, b.positions)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_clean_scene_labels_match_strips(self):
        spec = SynthSceneSpec(num_points=2000, num_classes=3, noise_sigma=0.0,
                              boundary_label_flip_rate=0.0, seed=8)
        cloud = generate_scene(spec)
        expect = np.minimum((cloud.positions[:, 0] * 3).astype(int), 2)
        np.testing.assert_array_equal(cloud.labels, expect)

    def test_flip_fraction_near_rate(self):
        rate = 0.1
        spec = SynthSceneSpec(num_points=100_000, num_classes=3,
                              boundary_label_flip_rate=rate, seed=9)
        clean = SynthSceneSpec(num_points=100_000, num_classes=3,
                               boundary_label_flip_rate=0.0, seed=9)
        noisy_cloud = generate_scene(spec)
        clean_cloud = generate_scene(clean)
        band = edge_band_mask(spec, clean_cloud.positions)
        flipped = (noisy_cloud.labels != clean_cloud.labels)
        assert not flipped[~band].any()
        frac = flipped[band].mean()
        assert abs(frac - rate) < 0.02

    def test_band_width_matches_constant(self):
        spec = SynthSceneSpec(num_points=1000, num_classes=2, seed=10)
        cloud = generate_scene(spec)
        band = edge_band_mask(spec, cloud.positions)
        inside = np.abs(cloud.positions[band][:, 0] - 0.5)
        assert (inside < EDGE_BAND + 1e-6).all()

    def test_two_class_geometries_smoke(self):
        for geometry in ("two_planes_corner", "plane_plus_sphere"):
            spec = SynthSceneSpec(num_points=400, num_classes=2, geometry=geometry,
                                  seed=11)
            cloud = generate_scene(spec)
            assert cloud.n == 400
            assert set(np.unique(cloud.labels)) == {0, 1}

    def test_rejects_bad_spec(self):
        with pytest.raises(ValueError):
            SynthSceneSpec(num_points=10, num_classes=2, geometry="torus")
        with pytest.raises(ValueError):
            SynthSceneSpec(num_points=10, num_classes=3, geometry="plane_plus_sphere")


class TestClassWeights:
    def test_rarer_class_weighs_more(self):
        spec = SynthSceneSpec(num_points=3000, num_classes=3, seed=12)
        cloud = generate_scene(spec)
        # make class 2 artificially rare
        cloud.labels[cloud.labels == 2] = 0
        cloud.labels[:10] = 2
        w = class_weights_from([cloud], 3)
        assert w[2] > w[0] and w[2] > w[1]
        np.testing.assert_allclose(w.mean(), 1.0)


class TestTrainLoop:
    def test_clean_two_class_scene_reaches_high_accuracy(self):
        spec = SynthSceneSpec(num_points=512, num_classes=2, noise_sigma=0.0,
                              boundary_label_flip_rate=0.0, seed=13)
        cloud = generate_scene(spec)
        model = SegModel.create(tiny_config(), seed=0)
        # one scene means one optimizer step per epoch, so the single-scene
        # smoke test runs hotter than the published multi-scene recipe
        cfg = TrainConfig(epochs=40, seed=0, eval_every=40, initial_lr=0.02)
        report = train(model, [cloud], cfg)
        pred = model.predict_labels(cloud)
        accuracy = (pred == cloud.labels).mean()
        assert accuracy >= 0.99
        assert len(report.rows) == 40

    def test_losses_positive_and_finite(self):
        spec = SynthSceneSpec(num_points=256, num_classes=2, seed=14)
        cloud = generate_scene(spec)
        model = SegModel.create(tiny_config(), seed=1)
        report = train(model, [cloud], TrainConfig(epochs=5, seed=1, eval_every=5))
        for _, loss, _, _ in report.rows:
            assert np.isfinite(loss) and loss > 0.0

    def test_same_seed_identical_curves(self):
        spec = SynthSceneSpec(num_points=256, num_classes=2, seed=15)
        clouds = [generate_scene(spec)]
        r1 = train(SegModel.create(tiny_config(), seed=2), clouds,
                   TrainConfig(epochs=4, seed=2, eval_every=2))
        r2 = train(SegModel.create(tiny_config(), seed=2), clouds,
                   TrainConfig(epochs=4, seed=2, eval_every=2))
        assert r1.to_text() == r2.to_text()  # bit-identical incl. the nan rows

    def test_evaluate_aggregates_over_clouds(self):
        spec_a = SynthSceneSpec(num_points=200, num_classes=2, seed=16)
        spec_b = SynthSceneSpec(num_points=200, num_classes=2, seed=17)
        model = SegModel.create(tiny_config(), seed=3)
        per_class, mean = evaluate(model, [generate_scene(spec_a), generate_scene(spec_b)])
        assert per_class.shape == (2,)
        assert 0.0 <= mean <= 1.0


class TestTrainReport:
    def test_text_roundtrip(self):
        report = TrainReport([(0, 0.5, 0.001, float("nan")), (1, 0.25, 0.001, 0.75)])
        text = report.to_text()
        assert text.splitlines()[0] == "epoch,loss,lr,miou"
        parsed = TrainReport.from_text(text)
        assert parsed.rows[1] == (1, 0.25, 0.001, 0.75)
        assert np.isnan(parsed.rows[0][3])
        assert parsed.final_miou() == 0.75
