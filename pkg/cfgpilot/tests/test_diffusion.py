import numpy as np
import pytest

from app.core.diffusion import (
    CLASS_NAMES,
    Denoiser,
    NoiseSchedule,
    ProxyClassifier,
    build_state,
    cfg_combine,
    classifier_accuracy,
    classify,
    clip_guidance,
    ddim_sample,
    ddim_step,
    denoiser_loss,
    gen_dataset,
    predict_x0,
    q_sample,
    time_embedding,
    train_classifier,
    train_denoiser,
)
from app.models import ClassifierConfig, DenoiserConfig


@pytest.fixture(scope="module")
def dataset():
    return gen_dataset(seed=11, n_per_class=20)


def constant_schedule_064():
    return NoiseSchedule(np.array([1.0, 0.64]), t_sample=1)


def test_linear_schedule_shape():
    schedule = NoiseSchedule.linear()
    assert schedule.t_train == 200
    assert schedule.alpha_bars[0] == 1.0
    assert np.all(np.diff(schedule.alpha_bars) < 0)
    assert np.all(schedule.alpha_bars > 0)
    np.testing.assert_allclose(schedule.betas[[0, -1]], [1e-4, 0.02])
    steps = schedule.timesteps
    assert len(steps) == 51
    assert steps[0] == 200 and steps[-1] == 0
    assert np.all(np.diff(steps) < 0)


def test_schedule_rejects_bad_alpha_bars():
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([1.0, 0.5, 0.7]), t_sample=1)
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([0.9, 0.5]), t_sample=1)


def test_q_sample_examples():
    schedule = constant_schedule_064()
    x_t = q_sample(schedule, np.zeros((4, 4)), 1, np.ones((4, 4)))
    np.testing.assert_allclose(x_t, 0.6, atol=1e-12)
    with pytest.raises(ValueError):
        q_sample(schedule, np.zeros(3), 0, np.zeros(3))
    with pytest.raises(ValueError):
        q_sample(schedule, np.zeros(3), 2, np.zeros(3))


def test_q_sample_statistics():
    schedule = NoiseSchedule.linear()
    rng = np.random.default_rng(0)
    x0 = np.full(10_000, 0.5)
    x_t = q_sample(schedule, x0, 100, rng.standard_normal(10_000))
    ab = schedule.alpha_bars[100]
    stderr = np.sqrt(1 - ab) / np.sqrt(10_000)
    assert abs(x_t.mean() - np.sqrt(ab) * 0.5) < 3 * stderr


def test_predict_x0_inverts_q_sample(rng):
    schedule = NoiseSchedule.linear()
    x0 = rng.uniform(-1, 1, size=16)
    eps = rng.standard_normal(16)
    x_t = q_sample(schedule, x0, 150, eps)
    np.testing.assert_allclose(predict_x0(schedule, x_t, eps, 150, clamp=False), x0, atol=1e-12)
    np.testing.assert_allclose(predict_x0(constant_schedule_064(), np.full(3, 0.6), np.ones(3), 1), 0.0, atol=1e-12)


def test_ddim_step_to_zero_returns_x0():
    schedule = constant_schedule_064()
    out = ddim_step(schedule, np.full(3, 0.6), np.ones(3), 1, 0)
    np.testing.assert_allclose(out, 0.0, atol=1e-12)
    with pytest.raises(ValueError):
        ddim_step(schedule, np.zeros(3), np.zeros(3), 0, 1)


def test_clamped_ddim_step_uses_implied_noise():
    schedule = NoiseSchedule(np.array([1.0, 0.64, 0.36]), t_sample=2)
    # x0 estimate -13.3 clamps to -1, implied noise 0.75
    out = ddim_step(schedule, np.zeros(3), np.full(3, 10.0), 2, 1)
    np.testing.assert_allclose(out, -0.35, atol=1e-12)
    unclamped = ddim_step(schedule, np.zeros(3), np.full(3, 10.0), 2, 1, clamp=False)
    np.testing.assert_allclose(unclamped, 0.8 * (-8.0 / 0.6) + 0.6 * 10.0, atol=1e-12)

    in_range = ddim_step(schedule, np.full(3, 0.3), np.full(3, 0.1), 2, 1)
    plain = ddim_step(schedule, np.full(3, 0.3), np.full(3, 0.1), 2, 1, clamp=False)
    np.testing.assert_allclose(in_range, plain, atol=1e-12)
    np.testing.assert_allclose(in_range, 0.8 * 0.22 / 0.6 + 0.06, atol=1e-12)


def test_ddim_chain_with_oracle_noise_recovers_x0(rng):
    schedule = NoiseSchedule.linear()
    x0 = rng.uniform(-1, 1, size=256)
    x = q_sample(schedule, x0, schedule.t_train, rng.standard_normal(256))
    steps = schedule.timesteps
    for t, t_prev in zip(steps[:-1], steps[1:]):
        ab = schedule.alpha_bars[t]
        oracle = (x - np.sqrt(ab) * x0) / np.sqrt(1 - ab)
        x = ddim_step(schedule, x, oracle, int(t), int(t_prev), clamp=False)
    assert np.max(np.abs(x - x0)) < 1e-6


def test_cfg_combine_and_clip_guidance():
    u, c = np.zeros(4), np.ones(4)
    np.testing.assert_array_equal(cfg_combine(u, c, 1.0), c)
    np.testing.assert_array_equal(cfg_combine(u, c, 0.0), u)
    np.testing.assert_allclose(cfg_combine(u, c, 7.5), 7.5)
    assert clip_guidance(5.0, 1.5) == 6.5
    assert clip_guidance(11.5, 2.0) == 12.0
    assert clip_guidance(2.0, -2.0) == 1.0


def test_dataset_is_deterministic_and_balanced(dataset):
    again = gen_dataset(seed=11, n_per_class=20)
    np.testing.assert_array_equal(dataset.images, again.images)
    np.testing.assert_array_equal(dataset.is_test, again.is_test)
    assert dataset.images.shape == (80, 16, 16)
    assert dataset.class_counts() == {name: 20 for name in CLASS_NAMES}
    assert dataset.images.min() >= -1.0 and dataset.images.max() <= 1.0
    for c in range(4):
        assert np.sum(dataset.is_test & (dataset.labels == c)) == 4


def test_disk_is_brighter_than_cross():
    data = gen_dataset(seed=3, n_per_class=50)
    disk = data.images[data.labels == CLASS_NAMES.index("disk")].mean()
    cross = data.images[data.labels == CLASS_NAMES.index("cross")].mean()
    assert disk > cross


def test_time_embedding_shape():
    emb = time_embedding(np.array([1, 50, 200]), 16)
    assert emb.shape == (3, 16)
    np.testing.assert_allclose(emb[:, 0], np.sin([1, 50, 200]))
    np.testing.assert_allclose(emb[:, 8], np.cos([1, 50, 200]))


def test_denoiser_output_shape(rng):
    denoiser = Denoiser.create(DenoiserConfig(hidden=[32]), rng)
    assert denoiser.predict(rng.normal(size=256), 10, 2).shape == (256,)
    assert denoiser.predict(rng.normal(size=(3, 256)), 10, [0, 1, 4]).shape == (3, 256)
    uncond, cond = denoiser.predict_pair(rng.normal(size=256), 10, 1)
    assert uncond.shape == cond.shape == (256,)
    assert denoiser.null_label == 4
    assert len({row.tobytes() for row in denoiser.class_embedding}) == 5


def test_denoiser_training_is_reproducible(dataset):
    config = DenoiserConfig(hidden=[32], epochs=3, batch_size=16)
    schedule = NoiseSchedule.linear(t_train=20, t_sample=5)
    a, hist_a = train_denoiser(dataset, schedule, config, np.random.default_rng(5), progress=False)
    b, hist_b = train_denoiser(dataset, schedule, config, np.random.default_rng(5), progress=False)
    assert len(hist_a.losses) == 3
    assert hist_a.final_loss == pytest.approx(hist_b.final_loss, abs=1e-9)
    val_a = denoiser_loss(a, schedule, dataset.test_images, dataset.test_labels, seed=1)
    val_b = denoiser_loss(b, schedule, dataset.test_images, dataset.test_labels, seed=1)
    assert val_a == val_b


def test_unconditional_training_ties_class_rows(dataset, rng):
    config = DenoiserConfig(hidden=[16], epochs=2, batch_size=16, p_uncond=1.0)
    schedule = NoiseSchedule.linear(t_train=20, t_sample=5)
    denoiser, _ = train_denoiser(dataset, schedule, config, np.random.default_rng(2), progress=False)
    x = rng.normal(size=256)
    for label in range(4):
        uncond, cond = denoiser.predict_pair(x, 7, label)
        np.testing.assert_allclose(cond, uncond, atol=1e-12)


def test_classifier_probabilities(rng, dataset):
    clf = ProxyClassifier.create(ClassifierConfig(hidden=8), rng)
    probs = classify(clf, dataset.images[0])
    assert probs.shape == (4,)
    assert abs(probs.sum() - 1.0) < 1e-9
    assert np.all(probs >= 0)
    np.testing.assert_array_equal(probs, classify(clf, dataset.images[0]))
    batch = clf.probabilities(dataset.images[:5])
    np.testing.assert_allclose(batch.sum(axis=1), 1.0, atol=1e-9)
    assert len(clf.hidden_activations(dataset.images[0])) == 1


def test_classifier_learns_shapes():
    data = gen_dataset(seed=4, n_per_class=60)
    clf, history, accuracy = train_classifier(
        data, ClassifierConfig(hidden=32, epochs=40, lr=3e-3), np.random.default_rng(0), progress=False
    )
    assert history.losses[-1] < history.losses[0]
    assert accuracy >= 0.8
    assert accuracy == classifier_accuracy(clf, data.test_images, data.test_labels)


def test_build_state_examples():
    np.testing.assert_array_equal(build_state(0, 50, np.zeros(256), np.zeros(256), 0.0, 0.0), np.zeros(6))
    ones = np.ones(256)
    state = build_state(10, 50, ones, ones, 0.5, 0.9)
    assert state[1] == pytest.approx(1.0)
    assert state[3] == pytest.approx(1.0)
    np.testing.assert_allclose(state[[0, 4, 5]], [0.2, 0.5, 0.9])


def test_ddim_sample_fixed_guidance(rng):
    denoiser = Denoiser.create(DenoiserConfig(hidden=[16]), rng)
    schedule = NoiseSchedule.linear(t_train=20, t_sample=5)
    out = ddim_sample(denoiser, schedule, [0, 1, 2], 5.0, rng.standard_normal((3, 256)))
    assert out.shape == (3, 256)
    assert np.all(np.isfinite(out))


@pytest.mark.slow
def test_fixed_guidance_samples_are_recognizable():
    data = gen_dataset(seed=0, n_per_class=250)
    schedule = NoiseSchedule.linear()
    rng = np.random.default_rng(0)
    denoiser, history = train_denoiser(data, schedule, DenoiserConfig(), rng, progress=False)
    assert history.final_loss <= 0.5 * history.losses[0]
    clf, _, accuracy = train_classifier(data, ClassifierConfig(), rng, progress=False)
    assert accuracy >= 0.95

    labels = np.arange(200) % 4
    samples = ddim_sample(denoiser, schedule, labels, 5.0, rng.standard_normal((200, 256)))
    assert classifier_accuracy(clf, samples, labels) >= 0.7
