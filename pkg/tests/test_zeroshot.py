import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from pointdenoise.geometry import InvalidInputError
from pointdenoise.model import ConfigError
from pointdenoise.teacher import make_table, mock_teacher
from pointdenoise.zeroshot import (
    InferenceConfig,
    PathNoise,
    ZeroShotClassifier,
    averaged_features,
    classify,
    draw_noise,
    infer_feature,
    path_features,
    predict_logits,
    rank,
    zero_shot_logits,
)

from conftest import perturb_zero_init, tiny_model

CLASSES = ["sphere", "cube", "torus"]


@pytest.fixture(scope="module")
def model():
    return perturb_zero_init(tiny_model(G=8, K=8, teacher_dim=16), seed=2).eval()


@pytest.fixture(scope="module")
def text():
    return mock_teacher(CLASSES, 16, 0)[1]


@pytest.fixture
def clouds(rng):
    return torch.as_tensor(rng.normal(size=(2, 64, 3)), dtype=torch.float32)


def test_single_path_equals_one_forward(model, clouds, rng):
    noise = draw_noise(rng, 2, 1, 64, 2, 16)
    one = path_features(model, clouds, 300, noise)[:, 0]
    avg = averaged_features(model, clouds, InferenceConfig(n_paths=1, t=300), noise)
    torch.testing.assert_close(avg, one, rtol=0, atol=1e-6)


def test_identical_paths_at_t0(model, clouds, rng):
    noise = draw_noise(rng, 2, 5, 64, 2, 16)
    noise.eps2[:] = noise.eps2[:, :1]
    feats = path_features(model, clouds, 0, noise)
    for j in range(1, 5):
        assert torch.equal(feats[:, j], feats[:, 0])
    avg = averaged_features(model, clouds, InferenceConfig(n_paths=5, t=0, renormalize=False), noise)
    torch.testing.assert_close(avg, feats[:, 0])


def test_paths_use_independent_noise(model, clouds, rng):
    feats = path_features(model, clouds, 600, draw_noise(rng, 2, 3, 64, 2, 16))
    assert not torch.allclose(feats[:, 0], feats[:, 1])


def test_outputs_unit_norm(model, clouds, rng):
    cfg = InferenceConfig(n_paths=4, t=200)
    avg = averaged_features(model, clouds, cfg, draw_noise(rng, 2, 4, 64, 2, 16))
    torch.testing.assert_close(avg.norm(dim=-1), torch.ones(2, 2), rtol=0, atol=1e-6)
    raw = averaged_features(model, clouds, InferenceConfig(n_paths=4, t=200, renormalize=False),
                            draw_noise(rng, 2, 4, 64, 2, 16))
    assert (raw.norm(dim=-1) <= 1 + 1e-6).all()


@given(st.floats(0.01, 1000))
def test_argmax_invariant_to_scale(scale):
    model = perturb_zero_init(tiny_model(G=8, K=8, teacher_dim=16), seed=2).eval()
    text = mock_teacher(CLASSES, 16, 0)[1].matrix()
    x = torch.as_tensor(np.random.default_rng(0).normal(size=(3, 64, 3)), dtype=torch.float32)
    noise = draw_noise(np.random.default_rng(1), 3, 2, 64, 2, 16)
    with torch.no_grad():
        base = zero_shot_logits(model, x, text, InferenceConfig(n_paths=2, logit_scale=1.0), noise)
        scaled = zero_shot_logits(model, x, text, InferenceConfig(n_paths=2, logit_scale=scale), noise)
    assert torch.equal(base.argmax(1), scaled.argmax(1))


def test_single_label(model, rng):
    table = make_table(["only"], [np.eye(16)[0]], "text")
    out = classify(model, rng.normal(size=(64, 3)), table, InferenceConfig(n_paths=2), rng)
    assert out[0][0] == "only" and out[0][2] == 1.0


def test_rank_order_and_ties():
    out = rank([1.0, 3.0, 3.0], ["a", "b", "c"])
    assert [n for n, _, _ in out] == ["b", "c", "a"]
    assert sum(p for _, _, p in out) == pytest.approx(1.0)


def test_ensemble_weights(model, clouds, text, rng):
    noise = draw_noise(rng, 2, 2, 64, 2, 16)
    w = [0.3, 0.7]
    with torch.no_grad():
        feats = averaged_features(model, clouds, InferenceConfig(n_paths=2), noise)
        logits = zero_shot_logits(model, clouds, text.matrix(), InferenceConfig(n_paths=2, ensemble_weights=w), noise)
    T = torch.from_numpy(np.array(text.matrix()))
    ref = 100.0 * (0.3 * feats[:, 0] @ T.T + 0.7 * feats[:, 1] @ T.T)
    torch.testing.assert_close(logits, ref, rtol=1e-5, atol=1e-4)
    # one-hot weights give the single-type classifier
    with torch.no_grad():
        only_text = zero_shot_logits(model, clouds, text.matrix(), InferenceConfig(n_paths=2, ensemble_weights=[0, 1]), noise)
    torch.testing.assert_close(only_text, 100.0 * feats[:, 1] @ T.T, rtol=1e-5, atol=1e-4)


def test_feature_space_ensemble(model, clouds, text, rng):
    noise = draw_noise(rng, 2, 2, 64, 2, 16)
    cfg = InferenceConfig(n_paths=2, feature_space_ensemble=True)
    with torch.no_grad():
        logits = zero_shot_logits(model, clouds, text.matrix(), cfg, noise)
    assert logits.abs().max() <= 100.0 + 1e-4


@pytest.mark.parametrize("weights", [[1.0], [0.5, 0.6], [-0.5, 1.5]])
def test_bad_weights(weights):
    with pytest.raises(InvalidInputError):
        InferenceConfig(ensemble_weights=weights).weights(2)


def test_table_width_checked(model):
    with pytest.raises(ConfigError):
        ZeroShotClassifier(model, make_table(["a", "b"], np.eye(2), "text"))


def test_infer_feature(model, rng):
    cloud = rng.normal(size=(64, 3))
    f = infer_feature(model, cloud, InferenceConfig(n_paths=3), 1, rng)
    assert f.shape == (16,) and np.linalg.norm(f) == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(InvalidInputError):
        infer_feature(model, cloud, InferenceConfig(), 2, rng)


def test_predict_deterministic_under_seed(model, text, rng):
    x = rng.normal(size=(5, 64, 3))
    cfg = InferenceConfig(n_paths=2)
    a = predict_logits(model, x, text.matrix(), cfg, np.random.default_rng(4), chunk=2)
    b = predict_logits(model, x, text.matrix(), cfg, np.random.default_rng(4), chunk=2)
    assert a.tobytes() == b.tobytes()


def test_noise_shape_checked(model, clouds):
    bad = PathNoise(np.zeros((2, 1, 10, 3)), np.zeros((2, 1, 2, 16)))
    with pytest.raises(ConfigError):
        path_features(model, clouds, 0, bad)


def test_classifier_gradient_reaches_input(model, clouds, text, rng):
    clf = ZeroShotClassifier(model, text, InferenceConfig(n_paths=2, t=100))
    x = clouds.clone().requires_grad_(True)
    clf.logits(x, clf.draw(rng, 2, 64))[:, 0].sum().backward()
    assert x.grad is not None and x.grad.abs().sum() > 0
    assert clf.with_paths(5).cfg.n_paths == 5 and clf.cfg.n_paths == 2
