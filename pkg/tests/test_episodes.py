import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pgada.core import DomainError, RngStream, ShapeError
from pgada.diffnet import ModelStack
from pgada.episodes import (
    AffineShift,
    Episode,
    EvalConfig,
    FeatureNormalizer,
    MatchingClassifier,
    PrototypeClassifier,
    ShiftSpec,
    evaluate_episode,
    gen_task,
    matching_classify,
    normalize_features,
    proto_classify,
)


@pytest.mark.parametrize("k,q", [(1, 8), (5, 16)])
def test_episode_shapes(k, q):
    ep = gen_task(5, k, q, 16, rng=RngStream(0))
    assert ep.support_x.shape == (5 * k, 16)
    assert ep.query_x.shape == (5 * q, 16)
    assert np.array_equal(np.bincount(ep.support_y), [k] * 5)
    assert np.array_equal(np.bincount(ep.query_y), [q] * 5)


@given(st.integers(2, 6), st.integers(1, 4), st.integers(1, 5), st.integers(1, 6),
       st.integers(0, 2**32))
def test_label_balance(n, k, q, p, seed):
    ep = gen_task(n, k, q, p, rng=seed)
    assert np.array_equal(np.bincount(ep.support_y, minlength=n), [k] * n)
    assert np.array_equal(np.bincount(ep.query_y, minlength=n), [q] * n)


def test_invalid_counts():
    for args in [(1, 1, 1, 2), (2, 0, 1, 2), (2, 1, 0, 2), (2, 1, 1, 0)]:
        with pytest.raises(DomainError):
            gen_task(*args)
    with pytest.raises(DomainError):
        gen_task(2, 1, 1, 2, class_sep=0.0)
    with pytest.raises(DomainError):
        ShiftSpec(support_noise=-0.1)
    with pytest.raises(DomainError):
        AffineShift(scale=[1.0, 0.0])


def test_separated_clusters_classify_perfectly():
    ep = gen_task(5, 1, 8, 16, class_sep=100.0, rng=RngStream(4))
    pred, _ = proto_classify(ep.support_x, ep.support_y, ep.query_x)
    assert np.array_equal(pred, ep.query_y)


def test_same_seed_same_episode():
    a = gen_task(5, 2, 3, 4, shift=ShiftSpec(0.3, 0.1), rng=RngStream(8, 2))
    b = gen_task(5, 2, 3, 4, shift=ShiftSpec(0.3, 0.1), rng=RngStream(8, 2))
    assert a.to_dict() == b.to_dict()


def test_episode_json_round_trip(tmp_path):
    shift = ShiftSpec(0.2, 0.4, AffineShift(scale=[1.0, 2.0, 1.0]), AffineShift(offset=1.5, rotation=0.3))
    ep = gen_task(3, 2, 2, 3, shift=shift, rng=RngStream(1))
    ep.save(tmp_path / "ep.json")
    back = Episode.load(tmp_path / "ep.json")
    assert np.array_equal(back.support_x, ep.support_x)
    assert np.array_equal(back.query_y, ep.query_y)
    assert back.shift.to_dict() == shift.to_dict()


def test_affine_shift_rotation_preserves_norm():
    x = np.random.default_rng(0).normal(size=(5, 4))
    out = AffineShift(rotation=0.7).apply(x)
    assert np.allclose(np.linalg.norm(out, axis=1), np.linalg.norm(x, axis=1))
    assert AffineShift().is_identity


def test_clean_support_and_query_share_means():
    t = []
    for i in range(1000):
        ep = gen_task(2, 3, 3, 2, rng=RngStream(77, i))
        t.append(ep.support_x[ep.support_y == 0, 0].mean() - ep.query_x[ep.query_y == 0, 0].mean())
    t = np.asarray(t)
    stat = t.mean() / (t.std(ddof=1) / np.sqrt(t.size))
    assert abs(stat) < 4


def test_proto_examples():
    s = np.array([[0.0, 0.0], [10.0, 10.0]])
    pred, _ = proto_classify(s, [0, 1], [[1.0, 1.0]])
    assert pred.tolist() == [0]
    pred, prob = proto_classify(np.array([[0.0, 0], [2, 2], [9, 9]]), [0, 0, 1], [[1.0, 1.0]])
    assert pred.tolist() == [0]
    _, prob = proto_classify(s, [0, 1], [[5.0, 5.0]])
    assert np.allclose(prob, [[0.5, 0.5]])
    pred, _ = proto_classify(s, [0, 1], [[5.0, 5.0]])
    assert pred.tolist() == [0]
    with pytest.raises(DomainError):
        proto_classify(s, [0, 2], [[1.0, 1.0]])


def test_matching_examples():
    s = np.array([[1.0, 0.0], [0.0, 1.0]])
    pred, _ = matching_classify(s, [0, 1], [[0.0, 3.0]])
    assert pred.tolist() == [1]
    _, prob = matching_classify(np.ones((3, 2)), [0, 1, 2], [[1.0, -2.0]])
    assert np.allclose(prob, 1 / 3)
    s = np.random.default_rng(0).normal(size=(4, 3))
    pred, _ = matching_classify(s, [0, 1, 2, 3], s[2:3])
    assert pred.tolist() == [2]
    with pytest.raises(DomainError):
        matching_classify(s, [0, 1, 2, 3], np.zeros((1, 3)))


def _instance(data):
    n_cls = data.draw(st.integers(2, 4))
    d = data.draw(st.integers(2, 4))
    y = np.arange(n_cls).repeat(2)
    el = st.floats(-5, 5, allow_nan=False)
    s = data.draw(arrays(np.float64, (y.size, d), elements=el))
    q = data.draw(arrays(np.float64, (5, d), elements=el))
    return s, y, q


@given(st.data())
def test_proto_rigid_invariance(data):
    s, y, q = _instance(data)
    d = s.shape[1]
    rot, _ = np.linalg.qr(np.random.default_rng(data.draw(st.integers(0, 99))).normal(size=(d, d)))
    shift = np.arange(d, dtype=float)
    pred, prob = proto_classify(s, y, q)
    pred2, _ = proto_classify(s @ rot + shift, y, q @ rot + shift)
    top2 = np.sort(prob, axis=1)[:, -2:]
    clear = top2[:, 1] - top2[:, 0] > 1e-9
    assert np.array_equal(pred[clear], pred2[clear])
    assert np.allclose(prob.sum(1), 1.0, atol=1e-9)


@given(st.data())
def test_matching_row_scale_invariance(data):
    s, y, q = _instance(data)
    s = s + np.sign(s) * 0.1 + (s == 0) * 0.1
    q = q + np.sign(q) * 0.1 + (q == 0) * 0.1
    scales_s = data.draw(arrays(np.float64, (s.shape[0], 1), elements=st.floats(0.1, 10)))
    scales_q = data.draw(arrays(np.float64, (q.shape[0], 1), elements=st.floats(0.1, 10)))
    pred, prob = matching_classify(s, y, q)
    pred2, prob2 = matching_classify(s * scales_s, y, q * scales_q)
    assert np.allclose(prob, prob2, atol=1e-9)
    assert np.allclose(prob.sum(1), 1.0, atol=1e-9)


def test_normalize_modes():
    gen = np.random.default_rng(0)
    s, q = gen.normal(2, 3, (5, 4)), gen.normal(-1, 2, (7, 4))
    a, b = normalize_features(s, q, "none")
    assert np.array_equal(a, s) and np.array_equal(b, q)
    a, b = normalize_features(s, q, "transductive")
    pooled = np.vstack([a, b])
    assert np.allclose(pooled.mean(0), 0, atol=1e-9)
    assert np.allclose(pooled.var(0), 1, atol=1e-6)
    s[:, 1] = 3.0
    a, b = normalize_features(s, q, "conventional")
    assert np.all(np.isfinite(a)) and np.all(np.isfinite(b))
    assert np.allclose(a[:, 1], 0.0)


def test_evaluate_clean_separated_without_ot():
    ep = gen_task(5, 1, 8, 16, class_sep=100.0, rng=RngStream(2))
    acc, diag = evaluate_episode(ep, None, EvalConfig(use_ot=False))
    assert acc == 1.0
    assert "transport_cost" not in diag


def test_evaluate_reports_transport_diagnostics():
    ep = gen_task(5, 1, 8, 16, rng=RngStream(3))
    acc, diag = evaluate_episode(ep, None, EvalConfig())
    assert 0.0 <= acc <= 1.0
    for k in ("transport_cost", "marginal_violation", "plan_entropy"):
        assert k in diag
    assert diag["marginal_violation"] < 1e-9


def test_ot_does_not_hurt_when_distributions_match():
    # the barycentric map moves each support row onto query rows, which denoises
    # prototypes, so transport helps here rather than acting as the identity
    ot, plain = [], []
    for i in range(100):
        ep = gen_task(5, 5, 16, 16, rng=RngStream(31, i))
        ot.append(evaluate_episode(ep, None, EvalConfig(beta=0.999))[0])
        plain.append(evaluate_episode(ep, None, EvalConfig(use_ot=False))[0])
    assert np.mean(ot) >= np.mean(plain) - 0.02


def test_ot_helps_under_query_offset_with_frozen_random_embedding():
    model = ModelStack.init(16, 8, 5, rng=RngStream(0))
    shift = ShiftSpec(query_transform=AffineShift(offset=2.0))
    ot, plain = [], []
    for i in range(200):
        ep = gen_task(5, 1, 8, 16, shift=shift, rng=RngStream(41, i))
        ot.append(evaluate_episode(ep, model, EvalConfig(normalization="conventional"))[0])
        plain.append(evaluate_episode(ep, model, EvalConfig(use_ot=False,
                                                            normalization="conventional"))[0])
    assert np.mean(ot) > np.mean(plain)


def test_eval_config_validation():
    with pytest.raises(Exception):
        EvalConfig(classifier="knn")
    with pytest.raises(DomainError):
        EvalConfig(beta=1.0)
    EvalConfig(use_ot=False, beta=1.0)


def test_classifier_estimators():
    ep = gen_task(4, 3, 5, 6, class_sep=20.0, rng=RngStream(5))
    for est in (PrototypeClassifier(), MatchingClassifier()):
        est.fit(ep.support_x, ep.support_y)
        assert est.predict_proba(ep.query_x).shape == (20, 4)
        assert est.score(ep.query_x, ep.query_y) == 1.0
        assert est.get_params() == {}
    norm = FeatureNormalizer(mode="conventional").fit(ep.support_x)
    out = norm.transform(ep.support_x)
    assert np.allclose(out.mean(0), 0, atol=1e-9)
    assert FeatureNormalizer().get_params() == {"mode": "transductive"}
    with pytest.raises(ValueError):
        PrototypeClassifier().fit(ep.support_x, ep.support_y[:-1])
