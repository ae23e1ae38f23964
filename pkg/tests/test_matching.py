import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsar import tensor as T
from fsar.attention import Prototype
from fsar.errors import ConfigError, ContractError, DimensionError
from fsar.matching import (MatchConfig, bi_mhm, class_prototype_average, classify, cosine_sim,
                           global_local_score)
from fsar.tensor import Tensor
from oracles import bi_mhm_loops, cos_scalar


def proto(rng, t=4, c=6):
    return Prototype(Tensor(rng.standard_normal(c)), Tensor(rng.standard_normal((t, c))))


def test_bi_mhm_matches_double_loop_on_1000_pairs():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        a, b = rng.standard_normal((4, 8)), rng.standard_normal((4, 8))
        worst = max(worst, abs(bi_mhm(Tensor(a), Tensor(b)).item() - bi_mhm_loops(a, b)))
    assert worst < 1e-12


def test_bi_mhm_identical_is_zero_and_maximal():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((4, 5))
    assert bi_mhm(Tensor(a), Tensor(a)).item() == pytest.approx(0.0, abs=1e-15)
    assert bi_mhm(Tensor(a), Tensor(rng.standard_normal((4, 5)))).item() < 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_bi_mhm_symmetric_bounded_and_order_free(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    ab = bi_mhm(Tensor(a), Tensor(b)).item()
    assert ab == pytest.approx(bi_mhm(Tensor(b), Tensor(a)).item(), abs=1e-15)
    assert -2.0 <= ab <= 0.0
    perm = rng.permutation(4)
    assert bi_mhm(Tensor(a), Tensor(b[perm])).item() == pytest.approx(ab, abs=1e-15)


def test_bi_mhm_zero_when_every_frame_has_a_partner():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((4, 5))
    # b reuses a's frames (rescaled, reordered, one repeated)
    b = np.stack([2 * a[3], a[0], 0.5 * a[1], a[2]])
    assert bi_mhm(Tensor(a), Tensor(b)).item() == pytest.approx(0.0, abs=1e-14)


def test_bi_mhm_length_mismatch():
    with pytest.raises(DimensionError):
        bi_mhm(Tensor(np.ones((4, 3))), Tensor(np.ones((3, 3))))


def test_bi_mhm_zero_frame_is_finite():
    a = np.zeros((4, 3))
    out = bi_mhm(Tensor(a), Tensor(np.ones((4, 3)))).item()
    assert np.isfinite(out) and out == pytest.approx(-1.0)


def test_cosine_examples():
    u = Tensor(np.array([1.0, -2.0, 3.0]))
    v = Tensor(np.array([0.5, 4.0, 1.0]))
    assert cosine_sim(u, u).item() == pytest.approx(1.0, abs=1e-15)
    assert cosine_sim(u, T.mul(u, -1.0)).item() == pytest.approx(-1.0, abs=1e-15)
    assert cosine_sim(T.mul(u, 7.5), v).item() == pytest.approx(cosine_sim(u, v).item(), abs=1e-15)
    assert cosine_sim(Tensor(np.zeros(3)), v).item() == 0.0


def test_identical_prototypes_score_one():
    p = proto(np.random.default_rng(3))
    assert global_local_score(p, p).item() == pytest.approx(1.0, abs=1e-14)


def test_score_is_sum_of_oracles():
    rng = np.random.default_rng(4)
    for _ in range(50):
        s, q = proto(rng), proto(rng)
        want = bi_mhm_loops(s.locals.data, q.locals.data) + cos_scalar(s.token.data, q.token.data)
        assert abs(global_local_score(s, q).item() - want) < 1e-12
        local = global_local_score(s, q, MatchConfig(w_global=0.0)).item()
        assert abs(local - bi_mhm_loops(s.locals.data, q.locals.data)) < 1e-12


def test_weights_and_reserved_metric():
    rng = np.random.default_rng(5)
    s, q = proto(rng), proto(rng)
    both = global_local_score(s, q, MatchConfig(w_local=2.0, w_global=0.5)).item()
    want = 2 * bi_mhm_loops(s.locals.data, q.locals.data) + 0.5 * cos_scalar(s.token.data, q.token.data)
    assert both == pytest.approx(want, abs=1e-12)
    with pytest.raises(ConfigError):
        MatchConfig(local_metric="otam").validate()
    with pytest.raises(ConfigError):
        MatchConfig(w_local=0.0, w_global=0.0).validate()
    with pytest.raises(ConfigError):
        MatchConfig(local_metric="none", w_global=0.0).validate()


def test_prototype_average():
    rng = np.random.default_rng(6)
    p = proto(rng)
    assert class_prototype_average([p]) is p
    same = class_prototype_average([p, p])
    assert np.array_equal(same.token.data, p.token.data)
    neg = Prototype(T.mul(p.token, -1.0), p.locals)
    assert np.allclose(class_prototype_average([p, neg]).token.data, 0.0)
    with pytest.raises(ContractError):
        class_prototype_average([])


def _batched(protos):
    return Prototype(Tensor(np.stack([p.token.data for p in protos])),
                     Tensor(np.stack([p.locals.data for p in protos])))


def test_classify_picks_matching_class():
    rng = np.random.default_rng(7)
    c = 6
    basis = np.linalg.qr(rng.standard_normal((c, c)))[0]
    classes = [Prototype(Tensor(basis[i]), Tensor(np.tile(basis[i], (4, 1)))) for i in range(3)]
    scores = classify(classes[2], _batched(classes))
    assert scores.shape == (3,) and int(np.argmax(scores.data)) == 2


def test_classify_matches_scalar_reimplementation_and_permutes():
    rng = np.random.default_rng(8)
    classes = [proto(rng) for _ in range(5)]
    queries = [proto(rng) for _ in range(3)]
    scores = classify(_batched(queries), _batched(classes)).data
    for qi, q in enumerate(queries):
        for ci, s in enumerate(classes):
            want = bi_mhm_loops(s.locals.data, q.locals.data) + cos_scalar(s.token.data, q.token.data)
            assert abs(scores[qi, ci] - want) < 1e-12
    perm = rng.permutation(5)
    shuffled = classify(_batched(queries), _batched([classes[i] for i in perm])).data
    assert np.array_equal(shuffled, scores[:, perm])


def test_classify_needs_two_classes():
    rng = np.random.default_rng(9)
    with pytest.raises(ContractError):
        classify(proto(rng), _batched([proto(rng)]))


def test_support_order_invariance():
    rng = np.random.default_rng(10)
    shots = [proto(rng) for _ in range(3)]
    q = proto(rng)
    a = global_local_score(class_prototype_average(shots), q).item()
    b = global_local_score(class_prototype_average(shots[::-1]), q).item()
    assert a == pytest.approx(b, abs=1e-14)


def test_uniform_positive_scaling_keeps_argmax():
    rng = np.random.default_rng(11)
    classes = [proto(rng) for _ in range(4)]
    q = proto(rng)
    base = classify(q, _batched(classes)).data
    scaled = [Prototype(T.mul(p.token, 3.7), T.mul(p.locals, 3.7)) for p in classes]
    assert np.argmax(classify(q, _batched(scaled)).data) == np.argmax(base)


def test_global_term_is_live():
    rng = np.random.default_rng(12)
    classes, q = _batched([proto(rng) for _ in range(3)]), proto(rng)
    full = classify(q, classes).data
    local = classify(q, classes, MatchConfig(w_global=0.0)).data
    assert not np.allclose(full, local)
