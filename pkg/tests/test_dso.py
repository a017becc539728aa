import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from supertokens import autodiff as ad
from supertokens.autodiff import Tape, Tensor
from supertokens.dso import (SuperTokenBank, cam_from_logits, compute_cam, dso_forward,
                             group_average, similarity)


def argmax_oracle(row):
    best = 0
    for j in range(1, len(row)):
        if row[j] > row[best]:
            best = j
    return best


def loop_group_average(assign, values, s):
    out = np.zeros((s, values.shape[1]))
    for j in range(s):
        rows = [values[i] for i in range(len(assign)) if assign[i] == j]
        if rows:
            out[j] = sum(rows) / len(rows)
    return out


def test_single_supertoken_is_all_ones():
    rng = np.random.default_rng(0)
    cam, _ = compute_cam(Tensor(rng.normal(size=(7, 4))), SuperTokenBank(1, 4, rng))
    assert np.array_equal(cam.data, np.ones((7, 1)))


def test_tie_goes_to_lowest_index():
    cam = cam_from_logits(Tensor([[2.0, 1.0], [0.0, 5.0], [3.0, 3.0]]), "eval")
    assert list(cam.data.argmax(1)) == [0, 1, 0]


def test_small_tau_soft_converges_to_hard():
    logits = Tensor([[0.3, 0.1, -0.2], [0.0, 0.5, 0.49]])
    soft = cam_from_logits(logits, "train", tau=1e-3, noise=0.0, assign="softmax").data
    assert np.allclose(soft, [[1, 0, 0], [0, 1, 0]], atol=1e-4)


@given(st.integers(0, 10**6), st.sampled_from(["train", "eval"]))
def test_cam_rows_one_hot(seed, mode):
    rng = np.random.default_rng(seed)
    c, s, d = rng.integers(1, 33), rng.integers(1, 9), rng.integers(1, 33)
    cam, logits = compute_cam(Tensor(rng.normal(size=(c, d))), SuperTokenBank(s, d, rng), mode,
                              rng=rng)
    assert set(np.unique(cam.data)) <= {0.0, 1.0}
    assert np.array_equal(cam.data.sum(1), np.ones(c))
    assert cam.data.sum() == c
    if mode == "eval":
        assert list(cam.data.argmax(1)) == [argmax_oracle(r) for r in logits.data]


@given(st.integers(0, 10**6))
def test_eval_cam_invariant_to_tau(seed):
    logits = Tensor(np.random.default_rng(seed).normal(size=(10, 4)))
    assert np.array_equal(cam_from_logits(logits, "eval", tau=0.1).data,
                          cam_from_logits(logits, "eval", tau=7.0).data)


def test_train_mode_deterministic_given_seed():
    logits = Tensor(np.random.default_rng(1).normal(size=(10, 4)))
    a = cam_from_logits(logits, "train", rng=np.random.default_rng(5)).data
    b = cam_from_logits(logits, "train", rng=np.random.default_rng(5)).data
    assert np.array_equal(a, b)


def test_train_without_rng_raises():
    with pytest.raises(ValueError):
        cam_from_logits(Tensor(np.zeros((2, 2))), "train")


def test_group_average_examples():
    v = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    cam = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    assert np.array_equal(group_average(Tensor(cam), Tensor(v)).data, [[3.0, 4.0], [3.0, 4.0]])
    assert np.allclose(group_average(Tensor(np.ones((3, 1))), Tensor(v)).data, [v.mean(0)])
    empty = np.array([[1.0, 0.0, 0.0]] * 3)
    assert not group_average(Tensor(empty), Tensor(v)).data[1:].any()


@given(st.integers(0, 10**6))
def test_group_average_matches_loop(seed):
    rng = np.random.default_rng(seed)
    c, s, d = rng.integers(1, 33), rng.integers(1, 9), rng.integers(1, 33)
    # draw from a subset of the SuperTokens so some groups are always empty
    assign = rng.integers(0, max(1, s - 1), size=c)
    cam = (assign[:, None] == np.arange(s)).astype(float)
    v = rng.normal(size=(c, d))
    got = group_average(Tensor(cam), Tensor(v)).data
    assert np.abs(got - loop_group_average(assign, v, s)).max() <= 1e-12


def _bank(s, d, seed=0):
    return SuperTokenBank(s, d, np.random.default_rng(seed))


def test_zero_positions_give_content_only():
    bank = _bank(3, 4)
    t = Tensor(np.random.default_rng(1).normal(size=(6, 4)))
    out = dso_forward(t, Tensor(np.zeros((6, 4))), bank)
    p = bank.params
    content = group_average(out.cam, t @ p["v.w"]) @ p["o.w"] + p["o.b"]
    assert np.allclose(out.supertokens.data, content.data, atol=1e-15)


def test_permutation_grouping():
    c = d = 4
    bank = _bank(c, d, seed=2)
    p = bank.params
    p["S"].data[:] = np.eye(c)
    p["q.w"].data[:] = np.eye(d)
    p["k.w"].data[:] = np.eye(d)
    perm = np.array([2, 0, 3, 1])
    tokens = np.eye(c)[perm] * 5.0       # token i points at SuperToken perm[i]
    pos = np.random.default_rng(3).normal(size=(c, d))
    out = dso_forward(Tensor(tokens), Tensor(pos), bank)
    assert list(out.cam.data.argmax(1)) == list(perm)
    v = tokens @ p["v.w"].data @ p["o.w"].data + p["o.b"].data
    inv = np.argsort(perm)
    assert np.allclose(out.supertokens.data, v[inv] + pos[inv], atol=1e-13)


def test_identical_tokens_share_one_supertoken():
    bank = _bank(4, 6, seed=4)
    t = np.tile(np.random.default_rng(5).normal(size=(1, 6)), (5, 1))
    out = dso_forward(Tensor(t), Tensor(np.zeros_like(t)), bank)
    assert len(set(out.cam.data.argmax(1))) == 1


def test_similarity_is_scaled_dot_product():
    bank = _bank(3, 4, seed=6)
    t = np.random.default_rng(6).normal(size=(5, 4))
    p = {k: v.data for k, v in bank.params.items()}
    expect = (t @ p["k.w"]) @ (p["S"] @ p["q.w"]).T / 2.0
    assert np.allclose(similarity(Tensor(t), bank).data, expect, atol=1e-15)


def test_no_qkv_bias_by_default():
    assert not any(k.endswith(".b") and k[0] in "qkv" for k in _bank(2, 4).params)
    assert "q.b" in SuperTokenBank(2, 4, np.random.default_rng(0), qkv_bias=True).params


def test_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        dso_forward(Tensor(np.ones((3, 4))), Tensor(np.ones((2, 4))), _bank(2, 4))


def test_supertokens_receive_gradient_through_queries():
    bank = _bank(2, 4, seed=7)
    t = Tensor(np.random.default_rng(7).normal(size=(6, 4)))
    with Tape() as tape:
        out = dso_forward(t, Tensor(np.zeros((6, 4))), bank, "train", noise=0.0)
        loss = ad.sum(out.supertokens * out.supertokens)
    tape.backward(loss)
    assert np.abs(bank.params["S"].grad).sum() > 0


def test_straight_through_gradient_matches_soft_surrogate():
    rng = np.random.default_rng(8)
    bank = _bank(3, 4, seed=8)
    t = Tensor(rng.normal(size=(5, 4)))
    target = Tensor(rng.normal(size=(3, 4)))

    def soft(x):
        return ad.smooth_l1(dso_forward(x, Tensor(np.zeros((5, 4))), bank, "eval",
                                        assign="softmax").supertokens, target)

    assert ad.check_gradients(soft, t, tol=1e-4).ok
    # hard forward, soft backward: the tape gradient is the surrogate's at the hard point
    x = Tensor(t.data.copy(), requires_grad=True)
    with Tape() as tape:
        logits = similarity(x, bank)
        cam = cam_from_logits(logits, "train", noise=0.0)
        assert np.array_equal(cam.data, cam_from_logits(logits, "eval").data)
        loss = ad.sum(cam * Tensor(rng.normal(size=(5, 3))))
    tape.backward(loss)
    assert np.isfinite(x.grad).all() and np.abs(x.grad).sum() > 0
