import json
import math
import struct

import numpy as np
import pytest
from scipy import stats

from poolinglab import autodiff as ad
from poolinglab.autodiff import Tensor, finite_difference_check
from poolinglab.recurrent import (
    LstmParams,
    LstmState,
    bilstm_forward,
    init_params,
    load_checkpoint,
    lstm_cell_step,
    save_checkpoint,
    xavier_bound,
    zero_state,
)


def zero_params(E, H):
    z = lambda *s: Tensor(np.zeros(s), requires_grad=True)
    return LstmParams(z(E, 4 * H), z(H, 4 * H), z(4 * H), z(4 * H))


def test_high_forget_bias_sums_to_one():
    p = init_params(10, 8, "high", 0)
    H = 8
    np.testing.assert_array_equal(p.block("b_if") + p.block("b_hf"), np.ones(H))
    bx, bh = xavier_bound(10, H), xavier_bound(H, H)
    for g in "igo":
        assert np.all(np.abs(p.block(f"b_i{g}")) <= bx)
        assert np.all(np.abs(p.block(f"b_h{g}")) <= bh)
    assert np.all(np.abs(p.W_x.values) <= bx) and np.all(np.abs(p.W_h.values) <= bh)


def test_block_shapes():
    p = init_params(3, 5, "low", 0)
    assert p.block("W_if").shape == (5, 3)
    assert p.block("W_ho").shape == (5, 5)
    assert p.block("b_ig").shape == (5,)


def test_init_is_deterministic():
    a, b = init_params(6, 4, "low", 42), init_params(6, 4, "low", 42)
    for k in a.tensors():
        assert a.tensors()[k].values.tobytes() == b.tensors()[k].values.tobytes()


def test_low_forget_bias_matches_other_gates():
    # 10^4 draws of the input-side forget bias against the input-side input-gate bias
    E, H = 20, 100
    f = np.concatenate([init_params(E, H, "low", s).block("b_if") for s in range(100)])
    i = np.concatenate([init_params(E, H, "low", s).block("b_ii") for s in range(100)])
    bound = xavier_bound(E, H)
    assert f.size == 10_000
    assert np.abs(f).max() <= bound
    assert abs(f.mean()) < 4 * bound / math.sqrt(3 * f.size)
    assert f.var() == pytest.approx(bound**2 / 3, rel=0.05)
    assert stats.ks_2samp(f, i).pvalue > 1e-3


def test_cell_step_all_zero():
    p = zero_params(3, 2)
    s = lstm_cell_step(p, Tensor(np.zeros((1, 3))), zero_state(1, 2))
    np.testing.assert_array_equal(s.h.values, 0.0)
    np.testing.assert_array_equal(s.c.values, 0.0)


def test_cell_step_forget_bias_one_hand_value():
    H = 3
    p = zero_params(2, H)
    p.b_x.values[H:2 * H] = 1.0
    prev = LstmState(Tensor(np.zeros((1, H))), Tensor(np.ones((1, H))))
    s = lstm_cell_step(p, Tensor(np.zeros((1, 2))), prev)
    sig1 = 1 / (1 + math.exp(-1))
    np.testing.assert_allclose(s.c.values, sig1, rtol=1e-15)
    np.testing.assert_allclose(s.h.values, 0.5 * math.tanh(sig1), rtol=1e-15)
    assert s.h.values[0, 0] == pytest.approx(0.311856, abs=1e-6)


def test_cell_step_rejects_bad_dims():
    with pytest.raises(ValueError):
        lstm_cell_step(init_params(3, 2), Tensor(np.zeros((1, 4))), zero_state(1, 2))


def test_cell_step_gradients_finite_difference():
    rng = np.random.default_rng(0)
    p = init_params(4, 4, "low", 1, prefix="cell.")
    x = Tensor(rng.uniform(-1, 1, (2, 4)), requires_grad=True, name="x")
    h0 = Tensor(rng.uniform(-1, 1, (2, 4)), requires_grad=True, name="h0")
    c0 = Tensor(rng.uniform(-1, 1, (2, 4)), requires_grad=True, name="c0")

    def f():
        s = lstm_cell_step(p, x, LstmState(h0, c0))
        return ad.sum(s.h * s.h)

    rep = finite_difference_check(f, list(p.tensors().values()) + [x, h0, c0])
    assert rep.passed, rep.errors


def composed_bilstm(fwd, bwd, x, lengths):
    """Reference encoder from per-step primitives, one example at a time."""
    rows = []
    H = fwd.hidden_dim
    for b, L in enumerate(lengths):
        st, fw = zero_state(1, H), []
        for t in range(L):
            st = lstm_cell_step(fwd, x[b:b + 1, t], st)
            fw.append(st)
        st, bw = zero_state(1, H), [None] * L
        for t in reversed(range(L)):
            st = lstm_cell_step(bwd, x[b:b + 1, t], st)
            bw[t] = st
        rows.append([(fw[t].h, bw[t].h) for t in range(L)])
    return rows


def test_fused_encoder_matches_composed_cells():
    rng = np.random.default_rng(5)
    E, H, B, n = 3, 4, 3, 6
    fwd, bwd = init_params(E, H, "low", 1, "f."), init_params(E, H, "high", 2, "b.")
    x = Tensor(rng.uniform(-1, 1, (B, n, E)), requires_grad=True, name="x")
    lengths = [6, 4, 1]
    mask = np.arange(n)[None, :] < np.array(lengths)[:, None]
    w = rng.normal(size=(B, n, 2 * H)) * mask[:, :, None]

    out = bilstm_forward(fwd, bwd, x, mask)
    ad.backward(ad.sum(out.H * w))
    params = [x] + list(fwd.tensors().values()) + list(bwd.tensors().values())
    fused_grads = [p.grad.copy() for p in params]
    captured = out.grad_handles.hidden_grads()
    ad.zero_grad(params)

    rows = composed_bilstm(fwd, bwd, x, lengths)
    loss = 0.0
    for b, row in enumerate(rows):
        for t, (hf, hb) in enumerate(row):
            np.testing.assert_allclose(out.H.values[b, t], np.concatenate([hf.values[0], hb.values[0]]),
                                       atol=1e-14)
            loss = loss + ad.sum(hf * w[b:b + 1, t, :H]) + ad.sum(hb * w[b:b + 1, t, H:])
    ad.backward(loss)
    for p, g in zip(params, fused_grads):
        np.testing.assert_allclose(g, p.grad, atol=1e-13)
    for b, row in enumerate(rows):
        for t, (hf, hb) in enumerate(row):
            np.testing.assert_allclose(captured[b, t], np.concatenate([hf.grad[0], hb.grad[0]]), atol=1e-13)


def test_fused_encoder_gradients_finite_difference():
    rng = np.random.default_rng(9)
    fwd, bwd = init_params(3, 3, "low", 3, "f."), init_params(3, 3, "low", 4, "b.")
    x = Tensor(rng.uniform(-1, 1, (2, 5, 3)), requires_grad=True, name="x")
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=bool)
    w = rng.normal(size=(2, 5, 6)) * mask[:, :, None]
    rep = finite_difference_check(lambda: ad.sum(bilstm_forward(fwd, bwd, x, mask).H * w),
                                  [x] + list(fwd.tensors().values()) + list(bwd.tensors().values()))
    assert rep.passed, rep.errors


def test_single_position():
    fwd, bwd = init_params(2, 3, "low", 0), init_params(2, 3, "high", 1)
    x = Tensor(np.array([[0.3, -0.2]]))
    out = bilstm_forward(fwd, bwd, x)
    assert out.H.shape == (1, 1, 6)
    f1 = lstm_cell_step(fwd, x, zero_state(1, 3)).h.values
    b1 = lstm_cell_step(bwd, x, zero_state(1, 3)).h.values
    np.testing.assert_allclose(out.H.values[0, 0], np.concatenate([f1[0], b1[0]]), atol=1e-15)


def test_causality_under_perturbation():
    rng = np.random.default_rng(1)
    fwd, bwd = init_params(3, 4, "high", 0), init_params(3, 4, "high", 1)
    x = rng.uniform(-1, 1, (1, 7, 3))
    k = 3
    y = x.copy()
    y[0, k] += 0.5
    a = bilstm_forward(fwd, bwd, Tensor(x)).H.values[0]
    b = bilstm_forward(fwd, bwd, Tensor(y)).H.values[0]
    H = 4
    np.testing.assert_array_equal(a[:k, :H], b[:k, :H])
    np.testing.assert_array_equal(a[k + 1:, H:], b[k + 1:, H:])
    assert np.all(np.abs(a[k:, :H] - b[k:, :H]).max(axis=1) > 0)
    assert np.all(np.abs(a[:k + 1, H:] - b[:k + 1, H:]).max(axis=1) > 0)


def test_deterministic_output_and_captures():
    rng = np.random.default_rng(2)
    fwd, bwd = init_params(3, 4, "low", 0), init_params(3, 4, "low", 1)
    x = rng.uniform(-1, 1, (2, 5, 3))
    o1, o2 = bilstm_forward(fwd, bwd, Tensor(x)), bilstm_forward(fwd, bwd, Tensor(x))
    assert o1.H.values.tobytes() == o2.H.values.tobytes()


def test_doubling_loss_doubles_captured_gradients():
    rng = np.random.default_rng(3)
    fwd, bwd = init_params(3, 4, "low", 0), init_params(3, 4, "low", 1)
    x = rng.uniform(-1, 1, (2, 6, 3))
    w = rng.normal(size=(2, 6, 8))
    o1 = bilstm_forward(fwd, bwd, Tensor(x))
    ad.backward(ad.sum(o1.H * w))
    o2 = bilstm_forward(fwd, bwd, Tensor(x))
    ad.backward(ad.sum(o2.H * w) * 2.0)
    n1 = np.linalg.norm(o1.grad_handles.hidden_grads(), axis=-1)
    n2 = np.linalg.norm(o2.grad_handles.hidden_grads(), axis=-1)
    np.testing.assert_allclose(n2, 2 * n1, rtol=1e-14)
    assert o1.grad_handles.calls == 1


def test_trailing_pads_do_not_change_valid_states():
    rng = np.random.default_rng(4)
    fwd, bwd = init_params(3, 4, "low", 0), init_params(3, 4, "low", 1)
    x = rng.uniform(-1, 1, (1, 5, 3))
    padded = np.concatenate([x, rng.uniform(-1, 1, (1, 3, 3))], axis=1)
    mask = np.array([[1] * 5 + [0] * 3], dtype=bool)
    a = bilstm_forward(fwd, bwd, Tensor(x)).H.values[0]
    b = bilstm_forward(fwd, bwd, Tensor(padded), mask).H.values[0, :5]
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_empty_sequence_rejected():
    with pytest.raises(ValueError):
        bilstm_forward(init_params(2, 2), init_params(2, 2), Tensor(np.zeros((1, 0, 2))))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=7), "c": np.array(2.5)}
    path = tmp_path / "ck.bin"
    save_checkpoint(path, tensors, {"pooling": "max"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"pooling": "max"}
    for k in tensors:
        assert loaded[k].tobytes() == tensors[k].tobytes()
    blob = path.read_bytes()
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen])
    assert [e["name"] for e in header["tensors"]] == ["a", "b", "c"]
    assert header["tensors"][1]["offset"] == 12 * 8
    assert len(blob) == 16 + hlen + (12 + 7 + 1) * 8


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(p)
