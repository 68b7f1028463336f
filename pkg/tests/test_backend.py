import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import conv2d_loops

from heinfer.backend import (
    CkksBackend,
    EvalKey,
    SecretKey,
    TfheBackend,
    dump_ciphertext,
    dump_key,
    keygen,
    load_ciphertext,
    load_key,
)
from heinfer.backend import functions as fn
from heinfer.backend.tfhe import dequantize
from heinfer.backend.wire import EVAL_MAGIC, SECRET_MAGIC
from heinfer.calibration import Interval
from heinfer.errors import BackendError, CapacityError, DepthError, FormatError, KeyMismatchError, ShapeError
from heinfer.lowering import im2col_matrix
from heinfer.params import CkksParams, KeyParams, TfheParams


def ckks_params(log2_n=13, levels=7, scale=22, shape=(1, 4)):
    return KeyParams("ckks", 128, shape, ckks=CkksParams(log2_n, (30,) + (scale,) * levels + (30,), scale))


def tfhe_params(lo=-4.0, hi=4.0, msg_bits=6, shape=(1, 4), lam=128):
    n, sn, k, sk = {80: (2048, -60, 542, -23), 128: (4096, -62, 938, -23)}[lam]
    return KeyParams("tfhe", lam, shape, tfhe=TfheParams(n, sn, k, sk, msg_bits, Interval(lo, hi)))


def ckks(seed=0, **kw):
    sk, ek = keygen(ckks_params(**kw), seed)
    return CkksBackend(sk), CkksBackend(ek)


def tfhe(seed=0, **kw):
    sk, ek = keygen(tfhe_params(**kw), seed)
    return TfheBackend(sk), TfheBackend(ek)


# ---------------------------------------------------------------- keys


def test_keygen_is_deterministic():
    p = ckks_params()
    assert keygen(p, 5)[0].key_id == keygen(p, 5)[0].key_id
    assert keygen(p, 5)[0].key_id != keygen(p, 6)[0].key_id
    sk, ek = keygen(p, 5)
    assert sk.key_id == ek.key_id
    assert keygen(p)[0].key_id != keygen(p)[0].key_id  # OS entropy


def test_eval_key_has_no_seed_and_cannot_decrypt():
    sk, ek = keygen(ckks_params(), 1)
    assert not hasattr(ek, "seed")
    ct = CkksBackend(sk).encrypt(np.ones((1, 4)))
    with pytest.raises(KeyMismatchError):
        CkksBackend(ek).decrypt(ct)
    with pytest.raises(KeyMismatchError):
        CkksBackend(ek).encrypt(np.ones((1, 4)))


def test_key_files_roundtrip_and_magic():
    sk, ek = keygen(tfhe_params(), 3)
    sb, eb = dump_key(sk), dump_key(ek)
    assert sb[:4] == SECRET_MAGIC and eb[:4] == EVAL_MAGIC
    assert SECRET_MAGIC not in eb
    assert load_key(sb) == sk and load_key(eb) == ek
    assert isinstance(load_key(eb), EvalKey) and isinstance(load_key(sb), SecretKey)
    assert sk.seed not in eb
    with pytest.raises(FormatError):
        load_key(b"XXXX" + sb[4:])
    with pytest.raises(FormatError):
        load_key(sb[:4] + b"\x09\x00" + sb[6:])
    with pytest.raises(FormatError):
        load_key(sb[:-1])


def test_foreign_ciphertext_is_rejected():
    a, _ = ckks(seed=1)
    b, _ = ckks(seed=2)
    ct = a.encrypt(np.ones((1, 4)))
    with pytest.raises(KeyMismatchError):
        b.add_ct(ct, ct)
    with pytest.raises(KeyMismatchError):
        b.decrypt(ct)


# ---------------------------------------------------------------- CKKS


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=64), st.integers(16, 40))
def test_ckks_roundtrip_tolerance(vals, scale):
    be, _ = ckks(scale=scale, levels=2, log2_n=13, shape=(len(vals),))
    x = np.array(vals)
    y = be.decrypt(be.encrypt(x))
    assert np.all(np.abs(y - x) <= 2.0 ** (-scale + 1) * np.maximum(1, np.abs(x)))


def test_ckks_slots_are_on_grid_and_zero_padded():
    be, _ = ckks()
    ct = be.encrypt(np.array([[0.1, -0.2, 0.3, 7.0]]))
    assert ct.slots.dtype == np.int64 and len(ct.slots) == 4096
    assert np.all(ct.slots[4:] == 0)
    assert ct.level == 7


def test_ckks_capacity():
    be, _ = ckks(log2_n=13)
    with pytest.raises(CapacityError):
        be.encrypt(np.zeros(20000))


def test_ckks_add_and_mul_plain():
    sk, ev = ckks()
    x = np.array([[1.5, -2.0, 3.25, 0.0]])
    ct = sk.encrypt(x)
    z = ev.add_ct(ct, ev.mul_plain(ct, -1.0))
    assert np.max(np.abs(sk.decrypt(z))) <= 2 * 2.0**-21 * 4
    one = ev.mul_plain(ct, 1.0)
    assert one.level == ct.level - 1
    np.testing.assert_allclose(sk.decrypt(one), x, atol=2.0**-21 * 4)
    assert ev.add_ct(ct, ct).level == ct.level
    assert ev.add_plain(ct, 2.0).level == ct.level


def test_ckks_level_exhaustion():
    sk, ev = ckks(levels=1)
    ct = ev.mul_plain(sk.encrypt(np.ones((1, 4))), 2.0)
    assert ct.level == 0
    with pytest.raises(DepthError):
        ev.mul_plain(ct, 1.0)
    with pytest.raises(DepthError):
        ev.mul_ct(ct, sk.encrypt(np.ones((1, 4))))
    with pytest.raises(DepthError):
        ev.linear_map(ct, np.eye(4))


def test_ckks_mul_ct_and_power_tree():
    sk, ev = ckks(shape=(1,), levels=3, scale=40)
    ct = sk.encrypt(np.array([2.0]))
    sq = ev.mul_ct(ct, ct)
    assert sk.decrypt(sq)[0] == pytest.approx(4.0, abs=1e-9)
    p = ct
    for _ in range(3):
        p = ev.square(p)
    assert ct.level - p.level == 3
    assert sk.decrypt(p)[0] == pytest.approx(256.0, rel=1e-9)


def test_ckks_linear_map():
    sk, ev = ckks(shape=(2,))
    ct = sk.encrypt(np.array([3.0, 4.0]))
    y = ev.linear_map(ct, np.array([[1.0, 1.0]]), np.array([0.0]))
    assert sk.decrypt(y)[0] == pytest.approx(7.0, abs=1e-5)
    assert y.level == ct.level - 1
    ident = ev.linear_map(ct, np.eye(2), np.zeros(2))
    np.testing.assert_allclose(sk.decrypt(ident), [3.0, 4.0], atol=2.0**-20)
    with pytest.raises(ShapeError):
        ev.linear_map(ct, np.eye(3))


def test_ckks_lenet_conv1_linear_map(fixtures):
    f = fixtures["LeNet5"]
    g = f.graph
    conv = g.nodes[0]
    w, b = g.initializers[conv.inputs[1]], g.initializers[conv.inputs[2]]
    lm = im2col_matrix((1, 32, 32), w, bias=b)
    sk, ev = ckks(log2_n=14, levels=15, scale=25, shape=(1, 1, 32, 32))
    x = f.sample_inputs(1, 0)[0]
    y = sk.decrypt(ev.linear_map(sk.encrypt(x), lm.matrix, lm.bias, (1, 6, 28, 28)))
    ref = conv2d_loops(x[0], w, b)
    # rounding of inputs, weights, bias and output on the 2^-25 grid
    ulp = 2.0**-25
    bound = ulp * (np.abs(w).sum(axis=(1, 2, 3)).max() + 25 * 1.0 + 2) + ulp
    assert np.max(np.abs(y[0] - ref)) <= bound


# ---------------------------------------------------------------- TFHE


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=1, max_size=32), st.integers(2, 10))
def test_tfhe_roundtrip_tolerance(vals, bits):
    be, _ = tfhe(msg_bits=bits, shape=(len(vals),))
    x = np.array(vals)
    y = be.decrypt(be.encrypt(x))
    assert np.all(np.abs(y - x) <= 8.0 / 2**bits)


def test_tfhe_encrypt_clamps_and_counts():
    be, _ = tfhe(shape=(3,))
    ct = be.encrypt(np.array([-10.0, 0.0, 10.0]))
    assert be.counters.clamped == 2
    np.testing.assert_allclose(be.decrypt(ct), [-4.0, 0.0, 4.0], atol=8 / 63 / 2)


def test_tfhe_flush_relu_example():
    be, _ = tfhe(shape=(64,))
    x = np.linspace(-4, 4, 64)
    ct = be.lut(be.encrypt(x), fn.relu())
    assert ct.pending == (fn.relu(),)
    out = be.flush(ct)
    assert not out.pending
    assert np.all(out.lo == 0.0) and np.all(out.hi == 4.0)
    assert np.max(np.abs(out.dequantized() - np.maximum(x, 0))) <= 8 / 2**6


def test_tfhe_lut_is_lazy_and_flush_of_empty_is_identity():
    be, _ = tfhe()
    ct = be.encrypt(np.array([[0.5, 1.0, -1.0, 2.0]]))
    before = be.counters.snapshot()
    lazy = be.lut(ct, fn.relu())
    assert be.counters.snapshot() == before
    assert be.flush(ct) is ct
    assert be.counters.flushes == before["flushes"]
    del lazy


def test_tfhe_identity_lut_single_quantization():
    be, _ = tfhe()
    ct = be.encrypt(np.array([[0.5, 1.0, -1.0, 2.0]]))
    q0 = be.counters.quantizations
    out = be.flush(be.lut(ct, fn.identity()))
    assert be.counters.quantizations == q0 + 1
    np.testing.assert_array_equal(out.q, ct.q)


def test_tfhe_decrypt_flushes_and_is_idempotent():
    be, _ = tfhe()
    x = np.array([[0.5, 1.0, -1.0, 2.0]])
    ct = be.lut(be.encrypt(x), fn.affine(2.0, 1.0))
    y1 = be.decrypt(ct)
    flushed = be.flush(ct)
    np.testing.assert_array_equal(be.decrypt(flushed), be.decrypt(flushed))
    np.testing.assert_array_equal(y1, be.decrypt(flushed))


def test_tfhe_affine_then_relu_equals_single_table():
    be, _ = tfhe(shape=(50,))
    ct = be.encrypt(np.linspace(-4, 4, 50))
    a = be.flush(be.lut(be.lut(ct, fn.affine(2.0, 1.0)), fn.relu()))
    b = be.flush(be.lut(ct, fn.compose(fn.affine(2.0, 1.0), fn.relu())))
    for f in ("q", "lo", "hi"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_tfhe_interval_arithmetic():
    be, ev = tfhe(shape=(2,))
    a = be.encrypt(np.array([1.0, -2.0]))
    s = ev.add_ct(a, a)
    assert np.all(s.lo == -8) and np.all(s.hi == 8)
    m = ev.mul_plain(a, np.array([2.0, -0.5]))
    np.testing.assert_array_equal(m.lo, [-8.0, -2.0])
    np.testing.assert_array_equal(m.hi, [8.0, 2.0])
    p = ev.add_plain(a, 1.0)
    assert np.all(p.lo == -3) and np.all(p.hi == 5)
    for ct in (s, m, p):
        v = ct.dequantized()
        assert np.all((ct.lo <= v) & (v <= ct.hi))


def test_tfhe_ops_flush_pending_first():
    be, ev = tfhe(shape=(2,))
    ct = ev.lut(be.encrypt(np.array([-1.0, 2.0])), fn.relu())
    f0 = ev.counters.flushes
    out = ev.add_plain(ct, 0.0)
    assert ev.counters.flushes == f0 + 1
    assert not out.pending
    np.testing.assert_allclose(be.decrypt(out), [0.0, 2.0], atol=0.13)


def test_tfhe_linear_map_uses_supplied_interval():
    be, ev = tfhe(shape=(2,))
    ct = be.encrypt(np.array([3.0, 0.5]))
    y = ev.linear_map(ct, np.array([[1.0, 1.0]]), np.array([0.0]), (1,), Interval(0.0, 8.0))
    assert y.lo[0] == 0.0 and y.hi[0] == 8.0
    assert be.decrypt(y)[0] == pytest.approx(3.5, abs=8 / 63)
    wc = ev.linear_map(ct, np.array([[1.0, -1.0]]), None)
    assert wc.lo[0] == -8.0 and wc.hi[0] == 8.0


def test_tfhe_has_no_ciphertext_product():
    be, ev = tfhe()
    ct = be.encrypt(np.zeros((1, 4)))
    with pytest.raises(BackendError, match="not available"):
        ev.mul_ct(ct, ct)


_FN = st.one_of(
    st.just(fn.relu()),
    st.just(fn.identity()),
    st.builds(fn.affine, st.floats(-3, 3), st.floats(-2, 2)),
    st.builds(fn.poly, st.lists(st.floats(-1, 1), min_size=1, max_size=4)),
    st.builds(lambda s: fn.table(-5.0, 5.0, s), st.lists(st.floats(-5, 5), min_size=64, max_size=64)),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(_FN, min_size=1, max_size=5), st.floats(-10, 0), st.floats(0.01, 10),
       st.integers(0, 2**31 - 1))
def test_folding_equivalence(stack, lo, width, seed):
    hi = lo + width
    be, _ = tfhe(lo=lo, hi=hi, shape=(40,))
    x = np.random.default_rng(seed).uniform(lo, hi, 40)
    ct = be.encrypt(x)
    deferred = ct
    for f in stack:
        deferred = be.lut(deferred, f)
    q0 = be.counters.quantizations
    a = be.flush(deferred)
    assert be.counters.quantizations == q0 + 1
    b = be.flush(be.lut(ct, fn.compose(*stack)))
    for name in ("q", "lo", "hi"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    # oracle: sample the composed table on the message grid by hand
    grid = dequantize(np.arange(64), lo, hi, 6)
    for f in stack:
        grid = f(grid)
    exp_lo, exp_hi = grid.min(), grid.max()
    assert np.all(a.lo == exp_lo) and np.all(a.hi == exp_hi)


# ---------------------------------------------------------------- determinism and monotonicity


def test_ciphertext_files_are_deterministic():
    x = np.array([[0.25, -1.5, 3.0, 2.0]])
    for make in (ckks, tfhe):
        files = []
        for _ in range(2):
            be, _ = make(seed=9)
            files.append(dump_ciphertext(be.encrypt(x)))
        assert files[0] == files[1]


def test_ciphertext_roundtrip_and_tamper():
    for make in (ckks, tfhe):
        be, _ = make()
        ct = be.encrypt(np.array([[0.25, -1.5, 3.0, 2.0]]))
        data = dump_ciphertext(ct)
        back = load_ciphertext(data)
        np.testing.assert_array_equal(be.decrypt(back), be.decrypt(ct))
        with pytest.raises(FormatError, match="magic"):
            load_ciphertext(b"XECT" + data[4:])
        with pytest.raises(FormatError, match="version"):
            load_ciphertext(data[:4] + b"\x02\x00" + data[6:])
        with pytest.raises(FormatError):
            load_ciphertext(data[:-3])
        with pytest.raises(FormatError):
            load_ciphertext(data + b"\0")


def test_pending_ciphertext_cannot_be_serialized():
    be, _ = tfhe()
    with pytest.raises(FormatError, match="pending"):
        dump_ciphertext(be.lut(be.encrypt(np.zeros((1, 4))), fn.relu()))


def _ckks_workload(scale):
    rng = np.random.default_rng(0)
    W = rng.normal(size=(16, 16)) / 4
    x = rng.uniform(-2, 2, 16)
    sk, ev = ckks(scale=scale, levels=3, shape=(16,), log2_n=13)
    ct = ev.linear_map(sk.encrypt(x), W, np.zeros(16))
    ct = ev.mul_ct(ct, ct)
    ref = (W @ x) ** 2
    return np.max(np.abs(sk.decrypt(ct) - ref))


def _tfhe_workload(bits):
    rng = np.random.default_rng(0)
    x = rng.uniform(-4, 4, 256)
    be, ev = tfhe(msg_bits=bits, shape=(256,))
    ct = ev.lut(ev.mul_plain(be.encrypt(x), 0.5), fn.relu())
    return np.max(np.abs(be.decrypt(ct) - np.maximum(x * 0.5, 0)))


def test_error_monotonicity():
    ck = [_ckks_workload(s) for s in range(16, 41, 4)]
    assert all(a >= b for a, b in zip(ck, ck[1:]))
    tf = [_tfhe_workload(b) for b in range(2, 13)]
    assert all(a >= b for a, b in zip(tf, tf[1:]))
