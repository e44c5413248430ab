"""Engine tests: forward semantics, gradients against finite differences,
Adam, stop-gradient, and the checkpoint format."""

import numpy as np
import pytest

from sidekit import nn_core as nn
from oracles import grad_close, numeric_grad

RNG_SEEDS = range(10)  # the acceptance suite re-runs the fd sweep at 100 seeds


def _leafdict(arrays):
    return {k: nn.leaf(v, k, requires_grad=True) for k, v in arrays.items()}


# Scenario builders: name -> (input arrays factory, scalar loss builder).
# Losses multiply by a fixed random matrix so every entry of the output
# contributes a distinct gradient.


def _rand(rng, *shape):
    return rng.normal(size=shape).astype(np.float32)


def op_scenarios(seed):
    rng = np.random.default_rng(seed)
    r44 = _rand(rng, 4, 4)
    r41 = _rand(rng, 4, 1)
    r14 = _rand(rng, 1, 4)
    r48 = _rand(rng, 4, 8)
    r24 = _rand(rng, 2, 4)

    def weighted(node, w):
        return nn.sum_all(nn.mul(node, nn.constant(w)))

    # relu inputs stay clear of the kink: fd across a non-differentiable
    # point is meaningless at any tolerance
    relu_in = _rand(rng, 4, 4)
    relu_in[np.abs(relu_in) < 0.05] = 0.1
    # log/sqrt need positive inputs with headroom for the +-h probe
    pos = np.abs(_rand(rng, 4, 4)) + 0.5

    idx = rng.integers(0, 4, size=6)
    return {
        "matmul": ({"a": _rand(rng, 4, 3), "b": _rand(rng, 3, 4)},
                   lambda d: weighted(nn.matmul(d["a"], d["b"]), r44)),
        "transpose": ({"a": _rand(rng, 4, 2)},
                      lambda d: weighted(nn.transpose(d["a"]), r24)),
        "add": ({"a": r44.copy(), "b": _rand(rng, 4, 4)},
                lambda d: weighted(nn.add(d["a"], d["b"]), r44)),
        "add_rowbcast": ({"a": _rand(rng, 4, 4), "b": _rand(rng, 1, 4)},
                         lambda d: weighted(nn.add(d["a"], d["b"]), r44)),
        "sub": ({"a": _rand(rng, 4, 4), "b": _rand(rng, 4, 4)},
                lambda d: weighted(nn.sub(d["a"], d["b"]), r44)),
        "mul": ({"a": _rand(rng, 4, 4), "b": _rand(rng, 4, 4)},
                lambda d: weighted(nn.mul(d["a"], d["b"]), r44)),
        "mul_colbcast": ({"a": _rand(rng, 4, 4), "b": _rand(rng, 4, 1)},
                         lambda d: weighted(nn.mul(d["a"], d["b"]), r44)),
        "mul_outer": ({"a": _rand(rng, 1, 4), "b": _rand(rng, 4, 1)},
                      lambda d: weighted(nn.mul(d["a"], d["b"]), r44)),
        "div": ({"a": _rand(rng, 4, 4), "b": pos.copy()},
                lambda d: weighted(nn.div(d["a"], d["b"]), r44)),
        "scale": ({"a": _rand(rng, 4, 4)},
                  lambda d: weighted(nn.scale(d["a"], 1.7), r44)),
        "relu": ({"a": relu_in},
                 lambda d: weighted(nn.relu(d["a"]), r44)),
        "tanh": ({"a": _rand(rng, 4, 4)},
                 lambda d: weighted(nn.tanh(d["a"]), r44)),
        "sigmoid": ({"a": _rand(rng, 4, 4)},
                    lambda d: weighted(nn.sigmoid(d["a"]), r44)),
        "softplus": ({"a": _rand(rng, 4, 4)},
                     lambda d: weighted(nn.softplus(d["a"]), r44)),
        "log": ({"a": pos.copy()},
                lambda d: weighted(nn.log(d["a"]), r44)),
        "sqrt": ({"a": pos.copy()},
                 lambda d: weighted(nn.sqrt(d["a"]), r44)),
        "square": ({"a": _rand(rng, 4, 4)},
                   lambda d: weighted(nn.square(d["a"]), r44)),
        "softmax_rows": ({"a": _rand(rng, 4, 4)},
                         lambda d: weighted(nn.softmax_rows(d["a"]), r44)),
        "log_softmax_rows": ({"a": _rand(rng, 4, 4)},
                             lambda d: weighted(nn.log_softmax_rows(d["a"]), r44)),
        "concat": ({"a": _rand(rng, 4, 4), "b": _rand(rng, 4, 4)},
                   lambda d: weighted(nn.concat_cols([d["a"], d["b"]]), r48)),
        "slice": ({"a": _rand(rng, 4, 8)},
                  lambda d: weighted(nn.slice_cols(d["a"], 2, 6), r44)),
        "sum_all": ({"a": _rand(rng, 4, 4)},
                    lambda d: nn.sum_all(d["a"])),
        "mean_all": ({"a": _rand(rng, 4, 4)},
                     lambda d: nn.scale(nn.mean_all(d["a"]), 3.0)),
        "sum_axis1": ({"a": _rand(rng, 4, 4)},
                      lambda d: weighted(nn.sum_axis1(d["a"]), r41)),
        "sum_axis0": ({"a": _rand(rng, 4, 4)},
                      lambda d: weighted(nn.sum_axis0(d["a"]), r14)),
        "reshape": ({"a": _rand(rng, 2, 8)},
                    lambda d: weighted(nn.reshape(d["a"], 4, 4), r44)),
        "repeat_rows": ({"a": _rand(rng, 2, 4)},
                        lambda d: weighted(nn.repeat_rows(d["a"], 2), r44)),
        "segment_sum": ({"a": _rand(rng, 4, 4)},
                        lambda d: weighted(nn.segment_sum_rows(d["a"], 2), r24)),
        "gather": ({"t": _rand(rng, 4, 4)},
                   lambda d: weighted(nn.gather_rows(d["t"], idx),
                                      _rand(np.random.default_rng(0), 6, 4))),
    }


def run_fd_sweep(seeds):
    """Check every differentiable op against central differences."""
    failures = []
    for seed in seeds:
        for opname, (arrays, build) in op_scenarios(seed).items():
            def loss_value(arrs):
                leaves = _leafdict(arrs)
                return float(build(leaves).value[0, 0])

            leaves = _leafdict(arrays)
            loss = build(leaves)
            nn.backward(loss)
            for key in arrays:
                numeric = numeric_grad(loss_value, arrays, key)
                if not grad_close(leaves[key].grad, numeric):
                    failures.append((opname, seed, key))
    return failures


class TestForward:
    def test_matmul_identity(self):
        b = nn.leaf([[1.0, 2.0], [3.0, 4.0]])
        out = nn.matmul(nn.leaf(np.eye(2)), b)
        np.testing.assert_array_equal(out.value, [[1.0, 2.0], [3.0, 4.0]])

    def test_softmax_symmetry(self):
        out = nn.softmax_rows(nn.leaf([[0.0, 0.0]]))
        np.testing.assert_allclose(out.value, [[0.5, 0.5]])

    def test_relu_definition(self):
        out = nn.relu(nn.leaf([[-1.0, 2.0]]))
        np.testing.assert_array_equal(out.value, [[0.0, 2.0]])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        out = nn.softmax_rows(nn.leaf(rng.normal(size=(8, 5)) * 10))
        assert np.all(out.value >= 0)
        np.testing.assert_allclose(out.value.sum(axis=1), 1.0, atol=1e-6)

    def test_forward_deterministic(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(6, 6)).astype(np.float32)
        w = rng.normal(size=(6, 6)).astype(np.float32)

        def run():
            return nn.tanh(nn.matmul(nn.leaf(x), nn.leaf(w))).value

        first = run()
        for _ in range(3):
            np.testing.assert_array_equal(run(), first)

    def test_shape_mismatch_names_node(self):
        with pytest.raises(nn.GraphError, match="matmul"):
            nn.matmul(nn.leaf(np.ones((2, 3))), nn.leaf(np.ones((2, 3))))

    def test_nonfinite_leaf_raises(self):
        bad = np.ones((3, 2), dtype=np.float32)
        bad[1, 0] = np.nan
        with pytest.raises(nn.NonFiniteError, match="row 1"):
            nn.leaf(bad, "x")

    def test_nonfinite_op_output(self):
        a = nn.leaf([[0.0, 1.0]])
        with pytest.raises(nn.NonFiniteError, match="log"):
            nn.log(a)


class TestBackward:
    def test_linear_map_gradient(self):
        w = nn.leaf(np.ones((2, 2)), "W", requires_grad=True)
        x = nn.leaf([[1.0], [1.0]], "x")
        loss = nn.sum_all(nn.matmul(w, x))
        nn.backward(loss)
        np.testing.assert_array_equal(w.grad, [[1.0, 1.0], [1.0, 1.0]])

    def test_zero_loss_zero_grads(self):
        w = nn.leaf(np.random.default_rng(0).normal(size=(3, 3)),
                    requires_grad=True)
        loss = nn.scale(nn.sum_all(nn.square(w)), 0.0)
        nn.backward(loss)
        np.testing.assert_array_equal(w.grad, np.zeros((3, 3)))

    def test_loss_must_be_scalar(self):
        w = nn.leaf(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(nn.GraphError, match="1x1"):
            nn.backward(nn.square(w))

    def test_fd_sweep_small(self):
        failures = run_fd_sweep(RNG_SEEDS)
        assert not failures, f"fd mismatches: {failures}"

    def test_reused_node_accumulates(self):
        x = nn.leaf([[2.0]], requires_grad=True)
        loss = nn.sum_all(nn.add(nn.square(x), nn.scale(x, 3.0)))
        nn.backward(loss)
        np.testing.assert_allclose(x.grad, [[2 * 2.0 + 3.0]])


class TestStopGradient:
    def test_forward_identity_bitwise(self):
        v = nn.leaf(np.random.default_rng(1).normal(size=(3, 4)))
        out = nn.stop_gradient(v)
        assert out.value is v.value

    def test_zero_upstream_gradient(self):
        x = nn.leaf(np.ones((2, 2)), requires_grad=True)
        loss = nn.sum_all(nn.mul(nn.stop_gradient(x), x))
        nn.backward(loss)
        # only the direct factor contributes: d(sg(x) * x)/dx = sg(x) = 1
        np.testing.assert_array_equal(x.grad, np.ones((2, 2)))

    def test_straight_through_identity(self):
        rng = np.random.default_rng(2)
        h = nn.leaf(rng.normal(size=(3, 4)), requires_grad=True)
        h_hat = nn.leaf(rng.normal(size=(3, 4)))
        s = nn.sub(h, nn.stop_gradient(nn.sub(h, h_hat)))
        np.testing.assert_allclose(s.value, h_hat.value, atol=1e-7)
        w = rng.normal(size=(3, 4)).astype(np.float32)
        nn.backward(nn.sum_all(nn.mul(s, nn.constant(w))))
        np.testing.assert_allclose(h.grad, w, atol=1e-7)

    def test_backward_through_stop_gradient_alone(self):
        x = nn.leaf(np.ones((2, 2)), requires_grad=True)
        loss = nn.sum_all(nn.stop_gradient(nn.square(x)))
        nn.backward(loss)
        assert x.grad is None or np.all(x.grad == 0)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"w": np.full((2, 2), 5.0, dtype=np.float32)}
        state = nn.AdamState(lr=0.1)
        nn.adam_step(state, p, {"w": np.zeros((2, 2), dtype=np.float32)})
        np.testing.assert_array_equal(p["w"], np.full((2, 2), 5.0))
        assert state.step == 1

    def test_first_step_bias_corrected(self):
        # g=1, lr=0.1: mhat=1, vhat=1, step = lr/(1+eps) ~ 0.1
        p = {"w": np.zeros((1, 1), dtype=np.float32)}
        state = nn.AdamState(lr=0.1)
        nn.adam_step(state, p, {"w": np.ones((1, 1), dtype=np.float32)})
        np.testing.assert_allclose(p["w"], [[-0.1]], atol=1e-7)

    def test_identical_params_stay_identical(self):
        rng = np.random.default_rng(0)
        g = rng.normal(size=(3, 3)).astype(np.float32)
        p = {"a": np.ones((3, 3), dtype=np.float32),
             "b": np.ones((3, 3), dtype=np.float32)}
        state = nn.AdamState()
        for _ in range(5):
            nn.adam_step(state, p, {"a": g, "b": g})
        np.testing.assert_array_equal(p["a"], p["b"])

    def test_nonfinite_gradient_names_param(self):
        p = {"w": np.zeros((1, 1), dtype=np.float32)}
        bad = np.array([[np.nan]], dtype=np.float32)
        with pytest.raises(nn.NonFiniteError, match="'w'"):
            nn.adam_step(nn.AdamState(), p, {"w": bad})

    def test_lr_must_be_positive(self):
        with pytest.raises(ValueError):
            nn.AdamState(lr=0.0)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {"enc.w": rng.normal(size=(3, 5)).astype(np.float32),
                  "dpca.g0.d0.u": rng.normal(size=(1, 7)).astype(np.float32)}
        path = tmp_path / "model.ckpt"
        nn.save_checkpoint(path, arrays)
        loaded = nn.load_checkpoint(path)
        assert list(loaded) == list(arrays)
        for k in arrays:
            np.testing.assert_array_equal(loaded[k], arrays[k])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(nn.CheckpointError, match="magic"):
            nn.load_checkpoint(path)

    def test_truncated_payload_reports_offset(self, tmp_path):
        path = tmp_path / "trunc.ckpt"
        nn.save_checkpoint(path, {"w": np.ones((4, 4), dtype=np.float32)})
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(nn.CheckpointError, match="truncated"):
            nn.load_checkpoint(path)

    def test_format_is_little_endian(self, tmp_path):
        path = tmp_path / "le.ckpt"
        nn.save_checkpoint(path, {"x": np.array([[1.0]], dtype=np.float32)})
        raw = path.read_bytes()
        assert raw[:4] == b"SIDK"
        assert raw[4:8] == (1).to_bytes(4, "little")
        # name record: len=1, "x", rows=1, cols=1, payload 1.0f LE
        assert raw[8:12] == (1).to_bytes(4, "little")
        assert raw[12:13] == b"x"
        assert raw[-4:] == np.float32(1.0).tobytes()
