import numpy as np
import pytest

from viewset import numerics as nx
from viewset.errors import InputError
from viewset.initializer import (FeatureFormatError, Initializer, InitializerConfig, ShapeRecord, conv2d,
                                 initialize_view_set, load_features, max_pool, parameter_count, save_features)
from viewset.numerics import Parameter, Tensor


def conv_oracle(x, w, b, stride, pad):
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ci in range(c):
                    for ki in range(k):
                        for kj in range(k):
                            acc += w[oc, ci, ki, kj] * xp[ci, i * stride + ki, j * stride + kj]
                out[oc, i, j] = acc + (b[oc] if b is not None else 0.0)
    return out


def pool_oracle(x, k, stride, pad):
    c, h, w = x.shape
    ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    out = np.full((c, ho, wo), -np.inf)
    for ch in range(c):
        for i in range(ho):
            for j in range(wo):
                for ki in range(k):
                    for kj in range(k):
                        r, q = i * stride + ki - pad, j * stride + kj - pad
                        if 0 <= r < h and 0 <= q < w:
                            out[ch, i, j] = max(out[ch, i, j], x[ch, r, q])
    return out


def test_conv_scaling_kernel():
    out = conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)))
    assert np.array_equal(out.data, np.full((1, 3, 3), 2.0))


def test_conv_output_geometry_on_view_size():
    x = Tensor(np.zeros((3, 224, 224)))
    out = conv2d(x, Tensor(np.zeros((1, 3, 7, 7))), stride=2, padding=3)
    assert out.shape == (1, 112, 112)
    assert max_pool(out, 3, 2, 1).shape == (1, 56, 56)


def test_conv_kernel_too_large():
    with pytest.raises(nx.DimensionError):
        conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


@pytest.mark.parametrize("seed", range(8))
def test_conv_and_pool_equal_loop_oracles_exactly(seed):
    rng = np.random.default_rng(seed)
    c, h = int(rng.integers(1, 4)), int(rng.integers(3, 9))
    k, s, p = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.normal(size=(c, h, h))
    w, b = rng.normal(size=(2, c, k, k)), rng.normal(size=2)
    assert np.array_equal(conv2d(Tensor(x), Tensor(w), Tensor(b), s, p).data, conv_oracle(x, w, b, s, p))
    assert np.array_equal(max_pool(Tensor(x), k, s, min(p, k // 2)).data, pool_oracle(x, k, s, min(p, k // 2)))


def test_pool_constant_input():
    out = max_pool(Tensor(np.full((2, 6, 6), 0.3)), 3, 2, 1).data
    assert np.all(out == 0.3)


def test_conv_pool_gradients():
    rng = np.random.default_rng(1)
    w = Parameter(rng.normal(size=(2, 2, 3, 3)), "w")
    b = Parameter(rng.normal(size=2), "b")
    x = Tensor(rng.normal(size=(2, 2, 6, 6)))
    weights = Tensor(rng.normal(size=(2, 2, 2, 2)))

    def closure():
        return nx.total(nx.mul(max_pool(conv2d(x, w, b, 2, 1), 2, 2, 0), weights))

    assert nx.grad_check(closure, [w, b]) <= 1e-6


def test_parameter_counts_match_table_scale():
    one = parameter_count(InitializerConfig("shallow_conv_1", 512))
    two = parameter_count(InitializerConfig("shallow_conv_2", 512))
    assert one > two
    assert round(one / 1e6, 1) == 102.8
    assert round(two / 1e6, 1) == 12.9


def test_parameter_count_agrees_with_allocated_model():
    cfg = InitializerConfig("shallow_conv_2", 8, image_shape=(3, 32, 32))
    init = Initializer(cfg, np.random.default_rng(0))
    assert parameter_count(cfg) == sum(p.data.size for p in init.parameters())


@pytest.mark.parametrize("kind", ["shallow_conv_1", "shallow_conv_2"])
def test_conv_initializer_rows_are_independent(kind):
    cfg = InitializerConfig(kind, 8, image_shape=(3, 16, 16))
    init = Initializer(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    views = list(rng.random((4, 3, 16, 16)))
    views[2] = views[0]
    z = initialize_view_set(views, init).data
    assert z.shape == (4, 8)
    assert np.array_equal(z[0], z[2])
    p = np.array([3, 1, 0, 2])
    assert np.array_equal(initialize_view_set([views[i] for i in p], init).data, z[p])


def test_precomputed_shape_and_equivariance():
    init = Initializer(InitializerConfig("precomputed", 512, 24), np.random.default_rng(0))
    rows = np.random.default_rng(2).normal(size=(20, 24))
    z = initialize_view_set(rows, init).data
    assert z.shape == (20, 512)
    p = np.random.default_rng(3).permutation(20)
    assert np.array_equal(initialize_view_set(rows[p], init).data, z[p])


def test_initialize_rejects_bad_input():
    init = Initializer(InitializerConfig("precomputed", 4, 3), np.random.default_rng(0))
    with pytest.raises(InputError):
        initialize_view_set([np.zeros(3), np.zeros(4)], init)
    with pytest.raises(InputError):
        initialize_view_set(np.zeros((2, 5)), init)
    with pytest.raises(InputError):
        initialize_view_set([], init)


def test_feature_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    shapes = [ShapeRecord(f"s{i}", i % 2, i, rng.normal(size=(3, 5)) * 10.0 ** rng.integers(-8, 8)) for i in range(4)]
    save_features(tmp_path / "f.txt", shapes, 5)
    dim, back = load_features(tmp_path / "f.txt")
    assert dim == 5
    for a, b in zip(shapes, back):
        assert (a.shape_id, a.label, a.sublabel) == (b.shape_id, b.label, b.sublabel)
        assert a.views.tobytes() == b.views.tobytes()


def test_empty_feature_file(tmp_path):
    save_features(tmp_path / "e.txt", [], 7)
    assert load_features(tmp_path / "e.txt") == (7, [])


def test_ragged_row_names_shape(tmp_path):
    rows = "\n".join(" ".join(["0.5"] * 512) for _ in range(2))
    bad = " ".join(["0.5"] * 511)
    text = f"dim=512 shapes=2\nshape a label=0 sublabel=0 views=2\n{rows}\nshape b7 label=1 sublabel=3 views=1\n{bad}\n"
    (tmp_path / "bad.txt").write_text(text)
    with pytest.raises(FeatureFormatError) as info:
        load_features(tmp_path / "bad.txt")
    assert info.value.shape_id == "b7"
    assert info.value.line == 6
    assert "b7" in str(info.value)


def test_malformed_header(tmp_path):
    (tmp_path / "h.txt").write_text("dimension=3\n")
    with pytest.raises(FeatureFormatError) as info:
        load_features(tmp_path / "h.txt")
    assert info.value.line == 1
