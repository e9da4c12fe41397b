import math

import numpy as np
import pytest

from pillarnext.conv import ConvParams, dense_conv_oracle
from pillarnext.encoding import augment_point_features, voxelize_many
from pillarnext.errors import ChannelMismatch, StrideMismatch
from pillarnext.network import (DOWN_SPEC, FuseParams, MSFEParams, _conv_bn, NetworkConfig, backbone, decode_boxes,
                                decode_detections, describe_pipeline, dlsfe_block, encode_box,
                                fuse_last_three, head, init_convnext, init_dlsfe, init_lsfe,
                                init_network, iter_arrays, local_maxima, lsfe_block, msfe_module,
                                neck, network_forward, set_norm_mode, sigmoid, sparse_convnext_block,
                                subm, trainable)
from pillarnext.sparse import GridConfig, empty, make_sparse, random_sparse
from pillarnext.training import SceneSpec, synth_scene

TINY = NetworkConfig(stage_channels=(4, 4, 6, 6, 6, 6), fuse_channels=6, head_channels=5, mlp_channels=3)


def _rt(seed, shape=(12, 12), c=4, density=0.3, batch=1):
    return random_sparse(np.random.default_rng(seed), shape, density, c, batch_size=batch)


def _zero_bn_gamma(p):
    p.norm.gamma[:] = 0


def test_lsfe_zeroed_branches_is_relu_residual():
    t = _rt(0)
    p = init_lsfe(4, 2, np.random.default_rng(1))
    for cb in (p.main2, p.dilated):
        _zero_bn_gamma(cb)
    out = lsfe_block(t, p)
    np.testing.assert_array_equal(out.features, np.maximum(t.features, 0))
    assert out.coord_set() == t.coord_set()


def test_dlsfe_preserves_active_set_and_checks_channels():
    t = _rt(2)
    p = init_dlsfe(4, np.random.default_rng(3))
    assert dlsfe_block(t, p).coord_set() == t.coord_set()
    with pytest.raises(ChannelMismatch):
        dlsfe_block(_rt(2, c=3), p)


def test_dlsfe_params_equal_two_3x3():
    c = 8
    p = init_dlsfe(c, np.random.default_rng(4))
    sep = p.wide_row.conv.weight.size + p.wide_col.conv.weight.size
    assert sep == 2 * 9 * c * c


def test_separable_vs_two_3x3_receptive_support():
    d = np.zeros((1, 1, 21, 21))
    d[0, 0, 10, 10] = 1.0
    ones9 = ConvParams(np.ones((9, 1, 1)))
    sep = dense_conv_oracle(dense_conv_oracle(d, subm((1, 9)), ones9), subm((9, 1)), ones9)[0, 0]
    two = dense_conv_oracle(dense_conv_oracle(d, subm(3), ones9), subm(3), ones9)[0, 0]
    assert np.count_nonzero(sep) == 81 and np.count_nonzero(two) == 25


@pytest.mark.parametrize("m,extent", [(2, 5), (3, 7)])
def test_dilated_branch_reach(m, extent):
    d = np.zeros((1, 1, 21, 21))
    d[0, 0, 10, 10] = 1.0
    out = dense_conv_oracle(d, subm(3, m), ConvParams(np.ones((9, 1, 1))))[0, 0]
    ys, xs = np.nonzero(out)
    assert np.ptp(ys) + 1 == extent and np.ptp(xs) + 1 == extent


def test_msfe_downsample_single_site():
    rng = np.random.default_rng(5)
    p = MSFEParams(_conv_bn(DOWN_SPEC, 4, 4, rng, np.float64), init_dlsfe(4, rng),
                   [init_lsfe(4, 2, rng), init_lsfe(4, 3, rng)])
    set_norm_mode(p, "eval")
    t = make_sparse([(0, 5, 7)], np.ones((1, 4)), (16, 16))
    out = msfe_module(t, p)
    assert out.coord_set() <= {(0, 2, 3), (0, 2, 4), (0, 3, 3), (0, 3, 4)}
    assert out.stride == 2
    p.down = None
    t = _rt(6)
    assert msfe_module(t, p).coord_set() == t.coord_set()


def test_backbone_shapes_and_empty():
    cfg = NetworkConfig()
    assert describe_pipeline(GridConfig(), cfg)["stage_shapes"] == \
        [[1504, 1504], [752, 752], [376, 376], [188, 188], [94, 94], [47, 47]]
    params = init_network(TINY, 4, np.random.default_rng(0))
    outs = backbone(empty((32, 32), 4), params.stages)
    assert [o.n for o in outs] == [0] * 6
    assert [o.stride for o in outs] == [1, 2, 4, 8, 16, 32]
    set_norm_mode(params, "eval")
    outs = backbone(_rt(7, (32, 32), density=0.2), params.stages)
    assert [o.channels for o in outs] == list(TINY.stage_channels)


def _fuse_params(c_in, c_out):
    eye = np.eye(c_in, c_out)
    return FuseParams([eye.copy() for _ in range(3)], [np.zeros(c_out) for _ in range(3)])


def _strided(coords, feats, shape, stride):
    t = make_sparse(coords, feats, shape)
    t.stride = stride
    return t


def test_fuse_scaling_and_union():
    p = _fuse_params(2, 2)
    s4 = _strided([(0, 12, 20), (0, 1, 1)], [[1.0, 0.0], [2.0, 2.0]], (40, 40), 8)
    s5 = _strided([(0, 6, 10), (0, 2, 2)], [[0.5, 0.5], [1.0, 1.0]], (20, 20), 16)
    s6 = _strided([(0, 3, 5)], [[0.0, 3.0]], (10, 10), 32)
    out = fuse_last_three(s4, s5, s6, p)
    rows = {tuple(c): out.features[i] for i, c in enumerate(out.coords.tolist())}
    assert set(rows) == {(0, 12, 20), (0, 1, 1), (0, 4, 4)}
    np.testing.assert_array_equal(rows[(0, 12, 20)], [1.5, 3.5])
    assert out.n <= s4.n + s5.n + s6.n
    s5e = _strided(np.zeros((0, 3)), np.zeros((0, 2)), (20, 20), 16)
    s6e = _strided(np.zeros((0, 3)), np.zeros((0, 2)), (10, 10), 32)
    only = fuse_last_three(s4, s5e, s6e, p)
    assert only.coord_set() == s4.coord_set()
    with pytest.raises(StrideMismatch):
        fuse_last_three(s4, s4, s6, p)


def test_convnext_residual_identity():
    t = _rt(8, c=4)
    p = init_convnext(4, 5, 4, np.random.default_rng(9))
    p.project_w[:] = 0
    out = sparse_convnext_block(t, p)
    np.testing.assert_array_equal(out.features, t.features)
    assert out.coord_set() == t.coord_set()


def test_neck_dilates_active_set():
    params = init_network(TINY, 4, np.random.default_rng(10))
    t = _rt(11, (16, 16), c=6, density=0.1)
    out = neck(t, params.neck)
    assert t.coord_set() <= out.coord_set()
    params.neck.blocks = []
    assert neck(t, params.neck).n == out.n
    assert NetworkConfig().neck_repeats == 1 and NetworkConfig().neck_kernel == 5


def test_head_zero_case_decodes_to_cell_center():
    params = init_network(TINY, 4, np.random.default_rng(12))
    for br in (params.head.cls, params.head.box):
        br.out_w[:] = 0
        br.out_b[:] = 0
    t = _rt(13, (8, 8), c=6, density=0.3)
    cls, box = head(t, params.head)
    assert cls.shape == (t.n, 3) and box.shape == (t.n, 8)
    assert np.all(sigmoid(cls) == 0.5)
    g = GridConfig((-4.0, 4.0), (-4.0, 4.0), (-2.0, 4.0), (0.5, 0.5, 1.0))
    centers, sizes, yaw = decode_boxes(box, t.coords, g, 2)
    np.testing.assert_allclose(centers[:, 0], -4.0 + (t.coords[:, 2] + 0.5) * 1.0)
    np.testing.assert_allclose(centers[:, 1], -4.0 + (t.coords[:, 1] + 0.5) * 1.0)
    assert np.all(sizes == 1.0) and np.all(yaw == 0.0)


def test_head_prior_bias():
    params = init_network(TINY, 4, np.random.default_rng(0))
    np.testing.assert_allclose(sigmoid(params.head.cls.out_b), 0.01)


def test_encode_decode_round_trip():
    g = GridConfig((-20.0, 20.0), (-20.0, 20.0), (-2.0, 4.0), (0.2, 0.2, 0.2))
    rng = np.random.default_rng(14)
    for _ in range(50):
        center = rng.uniform(-19, 19, 3)
        size = rng.uniform(0.5, 5, 3)
        yaw = rng.uniform(-math.pi, math.pi)
        site = (int(rng.integers(0, 25)), int(rng.integers(0, 25)))
        raw = encode_box(center, size, yaw, site, g, 8)
        c, s, y = decode_boxes(raw[None], np.array([[0, *site]]), g, 8)
        np.testing.assert_allclose(c[0], center, atol=1e-9)
        np.testing.assert_allclose(s[0], size, rtol=1e-12)
        assert abs(math.remainder(y[0] - yaw, 2 * math.pi)) < 1e-9


def test_decode_detections_cases():
    g = GridConfig((-4.0, 4.0), (-4.0, 4.0), (-2.0, 4.0), (0.5, 0.5, 1.0))
    assert decode_detections(np.zeros((0, 3)), np.zeros((0, 8)), empty((8, 8), 1), g) == []
    t = make_sparse([(0, 3, 3)], [[1.0]], (8, 8))
    dets = decode_detections(np.array([[0.2, 1.3, -1.0]]), np.zeros((1, 8)), t, g, 2, 0.3)
    assert len(dets) == 1 and dets[0].class_id == 1
    assert dets[0].score == pytest.approx(1 / (1 + math.exp(-1.3)), rel=1e-15)


def test_local_maxima_tie_prefers_smaller_coordinate():
    t = make_sparse([(0, 2, 2), (0, 2, 3), (0, 5, 5)], np.ones((3, 1)), (8, 8))
    keep = local_maxima(np.array([0.7, 0.7, 0.2]), t)
    np.testing.assert_array_equal(keep, [True, False, True])


def test_network_forward_counts_and_params():
    g = GridConfig((-8.0, 8.0), (-8.0, 8.0), (-2.0, 4.0), (0.25, 0.25, 1.5))
    params = init_network(TINY, g.D, np.random.default_rng(15))
    pc, _ = synth_scene(SceneSpec(x_range=(-8.0, 8.0), y_range=(-8.0, 8.0)), 0)
    vb = augment_point_features(voxelize_many([pc], g), g)
    res = network_forward(params, vb)
    counts = res.active_counts()
    assert counts["pillars"] > 0 and len(res.cls_logits) == counts["neck"]
    names = [n for n, _, _ in iter_arrays(params)]
    assert len(names) == len(set(names))
    assert len(trainable(params)) < len(names)
