import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dam.affinity import AffinityStack, compute_affinity, mask_support_features, stack_block_affinities
from dam.backbone import build_backbone, extract_features
from dam.config import BackboneConfig
from dam.hsfm import HSFM, B3DNetwork, b3d_enhance, hsfm_forward, hysteretic_filter
from dam.rng import CounterRNG
from dam.synthset import render_sample
from dam.tensor import Tensor
from oracles import affinity_naive, conv2d_naive, filter_naive


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def test_gram_case_symmetric_psd():
    f = np.random.default_rng(0).normal(size=(5, 3, 3))
    s = compute_affinity(T(f), T(f)).data
    np.testing.assert_allclose(s, s.T, atol=1e-12)
    assert np.linalg.eigvalsh(s).min() > -1e-9


def test_ones_support_gives_row_constant():
    fq = np.random.default_rng(1).normal(size=(1, 2, 3))
    s = compute_affinity(T(np.ones((1, 2, 3))), T(fq), normalize=False).data
    np.testing.assert_allclose(s, np.tile(fq.reshape(1, -1), (6, 1)))


def test_random_pair_against_triple_loop():
    r = np.random.default_rng(2)
    fs, fq = r.normal(size=(8, 4, 4)), r.normal(size=(8, 4, 4))
    for norm in (True, False):
        np.testing.assert_allclose(compute_affinity(T(fs), T(fq), norm).data, affinity_naive(fs, fq, norm), atol=1e-10)


def test_normalized_entries_bounded():
    r = np.random.default_rng(3)
    s = compute_affinity(T(r.normal(size=(6, 3, 3))), T(r.normal(size=(6, 3, 3)))).data
    assert np.all(np.abs(s) <= 1 + 1e-9)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        compute_affinity(T(np.zeros((2, 3, 3))), T(np.zeros((3, 3, 3))))


def test_mask_support_features():
    f = T(np.ones((2, 2, 2)))
    np.testing.assert_array_equal(mask_support_features(f, np.ones((2, 2))).data, f.data)
    assert not mask_support_features(f, np.zeros((2, 2))).data.any()
    half = mask_support_features(f, np.array([[1, 0], [1, 0]])).data
    np.testing.assert_array_equal(half[:, :, 1], 0)
    np.testing.assert_array_equal(half[:, :, 0], 1)


@pytest.fixture(scope="module")
def pyramids():
    bb = build_backbone(BackboneConfig())
    return extract_features(bb, render_sample(0, 1)[0]), extract_features(bb, render_sample(0, 2)[0])


def test_block_stack_shapes_and_channels(pyramids):
    ps, pq = pyramids
    s3 = stack_block_affinities(ps, pq, 3)
    s4 = stack_block_affinities(ps, pq, 4)
    assert s3.data.shape == (3, 64, 64) and s4.data.shape == (2, 16, 16)
    for i, (fs, fq) in enumerate(zip(ps.block(4), pq.block(4))):
        np.testing.assert_array_equal(s4.data.data[i], compute_affinity(fs, fq).data)
    with pytest.raises(ValueError):
        stack_block_affinities(ps, pq, 2)


def test_filter_matrix_vector_example():
    s = np.arange(1.0, 17.0).reshape(1, 4, 4)
    out = hysteretic_filter(T(s), [1, 0, 1, 0], (2, 2)).data
    np.testing.assert_array_equal(out.reshape(-1), [10, 12, 14, 16])


def test_filter_zero_mask_and_length_check():
    s = T(np.random.default_rng(4).normal(size=(2, 4, 4)))
    assert not hysteretic_filter(s, np.zeros(4), (2, 2)).data.any()
    with pytest.raises(ValueError, match="entries"):
        hysteretic_filter(s, np.zeros(3), (2, 2))


@given(st.integers(0, 2**31), st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))
def test_filter_matches_loops(seed, c, h, w):
    r = np.random.default_rng(seed)
    n = h * w
    s, m = r.normal(size=(c, n, n)), r.uniform(size=n)
    np.testing.assert_allclose(hysteretic_filter(T(s), m, (h, w)).data, filter_naive(s, m, (h, w)), atol=1e-10)


def _net(cin=2, seed=0, **kw):
    return B3DNetwork(cin, CounterRNG(seed), hidden=4, out_channels=3, dtype=np.float64, **kw)


def test_zero_network_absorbs():
    net = _net()
    for p in net.parameters():
        p.data[...] = 0
    s = AffinityStack(T(np.random.default_rng(5).normal(size=(2, 4, 4))), 3, (2, 2))
    assert not b3d_enhance(s, net).data.any()


@given(st.integers(0, 2**31), st.sampled_from([1, 3]))
def test_symmetric_stack_gives_symmetric_output(seed, depth):
    r = np.random.default_rng(seed)
    a = r.normal(size=(2, 9, 9))
    s = AffinityStack(T(a + a.transpose(0, 2, 1)), 3, (3, 3))
    out = b3d_enhance(s, _net(seed=seed % 1000, depth_kernel=depth)).data
    np.testing.assert_allclose(out, out.transpose(0, 2, 1), atol=1e-10)


def test_single_path_matches_per_slice_conv():
    r = np.random.default_rng(6)
    net = B3DNetwork(1, CounterRNG(1), hidden=1, out_channels=1, kernel_planes=(3,), depth_kernel=1,
                     dtype=np.float64)
    net.eval()  # running stats (0, 1): batchnorm is an affine map
    path = net.paths[0]
    w1, w2 = r.normal(size=(3, 3)), r.normal(size=(3, 3))
    path.conv1.weight.data[...] = w1.reshape(1, 1, 1, 3, 3)
    path.conv2.weight.data[...] = w2.reshape(1, 1, 1, 3, 3)
    path.conv1.bias.data[...] = 0.1
    path.conv2.bias.data[...] = -0.2
    vol = r.normal(size=(1, 4, 2, 2))
    got = net(T(vol)).data
    scale = 1 / np.sqrt(1 + 1e-5)
    for d in range(4):
        x = np.maximum(conv2d_naive(vol[:, d], w1.reshape(1, 1, 3, 3), [0.1], (1, 1)) * scale, 0)
        x = np.maximum(conv2d_naive(x, w2.reshape(1, 1, 3, 3), [-0.2], (1, 1)) * scale, 0)
        np.testing.assert_allclose(got[:, d], x, atol=1e-12)


def test_b3d_rejects_non_square():
    with pytest.raises(ValueError):
        b3d_enhance(AffinityStack(T(np.zeros((2, 4, 6))), 3, (2, 3)), _net())


def _stacks(seed, k, n=4, hw=(2, 2)):
    r = np.random.default_rng(seed)
    return [AffinityStack(T(r.normal(size=(2, n, n))), 3, hw) for _ in range(k)], [r.uniform(size=n) for _ in range(k)]


def test_k1_is_enhance_then_filter():
    stacks, masks = _stacks(7, 1)
    net = _net()
    net.eval()
    got = hsfm_forward(stacks, masks, net).data
    want = hysteretic_filter(b3d_enhance(stacks[0], net), masks[0], (2, 2)).data
    np.testing.assert_array_equal(got, want)


def test_k_identical_shots_equal_one_shot_exactly():
    stacks, masks = _stacks(8, 1)
    net = _net()
    net.eval()
    one = hsfm_forward(stacks, masks, net).data
    five = hsfm_forward(stacks * 5, masks * 5, net).data
    assert np.array_equal(one, five)


def test_k2_mean_of_one_shot_masks():
    stacks, masks = _stacks(9, 2)
    net = _net()
    net.eval()
    both = hsfm_forward(stacks, masks, net).data
    each = [hsfm_forward([s], [m], net).data for s, m in zip(stacks, masks)]
    np.testing.assert_allclose(both, (each[0] + each[1]) / 2, atol=1e-12)


def test_channel_concat_fusion_channels():
    stacks, masks = _stacks(10, 2)
    h = HSFM(2, 2, CounterRNG(0), fusion="channel_concat", hidden=4, out_channels=3, dtype=np.float64)
    assert h.net.in_channels == 4
    assert h(stacks, masks).shape == (3, 2, 2)


def test_disabled_hsfm_filters_raw_stack():
    stacks, masks = _stacks(11, 1)
    h = HSFM(2, 1, CounterRNG(0), enabled=False)
    assert h.net is None and h.out_channels == 2
    np.testing.assert_array_equal(h(stacks, masks).data, hysteretic_filter(stacks[0].data, masks[0], (2, 2)).data)


def test_mixed_blocks_rejected():
    a, m = _stacks(12, 1)
    b = AffinityStack(a[0].data, 4, (2, 2))
    with pytest.raises(ValueError, match="mixed"):
        hsfm_forward([a[0], b], m * 2, None)
