import numpy as np
import pytest
from oracles import attention_loops, layer_norm_loop

from dbgla import tensor as T
from dbgla.errors import ShapeError
from dbgla.gradcheck import check_gradients
from dbgla.local_attention import (
    AttentionParams,
    LocalBlock,
    MhsaConfig,
    batch_windows,
    build_window_batches,
    select_keys,
    tile_windows,
    window_mhsa,
)
from dbgla.partition import AreaGrid, DensityPartition, PartitionConfig, partition_cloud


def single_area(positions, window_edge, area_edge=1.0):
    n = len(positions)
    grid = AreaGrid(np.zeros(3), area_edge, (1, 1, 1), np.zeros(n, dtype=np.int64), np.zeros((1, 3), dtype=np.int64),
                    1, [np.arange(n)])
    part = DensityPartition(np.ones(1), np.zeros(1, dtype=np.int64), 1, 1, np.zeros(1, dtype=np.int64),
                            window_edge_of_part=np.array([window_edge]))
    return grid, part


def random_setup(seed, n=200, target=12, k=3):
    rng = np.random.default_rng(seed)
    pos = rng.exponential(size=(n, 3))
    grid, part = partition_cloud(pos, PartitionConfig(target_area_count=target, num_parts=k))
    return rng, pos, grid, part


class TestTileWindows:
    def test_window_equals_area(self):
        _, pos, grid, part = random_setup(0)
        part.window_edge_of_part[:] = grid.area_edge
        windows = tile_windows(pos, grid, part)
        assert len(windows) == grid.num_areas

    def test_corners_half_edge(self):
        corners = np.array([[x, y, z] for x in (0.1, 0.9) for y in (0.1, 0.9) for z in (0.1, 0.9)])
        grid, part = single_area(corners, 0.5)
        windows = tile_windows(corners, grid, part)
        assert len(windows) == 8 and all(len(w.member_points) == 1 for w in windows)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("shifted", [False, True])
    def test_coverage_exactly_once(self, seed, shifted):
        _, pos, grid, part = random_setup(seed)
        windows = tile_windows(pos, grid, part, shifted=shifted)
        hits = np.zeros(len(pos), dtype=int)
        for w in windows:
            hits[w.member_points] += 1
            assert (grid.area_of_point[w.member_points] == w.area).all()
        np.testing.assert_array_equal(hits, 1)

    def test_points_inside_their_window(self):
        _, pos, grid, part = random_setup(6)
        for shifted in (False, True):
            for w in tile_windows(pos, grid, part, shifted=shifted):
                edge = part.window_edge_of_part[w.density_part]
                assert (np.abs(pos[w.member_points] - w.center) <= edge / 2 + 1e-9).all()

    def test_oversized_windows_split(self):
        pos = np.random.default_rng(1).uniform(size=(50, 3))
        grid, part = single_area(pos, 1.0)
        windows = tile_windows(pos, grid, part, max_members=8)
        assert all(len(w.member_points) <= 8 for w in windows)
        assert sorted(np.concatenate([w.member_points for w in windows])) == list(range(50))


class TestSelectKeys:
    def test_isolated_window(self):
        pos = np.random.default_rng(0).uniform(0, 0.4, size=(10, 3))
        grid, part = single_area(pos, 0.5)
        windows = select_keys(tile_windows(pos, grid, part), MhsaConfig(2, 4))
        assert len(windows) == 1
        np.testing.assert_array_equal(windows[0].key_points, windows[0].member_points)

    def test_zero_rates_plain_windows(self):
        _, pos, grid, part = random_setup(1)
        cfg = MhsaConfig(2, 4, neighbor_rate=0.0, same_part_rate=0.0)
        for w in select_keys(tile_windows(pos, grid, part), cfg):
            np.testing.assert_array_equal(w.key_points, w.member_points)

    def test_neighbour_rate_count(self):
        rng = np.random.default_rng(2)
        left = rng.uniform([0, 0, 0], [0.5, 0.5, 0.5], size=(100, 3))
        right = rng.uniform([0.5, 0, 0], [1.0, 0.5, 0.5], size=(100, 3))
        pos = np.vstack([left, right])
        grid, part = single_area(pos, 0.5)
        cfg = MhsaConfig(2, 4, neighbor_rate=0.25, same_part_rate=0.0)
        windows = select_keys(tile_windows(pos, grid, part), cfg, seed=3)
        assert [len(w.member_points) for w in windows] == [100, 100]
        assert [len(w.key_points) for w in windows] == [125, 125]
        for w, other in zip(windows, windows[::-1]):
            assert set(w.external_keys) <= set(other.member_points)

    def test_cap_truncates_externals_only(self):
        _, pos, grid, part = random_setup(3, n=300)
        cfg = MhsaConfig(2, 4, neighbor_rate=1.0, same_part_rate=1.0, key_cap=20)
        for w in select_keys(tile_windows(pos, grid, part, max_members=20), cfg):
            assert len(w.key_points) <= 20
            np.testing.assert_array_equal(w.key_points[: len(w.member_points)], w.member_points)

    def test_deterministic(self):
        _, pos, grid, part = random_setup(4)
        cfg = MhsaConfig(2, 4)
        a = select_keys(tile_windows(pos, grid, part), cfg, seed=9)
        b = select_keys(tile_windows(pos, grid, part), cfg, seed=9)
        for wa, wb in zip(a, b):
            np.testing.assert_array_equal(wa.key_points, wb.key_points)


def _params(c, rng):
    p = AttentionParams(c, rng)
    for t in p.parameters():
        t.data[:] = rng.normal(scale=0.5, size=t.shape)
    return p


def _oracle(x, nq, p, heads, scale):
    rows = x.T
    return attention_loops(rows[:nq], rows, p.q.weight.data, p.q.bias.data, p.k.weight.data, p.k.bias.data,
                           p.v.weight.data, p.v.bias.data, p.out.weight.data, p.out.bias.data, heads, scale)


class TestWindowMhsa:
    def test_singleton(self):
        rng = np.random.default_rng(0)
        cfg = MhsaConfig(2, 3)
        p = _params(6, rng)
        v = rng.normal(size=(6, 1))
        out = window_mhsa(T.Tensor(v), 1, cfg, p).data
        expected = p.out(p.v(T.Tensor(v.T))).data.T
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_identical_keys_uniform(self):
        rng = np.random.default_rng(1)
        cfg = MhsaConfig(2, 3)
        p = _params(6, rng)
        x = np.tile(rng.normal(size=(6, 1)), (1, 5))
        out, weights = window_mhsa(T.Tensor(x), 3, cfg, p, return_weights=True)
        np.testing.assert_allclose(weights, 1.0 / 5, atol=1e-14)
        expected = p.out(p.v(T.Tensor(x[:, :1].T))).data.T
        np.testing.assert_allclose(out.data, np.tile(expected, (1, 3)), atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_loops(self, seed):
        rng = np.random.default_rng(seed)
        cfg = MhsaConfig(2, 4)
        p = _params(8, rng)
        x = rng.normal(size=(8, 9))
        expected, weights = _oracle(x, 5, p, 2, cfg.scale())
        out, w = window_mhsa(T.Tensor(x), 5, cfg, p, return_weights=True)
        np.testing.assert_allclose(out.data, expected.T, atol=1e-10, rtol=0)
        np.testing.assert_allclose(w, weights, atol=1e-12)

    def test_unscaled_option(self):
        rng = np.random.default_rng(5)
        cfg = MhsaConfig(2, 4, attn_scale=False)
        p = _params(8, rng)
        x = rng.normal(size=(8, 4))
        expected, _ = _oracle(x, 2, p, 2, 1.0)
        np.testing.assert_allclose(window_mhsa(T.Tensor(x), 2, cfg, p).data, expected.T, atol=1e-10)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            window_mhsa(T.Tensor(np.ones((5, 3))), 1, MhsaConfig(2, 4), AttentionParams(8, None))


def _block(seed, heads=2, d=4, **kw):
    rng = np.random.default_rng(seed)
    return LocalBlock(MhsaConfig(heads, d, **kw), rng), rng


class TestLocalBlock:
    def test_zero_output_projections_identity(self):
        _, pos, grid, part = random_setup(0)
        block, rng = _block(0)
        for layer in (block.attn.out, block.ffn.fc2):
            layer.weight.data[:] = 0
            layer.bias.data[:] = 0
        batch, _ = build_window_batches(pos, grid, part, block.cfg)
        x = rng.normal(size=(len(pos), 8))
        np.testing.assert_array_equal(block(T.Tensor(x), pos, batch).data, x)

    def test_single_window_is_global_attention(self):
        rng = np.random.default_rng(1)
        pos = rng.uniform(size=(12, 3))
        grid, part = single_area(pos, 1.0)
        block, _ = _block(1, use_position=False)
        windows = select_keys(tile_windows(pos, grid, part), block.cfg)
        assert len(windows) == 1
        batch = batch_windows(windows, 12)
        x = rng.normal(size=(12, 8))
        h = layer_norm_loop(x, block.norm1.gain.data, block.norm1.bias.data)
        p = block.attn
        perm = windows[0].member_points
        att, _ = attention_loops(h[perm], h[perm], p.q.weight.data, p.q.bias.data, p.k.weight.data, p.k.bias.data,
                                 p.v.weight.data, p.v.bias.data, p.out.weight.data, p.out.bias.data, 2,
                                 block.cfg.scale())
        y = x.copy()
        y[perm] += att
        z = y + block.ffn(T.Tensor(layer_norm_loop(y, block.norm2.gain.data, block.norm2.bias.data))).data
        np.testing.assert_allclose(block(T.Tensor(x), pos, batch).data, z, atol=1e-10)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(2)
        pos = rng.uniform(size=(10, 3))
        grid, part = single_area(pos, 1.0)
        block, _ = _block(2)
        x = rng.normal(size=(10, 8))
        batch = batch_windows(select_keys(tile_windows(pos, grid, part), block.cfg), 10)
        perm = rng.permutation(10)
        grid_p, part_p = single_area(pos[perm], 1.0)
        batch_p = batch_windows(select_keys(tile_windows(pos[perm], grid_p, part_p), block.cfg), 10)
        out = block(T.Tensor(x), pos, batch).data
        out_p = block(T.Tensor(x[perm]), pos[perm], batch_p).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-12)

    def test_locality(self):
        _, pos, grid, part = random_setup(3)
        block, rng = _block(3)
        batch, _ = build_window_batches(pos, grid, part, block.cfg, seed=1)
        x = rng.normal(size=(len(pos), 8))
        base = block(T.Tensor(x), pos, batch).data
        target = 0
        win = batch.windows[batch.point_slot[target] // batch.query_index.shape[1]]
        outside = np.setdiff1d(np.arange(len(pos)), win.key_points)
        x2 = x.copy()
        x2[outside] += rng.normal(size=(len(outside), 8))
        np.testing.assert_array_equal(block(T.Tensor(x2), pos, batch).data[target], base[target])

    @pytest.mark.parametrize("seed", range(4))
    def test_shifted_pairs_strictly_extend(self, seed):
        _, pos, grid, part = random_setup(seed, n=300, target=4, k=1)
        cfg = MhsaConfig(2, 4, neighbor_rate=0.0, same_part_rate=0.0)
        part.window_edge_of_part[:] = grid.area_edge / 2
        plain, shifted = build_window_batches(pos, grid, part, cfg)

        def pairs(batch):
            return {(int(q), int(k)) for w in batch.windows for q in w.member_points for k in w.key_points}

        base = pairs(plain)
        assert base < base | pairs(shifted)

    def test_weights_sum_to_one(self):
        _, pos, grid, part = random_setup(4)
        block, rng = _block(4)
        batch, _ = build_window_batches(pos, grid, part, block.cfg)
        _, weights = block(T.Tensor(rng.normal(size=(len(pos), 8))), pos, batch, return_weights=True)
        np.testing.assert_allclose(weights.data.sum(-1), 1.0, atol=1e-10)
        assert (weights.data[np.broadcast_to(~batch.key_mask[:, None, None, :], weights.shape)] == 0).all()

    def test_gradients(self):
        _, pos, grid, part = random_setup(5, n=30, target=4, k=2)
        block, rng = _block(5, heads=2, d=2, ffn_expansion=2)
        batch, _ = build_window_batches(pos, grid, part, block.cfg)
        x = T.Tensor(rng.normal(size=(30, 4)), requires_grad=True)
        w = rng.normal(size=(30, 4))
        params = dict(block.named_parameters())
        params["x"] = x
        report = check_gradients(lambda: T.sum(T.mul(block(x, pos, batch), w)), params)
        assert max(report.values()) <= 1e-4, report
