import hashlib

import numpy as np
import pytest

from voxtree.octree import ChangeKind, Octree, classify_homogeneous, halfsample_block
from voxtree.serialize import save_octree
from voxtree.volume import BrickPoolConfig, VolumeDescriptor


def make_tree(tmp_path, dims, brick, *, channels=1, threshold=0, fmt="uint8",
              bg=0, name="tree"):
    desc = VolumeDescriptor(dims=dims, channels=channels, sample_format=fmt,
                            background_value=bg)
    cfg = BrickPoolConfig(brick_dims=brick, homogeneity_threshold=threshold,
                          page_bricks=8, ram_page_limit=8)
    return Octree.create(desc, cfg, tmp_path / f"{name}.vxbp")


def brick_values(tree, node):
    """Interior voxels of a node's brick, (z, y, x, C)."""
    m = tree.geometry.brick_dims
    data = tree.store.read_brick(node.brick)
    return data[1:1 + m[2], 1:1 + m[1], 1:1 + m[0], :]


def tree_digest(tree, tmp_path, tag):
    opath = tmp_path / f"{tag}.vxoc"
    ppath = tmp_path / f"{tag}.pool"
    save_octree(tree, opath, ppath)
    return (hashlib.sha256(opath.read_bytes()).hexdigest(),
            hashlib.sha256(ppath.read_bytes()).hexdigest())


# -- halfsample ---------------------------------------------------------------

def brute_halfsample(values, in_extent, split, bg):
    mz, my, mx, nc = values.shape
    cx, cy, cz = in_extent
    kx, ky, kz = (2 if split[0] else 1), (2 if split[1] else 1), (2 if split[2] else 1)
    out = np.full((mz // kz, my // ky, mx // kx, nc), bg, dtype=np.int64)
    for z in range(mz // kz):
        for y in range(my // ky):
            for x in range(mx // kx):
                for c in range(nc):
                    acc = []
                    for dz in range(kz):
                        for dy in range(ky):
                            for dx in range(kx):
                                sz, sy, sx = kz * z + dz, ky * y + dy, kx * x + dx
                                if sx < cx and sy < cy and sz < cz:
                                    acc.append(int(values[sz, sy, sx, c]))
                    if acc:
                        num = 2 * sum(acc) + len(acc)
                        out[z, y, x, c] = num // (2 * len(acc))
    return out


def test_halfsample_constant_children():
    vals = np.full((2, 2, 2, 1), 9, dtype=np.int64)
    out = halfsample_block(vals, (2, 2, 2), (True, True, True), 0)
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 9


def test_halfsample_1d_pairwise_means():
    vals = np.array([2, 4, 6, 8], dtype=np.int64).reshape(1, 1, 4, 1)
    out = halfsample_block(vals, (4, 1, 1), (True, False, False), 0)
    assert out[0, 0, :, 0].tolist() == [3, 7]


def test_halfsample_mean_of_block():
    vals = np.array([0, 0, 0, 0, 8, 8, 8, 8], dtype=np.int64).reshape(2, 2, 2, 1)
    out = halfsample_block(vals, (2, 2, 2), (True, True, True), 0)
    assert out[0, 0, 0, 0] == 4


def test_halfsample_excludes_out_of_volume_voxels():
    vals = np.array([2, 4, 100, 100], dtype=np.int64).reshape(1, 1, 4, 1)
    out = halfsample_block(vals, (3, 1, 1), (True, False, False), 7)
    # second output voxel averages only the in-volume 100
    assert out[0, 0, :, 0].tolist() == [3, 100]
    out = halfsample_block(vals, (2, 1, 1), (True, False, False), 7)
    assert out[0, 0, :, 0].tolist() == [3, 7]  # fully outside -> background


@pytest.mark.parametrize("seed", range(5))
def test_halfsample_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    shape = (4, 2, 6, 2)
    vals = rng.integers(0, 255, size=shape, dtype=np.int64)
    extent = (int(rng.integers(0, 7)), int(rng.integers(0, 3)), int(rng.integers(0, 5)))
    split = (True, True, True)
    fast = halfsample_block(vals, extent, split, 3)
    slow = brute_halfsample(vals, extent, split, 3)
    assert np.array_equal(fast, slow)


def test_classify_homogeneous_examples():
    per, overall = classify_homogeneous([3], [3], 1)
    assert per == [True] and overall
    per, overall = classify_homogeneous([1], [5], 1)
    assert per == [False] and not overall
    per, overall = classify_homogeneous([7], [7], 0)
    assert not overall  # strict inequality: threshold 0 never prunes


# -- initialization ------------------------------------------------------------

def test_init_root_only_background(tmp_path):
    tree = make_tree(tmp_path, (16, 1, 1), (4, 1, 1), bg=0)
    assert tree.root.children is None
    assert tree.root.brick is None
    assert tree.root.avg == [0]
    assert tree.brick_count == 0
    assert tree.geometry.depth == 2


def test_init_depth_matches_virtual_dims(tmp_path):
    tree = make_tree(tmp_path, (1004, 1002, 1611), (64, 64, 64), channels=3,
                     fmt="uint16")
    assert tree.geometry.depth == 5
    assert tree.geometry.virtual == (2048, 2048, 2048)


# -- Fig. 3 style golden construction -------------------------------------------

FIG3_BLOCKS = [
    ((0, 0, 0), [1, 5, 2]),
    ((6, 0, 0), [3, 3, 2, 2]),
    ((3, 0, 0), [4, 3, 3]),
    ((10, 0, 0), [4, 4, 2, 4, 3, 3]),
]


def insert_1d(tree, x, vals):
    block = np.asarray(vals, dtype=np.uint8).reshape(1, 1, -1)
    return tree.insert_block(0, (x, 0, 0), block)


def fig3_tree(tmp_path, upto=4):
    tree = make_tree(tmp_path, (16, 1, 1), (4, 1, 1), threshold=1, bg=0,
                     name=f"fig3_{upto}")
    for origin, vals in FIG3_BLOCKS[:upto]:
        insert_1d(tree, origin[0], vals)
    return tree


def x_values(tree, node):
    return brick_values(tree, node)[0, 0, :, 0].tolist()


def test_golden_first_insertion(tmp_path):
    tree = fig3_tree(tmp_path, upto=1)
    left = tree.node_by_index(9)
    assert x_values(tree, left) == [1, 5, 2, 0]
    mid = tree.node_by_index(1)
    assert x_values(tree, mid) == [3, 1, 0, 0]
    assert x_values(tree, tree.root) == [2, 0, 0, 0]
    # nodes: root + 2 children + 2 grandchildren under the left child
    assert tree.node_count == 5
    assert tree.brick_count == 3  # left leaf, its parent, root


def test_golden_second_insertion_disjoint_regions(tmp_path):
    tree = fig3_tree(tmp_path, upto=2)
    assert x_values(tree, tree.node_by_index(10)) == [0, 0, 3, 3]
    assert x_values(tree, tree.node_by_index(17)) == [2, 2, 0, 0]
    assert tree.pruned_bricks == 0


def test_golden_third_insertion_prunes_two_bricks(tmp_path):
    tree = fig3_tree(tmp_path, upto=3)
    assert tree.pruned_bricks == 2
    leaf = tree.node_by_index(10)       # [4:8) = [3,3,3,3]
    parent = tree.node_by_index(1)      # level-1 left = [3,3,3,3]
    assert leaf.brick is None and leaf.avg == [3]
    assert parent.brick is None and parent.avg == [3]
    leftmost = tree.node_by_index(9)
    assert leftmost.brick is not None
    assert leftmost.smin == [1] and leftmost.smax == [5]
    assert x_values(tree, leftmost) == [1, 5, 2, 4]
    # the left subtree survives: leftmost leaf spread is not below threshold
    assert tree.node_by_index(1).children is not None


def test_golden_fourth_insertion_root_flagged_homogeneous(tmp_path):
    tree = fig3_tree(tmp_path, upto=4)
    root = tree.root
    assert x_values(tree, root) == [3, 3, 3, 3]
    per, overall = classify_homogeneous(root.smin, root.smax, tree.threshold)
    assert overall  # flagged homogeneous
    assert root.brick is not None  # but kept: the tree is not collapsible
    assert root.children is not None
    assert tree.pruned_bricks == 2
    assert tree.node_count == 7
    # right-half leaves hold the final data
    assert x_values(tree, tree.node_by_index(17)) == [2, 2, 4, 4]
    assert x_values(tree, tree.node_by_index(18)) == [2, 4, 3, 3]


def test_golden_events_are_recorded_in_order(tmp_path):
    tree = make_tree(tmp_path, (16, 1, 1), (4, 1, 1), threshold=1, bg=0)
    events = insert_1d(tree, 0, [1, 5, 2])
    kinds = [e.kind for e in events]
    assert ChangeKind.NODE_CREATED in kinds
    assert ChangeKind.NODE_UPDATED in kinds
    created = [e.node_index for e in events if e.kind == ChangeKind.NODE_CREATED]
    assert created == [1, 2, 9, 10]
    events = insert_1d(tree, 6, [3, 3, 2, 2])
    events = insert_1d(tree, 3, [4, 3, 3])
    # pruning produced updates, not deletions (nodes become AVG leaves)
    assert all(e.kind != ChangeKind.NODE_DELETED for e in events)


# -- invariants ------------------------------------------------------------------

def test_fully_background_insert_leaves_root_only(tmp_path):
    tree = make_tree(tmp_path, (16, 16, 16), (4, 4, 4), threshold=1, bg=0)
    tree.insert_block(0, (0, 0, 0), np.zeros((16, 16, 16), dtype=np.uint8))
    assert tree.node_count == 1
    assert tree.root.children is None
    assert tree.root.brick is None
    assert tree.brick_count == 0


def test_uniform_volume_collapses_to_average_root(tmp_path):
    tree = make_tree(tmp_path, (8, 8, 8), (4, 4, 4), threshold=2, bg=0)
    tree.insert_block(0, (0, 0, 0), np.full((8, 8, 8), 200, dtype=np.uint8))
    assert tree.node_count == 1
    assert tree.root.brick is None
    assert tree.root.avg == [200]
    assert tree.brick_count == 0


def test_idempotent_overwrite(tmp_path):
    rng = np.random.default_rng(5)
    vol = rng.integers(0, 255, size=(16, 16, 16), dtype=np.uint8)
    tree = make_tree(tmp_path, (16, 16, 16), (8, 8, 8), threshold=12)
    tree.insert_block(0, (0, 0, 0), vol)
    first = tree_digest(tree, tmp_path, "first")
    tree.insert_block(0, (4, 4, 4), vol[4:12, 4:12, 4:12])
    second = tree_digest(tree, tmp_path, "second")
    assert first == second


def test_order_independence_over_partitions(tmp_path):
    rng = np.random.default_rng(9)
    dims = (16, 16, 16)
    vol = rng.integers(0, 255, size=(16, 16, 16), dtype=np.uint8)
    vol[:, :8, :] = 0  # background half exercises prune/recreate paths

    def bulk():
        tree = make_tree(tmp_path, dims, (4, 4, 4), threshold=12, name="bulk")
        tree.insert_block(0, (0, 0, 0), vol)
        return tree

    def z_slices(order):
        tree = make_tree(tmp_path, dims, (4, 4, 4), threshold=12,
                         name=f"slices{order}")
        zs = list(range(16))
        if order:
            rng2 = np.random.default_rng(order)
            rng2.shuffle(zs)
        for z in zs:
            tree.insert_block(0, (0, 0, z), vol[z:z + 1])
        return tree

    def random_blocks(seed):
        tree = make_tree(tmp_path, dims, (4, 4, 4), threshold=12,
                         name=f"blocks{seed}")
        rng2 = np.random.default_rng(seed)
        cuts = sorted(set([0, 16] + list(rng2.integers(1, 16, size=3))))
        boxes = []
        for i in range(len(cuts) - 1):
            for j in range(len(cuts) - 1):
                for k in range(len(cuts) - 1):
                    boxes.append((cuts[i], cuts[i + 1], cuts[j], cuts[j + 1],
                                  cuts[k], cuts[k + 1]))
        rng2.shuffle(boxes)
        for x0, x1, y0, y1, z0, z1 in boxes:
            tree.insert_block(0, (x0, y0, z0), vol[z0:z1, y0:y1, x0:x1])
        return tree

    reference = tree_digest(bulk(), tmp_path, "d_bulk")
    assert tree_digest(z_slices(0), tmp_path, "d_s0") == reference
    assert tree_digest(z_slices(1), tmp_path, "d_s1") == reference
    assert tree_digest(random_blocks(2), tmp_path, "d_b2") == reference
    assert tree_digest(random_blocks(3), tmp_path, "d_b3") == reference


def test_memory_bound_without_pruning(tmp_path):
    rng = np.random.default_rng(1)
    vol = rng.integers(0, 255, size=(32, 32, 32), dtype=np.uint8)
    tree = make_tree(tmp_path, (32, 32, 32), (8, 8, 8), threshold=0)
    tree.insert_block(0, (0, 0, 0), vol)
    payload_voxels = tree.brick_count * 8 ** 3
    assert payload_voxels <= (8 / 7) * 32 ** 3
    assert tree.brick_count == 64 + 8 + 1


def test_virtual_padding_allocates_no_bricks(tmp_path):
    rng = np.random.default_rng(2)
    vol = rng.integers(1, 255, size=(16, 16, 20), dtype=np.uint8)
    tree = make_tree(tmp_path, (20, 16, 16), (8, 16, 16), threshold=0)
    assert tree.geometry.virtual == (32, 16, 16)
    tree.insert_block(0, (0, 0, 0), vol)
    for node in tree.iter_nodes():
        if node.box_lo[0] >= 24:
            assert node.brick is None
            assert node.avg == [0]
    # 3 in-volume leaves + 2 level-1 nodes + root
    assert tree.brick_count == 6


def test_root_reachability_between_insertions(tmp_path):
    rng = np.random.default_rng(3)
    tree = make_tree(tmp_path, (16, 16, 16), (4, 4, 4), threshold=12)
    for _ in range(5):
        origin = rng.integers(0, 8, size=3)
        size = rng.integers(1, 8, size=3)
        block = rng.integers(0, 255, size=tuple(reversed(size)), dtype=np.uint8)
        tree.insert_block(0, tuple(origin), block)
        for point in rng.uniform(0, 16, size=(20, 3)):
            node = tree.find_node(tuple(point))
            ext = tree.geometry.node_extent(node.level)
            for a in range(3):
                assert node.box_lo[a] <= point[a] < node.box_lo[a] + ext[a]


def test_pruning_soundness(tmp_path):
    rng = np.random.default_rng(4)
    vol = rng.integers(0, 255, size=(16, 16, 16), dtype=np.uint8)
    vol[:8, :8, :8] = rng.integers(100, 104, size=(8, 8, 8), dtype=np.uint8)
    tree = make_tree(tmp_path, (16, 16, 16), (4, 4, 4), threshold=10)
    tree.insert_block(0, (0, 0, 0), vol)
    pruned = [n for n in tree.iter_nodes()
              if n.brick is None and n.in_volume and n.children is None
              and n is not tree.root]
    assert pruned, "fixture should produce pruned regions"
    for node in pruned:
        scale = tree.geometry.level_scale(node.level)
        m = tree.geometry.brick_dims
        lo = node.box_lo
        hi = [min(lo[a] + m[a] * scale[a], 16) for a in range(3)]
        region = vol[lo[2]:hi[2], lo[1]:hi[1], lo[0]:hi[0]]
        assert np.all(np.abs(region.astype(int) - node.avg[0]) < tree.threshold)


def test_recreated_brick_seeds_with_stored_average(tmp_path):
    tree = make_tree(tmp_path, (8, 1, 1), (4, 1, 1), threshold=3, bg=0)
    insert_1d_vals = np.asarray([50, 51, 50, 51], dtype=np.uint8).reshape(1, 1, 4)
    tree.insert_block(0, (0, 0, 0), insert_1d_vals)
    left = tree.node_by_index(1)
    assert left.brick is None and left.avg == [51]  # 50.5 rounds half up
    tree.insert_block(0, (0, 0, 0), np.asarray([99], dtype=np.uint8).reshape(1, 1, 1))
    left = tree.node_by_index(1)
    assert x_values(tree, left) == [99, 51, 51, 51]


# -- border fill -------------------------------------------------------------------

def test_fill_borders_copies_neighbor_faces(tmp_path):
    tree = make_tree(tmp_path, (8, 1, 1), (4, 1, 1), threshold=0, bg=0)
    tree.insert_block(0, (0, 0, 0),
                      np.asarray([1, 3, 5, 7], dtype=np.uint8).reshape(1, 1, 4))
    tree.insert_block(0, (4, 0, 0),
                      np.asarray([9, 11, 13, 15], dtype=np.uint8).reshape(1, 1, 4))
    tree.finalize()
    tree.fill_borders()
    a = tree.node_by_index(1)
    b = tree.node_by_index(2)
    a_data = tree.store.read_brick(a.brick)
    b_data = tree.store.read_brick(b.brick)
    assert a_data[1, 1, 5, 0] == 9    # A's right border = B's first voxel
    assert b_data[1, 1, 0, 0] == 7    # B's left border = A's last voxel
    assert a_data[1, 1, 0, 0] == 0    # volume face -> background


def test_fill_borders_uses_neighbor_average_when_pruned(tmp_path):
    tree = make_tree(tmp_path, (8, 1, 1), (4, 1, 1), threshold=2, bg=0)
    tree.insert_block(0, (0, 0, 0),
                      np.asarray([1, 9, 1, 9], dtype=np.uint8).reshape(1, 1, 4))
    tree.insert_block(0, (4, 0, 0),
                      np.asarray([6, 6, 6, 6], dtype=np.uint8).reshape(1, 1, 4))
    right = tree.node_by_index(2)
    assert right.brick is None and right.avg == [6]
    tree.fill_borders()
    a_data = tree.store.read_brick(tree.node_by_index(1).brick)
    assert a_data[1, 1, 5, 0] == 6


def test_fill_borders_idempotent(tmp_path):
    rng = np.random.default_rng(6)
    vol = rng.integers(0, 255, size=(8, 8, 8), dtype=np.uint8)
    tree = make_tree(tmp_path, (8, 8, 8), (4, 4, 4), threshold=0)
    tree.insert_block(0, (0, 0, 0), vol)
    tree.fill_borders()
    first = tree_digest(tree, tmp_path, "borders1")
    tree.fill_borders()
    assert tree_digest(tree, tmp_path, "borders2") == first
