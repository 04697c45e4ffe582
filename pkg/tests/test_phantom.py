import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spiralforge import phantom, trajgen
from spiralforge.errors import EmptySplit, InvalidDims, ShapeMismatch
from spiralforge.phantom import PhantomSpec


@pytest.fixture(scope="module")
def cine():
    return phantom.generate_cine(PhantomSpec(5, period_frames=8), 20, 40, 40)


def test_cine_range_and_determinism(cine):
    d = cine.data
    assert d.shape == (20, 40, 40)
    assert d.max() == 1.0 and d.min() >= 0.0
    again = phantom.generate_cine(PhantomSpec(5, period_frames=8), 20, 40, 40)
    assert again.data.tobytes() == d.tobytes()
    cine.check_ground_truth()


def test_cine_is_periodic_and_moving(cine):
    d = cine.data
    assert np.abs(d[3] - d[3 + 8]).max() < 1e-6
    assert np.abs(d[0] - d[4]).max() > 0.1


def test_different_seeds_differ():
    a = phantom.generate_cine(PhantomSpec(1), 5, 32, 32).data
    b = phantom.generate_cine(PhantomSpec(2), 5, 32, 32).data
    assert not np.allclose(a, b)


def test_cine_dims_checked():
    with pytest.raises(InvalidDims):
        phantom.generate_cine(PhantomSpec(0), 4, 32, 32)


def test_coil_maps():
    maps = phantom.coil_maps(8, 32, 32, seed=3).data
    rss = np.sqrt((np.abs(maps) ** 2).sum(0))
    assert rss.min() >= 0.5 and rss.max() <= 2.0
    assert np.array_equal(maps, phantom.coil_maps(8, 32, 32, seed=3).data)
    # distinct phases across coils
    assert np.std(np.angle(maps[:, 16, 16])) > 0.1
    single = phantom.coil_maps(1, 16, 16, seed=0).data
    assert single.shape == (1, 16, 16)
    assert np.allclose(np.abs(single), 1.0)
    with pytest.raises(InvalidDims):
        phantom.coil_maps(0, 8, 8)


def test_transition_sequence():
    a = np.ones((12, 8, 8)) * np.arange(12)[:, None, None]
    b = -a
    seq = phantom.transition_sequence(a, b).data
    assert np.array_equal(seq[:5], a[:5])
    assert np.array_equal(seq[5:], b[5:])
    assert np.array_equal(phantom.transition_sequence(a, a).data, a)
    assert np.array_equal(phantom.transition_sequence(a, b, switch_frame=1).data, b)
    with pytest.raises(ShapeMismatch):
        phantom.transition_sequence(a, np.zeros((12, 8, 9)))
    with pytest.raises(ShapeMismatch):
        phantom.transition_sequence(a, b, switch_frame=13)


def test_final_split_counts_and_disjointness():
    s = phantom.split_indices(100)
    assert {k: len(v) for k, v in s.items()} == {"train": 75, "val": 10, "test": 15}
    allidx = np.concatenate(list(s.values()))
    assert len(np.unique(allidx)) == 100


def test_search_split_nests_in_final_train():
    search = phantom.split_indices(100, phantom.SEARCH_SPLIT, seed=4)
    final = phantom.split_indices(100, phantom.FINAL_SPLIT, seed=4)
    assert (len(search["train"]), len(search["val"])) == (30, 10)
    used = np.concatenate([search["train"], search["val"]])
    assert set(used) <= set(final["train"])
    assert not set(used) & set(final["test"])


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 400), st.integers(0, 1000))
def test_splits_stable_and_disjoint(n, seed):
    a = phantom.split_indices(n, seed=seed)
    b = phantom.split_indices(n, seed=seed)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    idx = np.concatenate(list(a.values()))
    assert len(idx) == len(np.unique(idx))
    assert idx.min() >= 0 and idx.max() < n


def test_empty_split_errors():
    with pytest.raises(EmptySplit):
        phantom.split_indices(3)
    with pytest.raises(EmptySplit):
        phantom.split_indices(10, {"train": 0.8, "val": 0.4})


def test_dataset_pairs_are_aligned_and_trajectory_independent():
    system = trajgen.desk_system()
    ph = phantom.make_phantoms(20, seed=2, T=5, H=32, W=32, n_coils=2)
    radial = phantom.build_dataset(20, trajgen.radial_trajectory(system, 9, 5), phantoms=ph, seed=2)
    spiral = phantom.build_dataset(20, trajgen.uniform_spiral(system, n_frames=5), phantoms=ph, seed=2)
    for k in radial:
        assert np.array_equal(radial[k].ids, spiral[k].ids)
        assert radial[k].gridded.shape == radial[k].truth.shape
        assert np.array_equal(radial[k].truth, ph.truth[radial[k].ids])
        assert radial[k].gridded.min() >= 0


def test_dataset_save_load(tmp_path):
    ph = phantom.make_phantoms(4, seed=1, T=5, H=16, W=16, n_coils=2)
    splits = {"train": np.array([0, 2]), "test": np.array([1, 3])}
    grid = {"uni": np.random.default_rng(0).random((4, 5, 16, 16))}
    phantom.save_dataset(tmp_path, ph, splits, grid)
    back, s2, g2 = phantom.load_dataset(tmp_path)
    assert np.array_equal(back.truth, ph.truth.astype(np.float32))
    assert back.specs == ph.specs
    assert np.array_equal(s2["test"], splits["test"])
    assert np.allclose(g2["uni"], grid["uni"], atol=1e-7)
