import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xdomainmix import data


def probe_accuracy(train_x, train_y, test_x, test_y):
    """Least-squares linear probe with a bias column, targets +-1."""
    a = np.hstack([train_x, np.ones((len(train_x), 1))])
    w, *_ = np.linalg.lstsq(a, 2.0 * train_y - 1.0, rcond=None)
    pred = np.hstack([test_x, np.ones((len(test_x), 1))]) @ w > 0
    return float(np.mean(pred == test_y))


def nuisance(bundle, split):
    x, y, _ = bundle.select(split)
    return x[:, 2:], y


def test_perfect_agreement_makes_nuisance_linearly_sufficient():
    spec = data.SpuriousBlobsSpec(spurious_p=(1.0, 1.0, 1.0), test_spurious_p=0.0, samples_per_domain=500)
    b = data.gen_spurious_blobs(spec, np.random.default_rng(0))
    xtr, ytr = nuisance(b, "train")
    assert probe_accuracy(xtr, ytr, xtr, ytr) == 1.0
    xte, yte = nuisance(b, "test")
    assert probe_accuracy(xtr, ytr, xte, yte) <= 0.5


def test_same_seed_is_bitwise_identical():
    a = data.make_dataset("spurious_blobs", {"samples_per_domain": 200}, 4)
    b = data.make_dataset("spurious_blobs", {"samples_per_domain": 200}, 4)
    for f in ("x", "y", "domain", "split"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    assert a.content_hash() == b.content_hash()
    c = data.make_dataset("spurious_blobs", {"samples_per_domain": 200}, 5)
    assert a.content_hash() != c.content_hash()


@pytest.mark.parametrize("kind", sorted(data.DATASETS))
def test_bundles_have_no_leakage_and_balanced_classes(kind):
    b = data.make_dataset(kind, {"samples_per_domain": 600}, 1)
    assert data.check_no_leakage(b)
    for d in range(b.num_domains + 1):
        y = b.y[b.domain == d]
        n = len(y)
        for c in range(b.num_classes):
            freq = np.mean(y == c)
            sigma = np.sqrt((1 / b.num_classes) * (1 - 1 / b.num_classes) / n)
            assert abs(freq - 1 / b.num_classes) <= 3 * sigma


def test_leakage_check_detects_duplicates():
    b = data.make_dataset("spurious_blobs", {"samples_per_domain": 100}, 0)
    x = b.x.copy()
    x[np.flatnonzero(b.split == "test")[0]] = x[0]
    leaky = data.DatasetBundle(x, b.y, b.domain, b.split, b.num_classes, b.num_domains, "leaky")
    assert not data.check_no_leakage(leaky)


def test_validation_split_is_twenty_percent_per_cell():
    b = data.make_dataset("spurious_blobs", {"samples_per_domain": 1000}, 2)
    for d in range(b.num_domains):
        for c in range(b.num_classes):
            cell = (b.domain == d) & (b.y == c)
            assert np.sum(cell & (b.split == "val")) == round(0.2 * cell.sum())
    assert set(b.split[b.domain == b.num_domains]) == {"test"}


def test_moons_rotation_symmetry_and_zero_noise():
    spec0 = data.RotatedMoonsSpec(angles_deg=(0.0, 45.0), test_angle_deg=180.0, noise=0.0, samples_per_domain=200)
    b = data.gen_rotated_moons(spec0, np.random.default_rng(0))
    x0 = b.x[b.domain == 0]
    y0 = b.y[b.domain == 0]
    # points lie on the centred canonical arcs
    shifted = x0 + np.array([0.5, 0.25])
    upper = shifted[y0 == 0]
    lower = shifted[y0 == 1] - np.array([1.0, 0.5])
    np.testing.assert_allclose(np.linalg.norm(upper, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(lower, axis=1), 1.0, atol=1e-12)
    rng = np.random.default_rng(3)
    pts, _ = data.canonical_moons(50, rng)
    centred = pts - np.array([0.5, 0.25])
    np.testing.assert_allclose(centred @ data.rotation(180.0).T, -centred, atol=1e-12)


def test_moons_angles_must_be_distinct():
    with pytest.raises(ValueError):
        data.RotatedMoonsSpec(angles_deg=(0.0, 360.0))


def test_blobs_spec_validation():
    with pytest.raises(ValueError):
        data.SpuriousBlobsSpec(spurious_p=(0.9,), nuisance_offsets=(0.0,), nuisance_scales=(1.0,))
    with pytest.raises(ValueError):
        data.SpuriousBlobsSpec(spurious_p=(1.2, 0.9, 0.8))
    with pytest.raises(ValueError):
        data.make_dataset("mnist")


def test_batches_are_domain_balanced_and_cover_the_epoch():
    b = data.make_dataset("spurious_blobs", {"samples_per_domain": 100}, 0)
    stream = data.make_batches(b, 30, np.random.default_rng(0))
    per_domain = np.sum((b.split == "train") & (b.domain == 0))
    seen = []
    for _ in range(per_domain // 10):
        batch = next(stream)
        np.testing.assert_array_equal(np.bincount(batch.domain, minlength=3), [10, 10, 10])
        assert set(b.split[batch.index]) == {"train"}
        seen.extend(batch.index.tolist())
    assert set(seen) == set(np.flatnonzero(b.split == "train"))


def test_batches_are_deterministic_across_reshuffles():
    b = data.make_dataset("spurious_blobs", {"samples_per_domain": 50}, 0)
    s1 = data.make_batches(b, 9, np.random.default_rng(7))
    s2 = data.make_batches(b, 9, np.random.default_rng(7))
    for _ in range(20):
        np.testing.assert_array_equal(next(s1).index, next(s2).index)


def test_indivisible_batch_size_raises():
    b = data.make_dataset("spurious_blobs", {"samples_per_domain": 50}, 0)
    with pytest.raises(ValueError):
        next(data.make_batches(b, 32, np.random.default_rng(0)))


@given(st.integers(0, 1000))
def test_csv_round_trip(tmp_path_factory, seed):
    b = data.make_dataset("rotated_moons", {"samples_per_domain": 20}, seed)
    path = tmp_path_factory.mktemp("csv") / "d.csv"
    data.dump_csv(b, path)
    back = data.load_csv(path, b.num_classes)
    for f in ("x", "y", "domain", "split"):
        np.testing.assert_array_equal(getattr(back, f), getattr(b, f))
    assert back.num_domains == b.num_domains
    assert path.read_text().splitlines()[0] == "x_0,x_1,y,domain,split"
