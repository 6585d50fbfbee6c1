import numpy as np
import pytest

from llcdro import datagen as dg


def one_group(n=3, stddev=1e-300, cls=0):
    return dg.DatasetSpec(
        subpops=(dg.SubpopSpec(cls, 0, n, (1.0, 2.0), (3.0,), stddev),),
        d_core=2, d_spur=1, seed=7,
    )


def test_zero_variance_rows_equal_mean():
    ds = dg.generate(one_group())
    np.testing.assert_allclose(ds.features, np.tile([1.0, 2.0, 3.0], (3, 1)))
    assert (ds.true_labels == 0).all() and not ds.corrupted.any()


def test_generate_is_deterministic():
    sc = dg.waterbirds_like(seed=3)
    a, b = dg.generate(sc.train), dg.generate(sc.train)
    assert a.features.tobytes() == b.features.tobytes()
    assert (a.group_ids == b.group_ids).all() and (a.true_labels == b.true_labels).all()


def test_generate_counts_and_shapes():
    sc = dg.waterbirds_like(seed=0)
    ds = dg.generate(sc.train)
    assert len(ds) == 2000 == sc.train.n_samples
    assert ds.features.shape == (2000, sc.train.dim)
    assert ds.group_sizes() == {0: 950, 1: 50, 2: 950, 3: 50}
    for g, c in [(0, 0), (1, 0), (2, 1), (3, 1)]:
        assert (ds.true_labels[ds.group_ids == g] == c).all()


@pytest.mark.parametrize("bad", [
    dict(subpops=()),
    dict(stddev=0.0),
    dict(stddev=-1.0),
    dict(n=0),
    dict(dup=True),
])
def test_invalid_specs_rejected(bad):
    if "subpops" in bad:
        spec = dg.DatasetSpec((), 1, 1)
    elif "dup" in bad:
        s = dg.SubpopSpec(0, 0, 5, (0.0,), (0.0,), 1.0)
        spec = dg.DatasetSpec((s, dg.SubpopSpec(1, 0, 5, (1.0,), (0.0,), 1.0)), 1, 1)
    else:
        spec = dg.DatasetSpec(
            (dg.SubpopSpec(0, 0, bad.get("n", 5), (0.0,), (0.0,), bad.get("stddev", 1.0)),), 1, 1)
    with pytest.raises(dg.SpecError):
        dg.generate(spec)


def test_class_without_group_rejected():
    spec = dg.DatasetSpec((dg.SubpopSpec(1, 0, 5, (0.0,), (0.0,), 1.0),), 1, 1)
    with pytest.raises(dg.SpecError):
        spec.validate()


def test_waterbirds_spurious_only_classifier():
    """Least squares on the spurious block alone: right on heads, wrong on tails."""
    sc = dg.waterbirds_like(seed=0)
    ds = dg.generate(sc.train)
    s = ds.features[:, sc.train.d_core:]
    A = np.hstack([s, np.ones((len(ds), 1))])
    coef, *_ = np.linalg.lstsq(A, 2.0 * ds.true_labels - 1.0, rcond=None)
    pred = (A @ coef > 0).astype(int)
    acc = {g: (pred[ds.group_ids == g] == ds.true_labels[ds.group_ids == g]).mean() for g in range(4)}
    assert acc[0] >= 0.9 and acc[2] >= 0.9
    assert acc[1] <= 0.1 and acc[3] <= 0.1


def test_heads_share_spurious_mean_with_opposite_tails():
    sc = dg.waterbirds_like()
    sp = {s.group_id: s.spurious_mean for s in sc.train.subpops}
    assert sp[0] == sp[3] and sp[2] == sp[1] and sp[0] != sp[2]


# -- noise -----------------------------------------------------------------

@pytest.fixture
def clean_ds():
    return dg.generate(dg.waterbirds_like(seed=1).train)


def test_zero_rate_is_identity(clean_ds):
    out = dg.inject_noise(clean_ds, dg.NoiseSpec("symmetric", 0.0), np.random.default_rng(0))
    assert (out.noisy_labels == out.true_labels).all() and not out.corrupted.any()


def test_symmetric_exact_count():
    spec = dg.DatasetSpec((dg.SubpopSpec(0, 0, 500, (0.0,), (0.0,), 1.0),
                           dg.SubpopSpec(1, 1, 500, (1.0,), (0.0,), 1.0)), 1, 1)
    ds = dg.generate(spec)
    out = dg.inject_noise(ds, dg.NoiseSpec("symmetric", 0.3), np.random.default_rng(5))
    assert out.corrupted.sum() == 300
    assert (out.corrupted == (out.noisy_labels != out.true_labels)).all()


def test_noise_overwrites_from_true_labels(clean_ds):
    rng = np.random.default_rng(2)
    once = dg.inject_noise(clean_ds, dg.NoiseSpec("symmetric", 0.4), rng)
    twice = dg.inject_noise(once, dg.NoiseSpec("symmetric", 0.1), rng)
    assert twice.corrupted.sum() == round(0.1 * len(clean_ds))


def test_asymmetric_identity_transition(clean_ds):
    out = dg.inject_noise(clean_ds, dg.NoiseSpec("asymmetric", 0.0, ((1.0, 0.0), (0.0, 1.0))),
                          np.random.default_rng(0))
    assert not out.corrupted.any()


def test_asymmetric_follows_transition():
    spec = dg.DatasetSpec((dg.SubpopSpec(0, 0, 20000, (0.0,), (0.0,), 1.0),
                           dg.SubpopSpec(1, 1, 10, (0.0,), (0.0,), 1.0),
                           dg.SubpopSpec(2, 2, 10, (0.0,), (0.0,), 1.0)), 1, 1)
    ds = dg.generate(spec)
    T = ((0.6, 0.3, 0.1), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    out = dg.inject_noise(ds, dg.NoiseSpec("asymmetric", 0.0, T), np.random.default_rng(1))
    frac = np.bincount(out.noisy_labels[out.true_labels == 0], minlength=3) / 20000
    np.testing.assert_allclose(frac, T[0], atol=0.015)


def test_asymmetric_requires_transition(clean_ds):
    with pytest.raises(dg.SpecError):
        dg.inject_noise(clean_ds, dg.NoiseSpec("asymmetric", 0.2), np.random.default_rng(0))


def test_transition_rows_must_sum_to_one(clean_ds):
    with pytest.raises(dg.SpecError):
        dg.inject_noise(clean_ds, dg.NoiseSpec("asymmetric", 0.0, ((0.5, 0.4), (0.0, 1.0))),
                        np.random.default_rng(0))


def test_symmetric_flip_is_uniform_over_other_classes():
    """10k single-sample trials; each wrong class within 3 sigma of the multinomial mean."""
    c, trials = 4, 10_000
    spec = dg.DatasetSpec(tuple(dg.SubpopSpec(j, j, 1, (0.0,), (0.0,), 1.0) for j in range(c)), 1, 1)
    ds = dg.generate(spec)
    rng = np.random.default_rng(11)
    hits = np.zeros(c, dtype=int)
    src = int(np.nonzero(ds.true_labels == 0)[0][0])
    for _ in range(trials):
        out = dg.inject_noise(ds, dg.NoiseSpec("symmetric", 1.0), rng)
        hits[out.noisy_labels[src]] += 1
    assert hits[0] == 0
    p = 1.0 / (c - 1)
    sd = np.sqrt(trials * p * (1 - p))
    assert np.all(np.abs(hits[1:] - trials * p) <= 3 * sd)


def test_include_self_can_keep_label():
    spec = dg.DatasetSpec((dg.SubpopSpec(0, 0, 3000, (0.0,), (0.0,), 1.0),
                           dg.SubpopSpec(1, 1, 3000, (0.0,), (0.0,), 1.0)), 1, 1)
    ds = dg.generate(spec)
    out = dg.inject_noise(ds, dg.NoiseSpec("symmetric", 1.0, include_self=True), np.random.default_rng(0))
    assert 0.45 < out.corrupted.mean() < 0.55


# -- augmentation ----------------------------------------------------------

def test_weak_zero_sigma_identity():
    x = np.array([1.0, -2.0, 3.5])
    np.testing.assert_array_equal(dg.augment_weak(x, np.random.default_rng(0), 0.0), x)


def test_strong_full_drop_zero():
    x = np.array([1.0, -2.0, 3.5])
    np.testing.assert_array_equal(dg.augment_strong(x, np.random.default_rng(0), 0.0, 1.0), 0.0)


def test_augmentation_deterministic_given_rng_state():
    x = np.arange(5.0)
    a = dg.augment_strong(x, np.random.default_rng(9), 0.3, 0.2)
    b = dg.augment_strong(x, np.random.default_rng(9), 0.3, 0.2)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(dg.augment_weak(x, np.random.default_rng(4), 0.1),
                                  dg.augment_weak(x, np.random.default_rng(4), 0.1))


def test_strong_is_noisier_than_weak():
    x = np.zeros((4000, 3))
    w = dg.augment_weak(x, np.random.default_rng(0), 0.05)
    s = dg.augment_strong(x, np.random.default_rng(0), 0.2, 0.0)
    assert s.std() > 3 * w.std()


# -- csv round trip ---------------------------------------------------------

def test_csv_roundtrip(tmp_path, clean_ds):
    ds = dg.inject_noise(clean_ds, dg.NoiseSpec("symmetric", 0.25), np.random.default_rng(0))
    path = tmp_path / "d.csv"
    dg.save_csv(ds, path)
    back = dg.load_csv(path)
    assert back.features.tobytes() == ds.features.tobytes()
    for name in ("noisy_labels", "true_labels", "group_ids", "corrupted"):
        assert (getattr(back, name) == getattr(ds, name)).all()
    header = path.read_text().splitlines()[0].split(",")
    assert header[0] == "f0" and header[-4:] == ["noisy_label", "true_label", "group_id", "corrupted"]
    assert "dataset_spec" in back.meta and back.meta["noise_spec"]["rate"] == 0.25


def test_spec_dict_roundtrip():
    sc = dg.waterbirds_like(seed=4)
    assert dg.Scenario.from_dict(sc.to_dict()) == sc
