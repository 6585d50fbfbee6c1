import inspect
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from llcdro import datagen as dg
from llcdro import model as mdl
from llcdro import robust_train as rt


def small_data(seed=0, n=120, d=4):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.normal(size=(n, d)) + 1.5 * y[:, None]
    return dg.NoisyData(x, y, 2)


def tensors_bytes(state):
    return [t.tobytes() for p in state.params for t in p.tensors()]


def test_stream_names_are_independent():
    a = rt.stream(0, "shuffle").random(5)
    b = rt.stream(0, "augment").random(5)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, rt.stream(0, "shuffle").random(5))


def test_refurbish_examples():
    np.testing.assert_array_equal(rt.refurbish([1, 0], [0.2, 0.8], 1.0), [1, 0])
    np.testing.assert_array_equal(rt.refurbish([1, 0], [0.2, 0.8], 0.0), [0.2, 0.8])
    np.testing.assert_allclose(rt.refurbish([1, 0], [0.0, 1.0], 0.5), [0.5, 0.5])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 6).flatmap(lambda c: st.tuples(
    st.integers(0, c - 1), st.lists(st.floats(1e-3, 1), min_size=c, max_size=c), st.floats(0, 1))))
def test_refurbish_is_a_distribution(case):
    label, raw, w = case
    c = len(raw)
    pseudo = np.array(raw) / sum(raw)
    y = rt.refurbish(rt.one_hot(np.array([label]), c)[0], pseudo, w)
    assert (y >= 0).all() and abs(y.sum() - 1) <= 1e-12


def brute_top_tau(losses, tau):
    n = len(losses)
    m = max(1, int(np.floor(n * tau / 100 + 1e-9)))
    best = None
    for subset in itertools.combinations(range(n), m):   # lexicographic order
        total = sum(losses[i] for i in subset)
        # ties on the sum resolve to the lexicographically smallest index set
        if best is None or total > best[0]:
            best = (total, subset)
    return list(best[1])


def test_select_top_tau_matches_exhaustive_search():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(1, 13))
        losses = rng.integers(0, 4, n).astype(float)     # frequent ties
        tau = float(rng.choice([10, 25, 50, 60, 70, 80, 90, 100, rng.uniform(1, 100)]))
        assert list(rt.select_top_tau(losses, tau)) == brute_top_tau(losses, tau)


def test_select_top_tau_examples():
    assert list(rt.select_top_tau([0.1, 0.9, 0.5, 0.3], 50)) == [1, 2]
    assert list(rt.select_top_tau([3.0, 1.0, 2.0], 100)) == [0, 1, 2]
    assert list(rt.select_top_tau([3.0, 1.0, 2.0], 1)) == [0]
    assert list(rt.select_top_tau([1.0] * 4, 50)) == [0, 1]


def test_pseudo_label_ensemble_mean():
    rng = np.random.default_rng(0)
    a, b = mdl.init(3, 5, 2, rng), mdl.init(3, 5, 2, rng)
    x = rng.normal(size=(4, 3))
    np.testing.assert_allclose(rt.pseudo_label([a, b], x),
                               (mdl.predict_proba(a, x) + mdl.predict_proba(b, x)) / 2)
    np.testing.assert_array_equal(rt.pseudo_label([a], x), mdl.predict_proba(a, x))


def test_config_validation_and_round_trip():
    cfg = rt.TrainConfig(k=7, tau=80)
    assert rt.TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        rt.TrainConfig.from_dict({"bogus": 1})
    for bad in (dict(tau=0), dict(tau=101), dict(k=0), dict(batch_size=0), dict(epochs=-1)):
        with pytest.raises(ValueError):
            rt.TrainConfig(**bad).validate()


def degraded_cfg(**kw):
    base = dict(tau=100, sigma_w=0.0, sigma_s=0.0, p_drop=0.0, co_training=False, batch_size=16)
    base.update(kw)
    return rt.TrainConfig(**base)


def test_degradation_identity_bit_exact():
    data = small_data()
    cfg = degraded_cfg()
    scale = dg.feature_scale(data.features)
    a, b = rt.init_state(4, 2, cfg), rt.init_state(4, 2, cfg)
    sa, sb = rt.stream(0, "shuffle"), rt.stream(0, "shuffle")
    aug_a, aug_b = rt.stream(0, "augment"), rt.stream(0, "augment")
    ones = [np.ones(len(data))]
    for _ in range(3):
        rt.erm_epoch(a, data, cfg, sa, aug_a, scale)
        rt.robust_train_epoch(b, data, ones, cfg, sb, aug_b, scale)
        assert tensors_bytes(a) == tensors_bytes(b)


def test_full_tau_keeps_every_sample():
    data = small_data()
    cfg = rt.TrainConfig(tau=100, co_training=False, batch_size=16)
    state = rt.init_state(4, 2, cfg)
    _, frac = rt.robust_train_epoch(state, data, [np.full(len(data), 0.5)], cfg,
                                    rt.stream(0, "shuffle"), rt.stream(0, "augment"),
                                    dg.feature_scale(data.features))
    assert frac == 1.0


def test_selected_fraction_matches_tau():
    data = small_data()
    cfg = rt.TrainConfig(tau=60, co_training=False, batch_size=20)
    state = rt.init_state(4, 2, cfg)
    _, frac = rt.robust_train_epoch(state, data, [np.ones(len(data))], cfg,
                                    rt.stream(0, "shuffle"), rt.stream(0, "augment"),
                                    dg.feature_scale(data.features))
    assert frac == pytest.approx(0.6)


def test_robust_epoch_rejects_mismatched_confidence():
    data = small_data()
    cfg = rt.TrainConfig()
    state = rt.init_state(4, 2, cfg)
    with pytest.raises(ValueError):
        rt.robust_train_epoch(state, data, [np.ones(len(data))], cfg, rt.stream(0, "shuffle"),
                              rt.stream(0, "augment"), np.ones(4))


def test_zero_robust_epochs_equals_erm():
    data = small_data()
    a = rt.train(data, rt.TrainConfig(warmup_epochs=3, epochs=0, co_training=False))
    state = rt.init_state(4, 2, rt.TrainConfig(co_training=False))
    cfg = rt.TrainConfig(co_training=False)
    sh, au, sc = rt.stream(0, "shuffle"), rt.stream(0, "augment"), dg.feature_scale(data.features)
    for _ in range(3):
        rt.erm_epoch(state, data, cfg, sh, au, sc)
    assert tensors_bytes(a.state) == tensors_bytes(state)


def test_train_deterministic():
    data = small_data(n=100)
    cfg = rt.TrainConfig(warmup_epochs=1, epochs=2, k=5, batch_size=25)
    a, b = rt.train(data, cfg), rt.train(data, cfg)
    assert tensors_bytes(a.state) == tensors_bytes(b.state)
    assert a.history == b.history


def test_seed_swap_symmetry():
    data = small_data(n=100)
    base = dict(warmup_epochs=1, epochs=2, k=5, batch_size=25)
    a = rt.train(data, rt.TrainConfig(init_seed_a=11, init_seed_b=22, **base)).state
    b = rt.train(data, rt.TrainConfig(init_seed_a=22, init_seed_b=11, **base)).state
    assert tensors_bytes(a)[:4] == tensors_bytes(b)[4:] and tensors_bytes(a)[4:] == tensors_bytes(b)[:4]


def test_co_training_cross_assigns_confidence():
    data = small_data(n=100)
    cfg = rt.TrainConfig(warmup_epochs=1, epochs=1, k=5, batch_size=25)
    seen = []

    def hook(info):
        if info.phase == "robust":
            seen.append(info.state.confidences)
        return {}

    res = rt.train(data, cfg, on_epoch=hook)
    assert len(res.state.params) == 2 and len(seen) == 1
    # replay: the confidence assigned to model 0 is the one model 1 produced before the epoch
    warm = rt.train(data, rt.TrainConfig(warmup_epochs=1, epochs=0, k=5, batch_size=25)).state
    own1 = rt.estimate_confidence(warm.params[1], data, cfg)
    np.testing.assert_array_equal(seen[0][0].w, own1.w)


def test_best_snapshot_tracks_validation():
    data = small_data(n=100)
    valid = (data.features, data.noisy_labels)
    res = rt.train(data, rt.TrainConfig(warmup_epochs=2, epochs=2, k=5, batch_size=25), valid)
    vals = [h["val_accuracy"] for h in res.history]
    assert res.best_epoch == 1 + int(np.argmax(vals))
    assert float((res.best.predict(valid[0]) == valid[1]).mean()) == max(vals)


def test_train_never_sees_hidden_fields():
    fields = set(inspect.signature(dg.NoisyData).parameters)
    assert fields == {"features", "noisy_labels", "n_classes"}
    full = dg.generate(dg.waterbirds_like(seed=0).train)
    with pytest.raises(TypeError):
        rt.train(full, rt.TrainConfig(warmup_epochs=1, epochs=0))
    view = full.training_view()
    assert not hasattr(view, "true_labels") and not hasattr(view, "group_ids")


def test_loss_based_confidence_flag():
    data = small_data(n=100)
    cfg = rt.TrainConfig(use_llc=False, co_training=False)
    params = rt.init_state(4, 2, cfg).params[0]
    state = rt.estimate_confidence(params, data, cfg)
    losses = rt.per_sample_losses(params, data)
    # loss-based scores are the flipped min-max losses
    np.testing.assert_allclose(state.scores, (losses.max() - losses) / (losses.max() - losses.min()))
