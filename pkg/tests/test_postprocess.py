import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import chi2

from owseg import synth
from owseg.core import validate_pair
from owseg.descriptors import DescriptorBank
from owseg.errors import EmptyBank, ShapeMismatch
from owseg.postprocess import (
    DiscoveryConfig,
    DiscoveryState,
    PipelineConfig,
    cluster_offsets,
    decide_unknown_contrastive,
    decide_unknown_semantic,
    discover_classes,
    filter_instances_by_semantics,
    fuse_unknown,
    run_pipeline,
    score_against_bank,
)


def unit_bank(means):
    means = np.asarray(means, float)
    return DescriptorBank.from_moments(means, np.ones_like(means), np.full(len(means), 100), True)


# scoring -----------------------------------------------------------------


def test_score_at_mean_and_analytic_value():
    bank = unit_bank([[0.0, 0.0], [5.0, 5.0]])
    s = score_against_bank(np.array([[[5.0, 5.0], [1.0, 1.0]]]), bank)
    assert s.best_class.tolist() == [[1, 0]]
    assert s.score[0, 0] == 1.0
    assert s.score[0, 1] == pytest.approx(math.exp(-1), abs=1e-15)


def test_score_matches_brute_force(rng):
    means = rng.normal(scale=3, size=(3, 4))
    var = rng.uniform(0.3, 2, size=(3, 4))
    bank = DescriptorBank.from_moments(means, var, [5, 5, 5], True)
    x = rng.normal(scale=3, size=(6, 5, 4))
    s = score_against_bank(x, bank)
    for h in range(6):
        for w in range(5):
            vals = [math.exp(-0.5 * sum((x[h, w, d] - means[k, d]) ** 2 / var[k, d] for d in range(4)))
                    for k in range(3)]
            assert s.best_class[h, w] == int(np.argmax(vals))
            assert s.score[h, w] == pytest.approx(max(vals), rel=1e-12)
            assert 0 < s.score[h, w] <= 1


def test_score_skips_empty_rows_and_rejects_empty_bank():
    bank = DescriptorBank.empty(3, 2)
    with pytest.raises(EmptyBank):
        score_against_bank(np.zeros((1, 1, 2)), bank)
    bank.accumulate(2, [[1.0, 1.0]])
    assert score_against_bank(np.zeros((1, 1, 2)), bank).best_class[0, 0] == 2


# decisions ---------------------------------------------------------------


def test_semantic_rule_boundaries():
    bank = unit_bank([[0.0, 0.0]])
    x = np.array([[[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]]])
    s = score_against_bank(x, bank)
    assert s.dist2.tolist() == [[2.0, 0.0, 8.0]]
    assert decide_unknown_semantic(s, bank).tolist() == [[False, False, True]]


def test_contrastive_rule_boundaries():
    x = np.array([[[0.0, 0.0], [1.5, 0.0], [0.6, 0.8]]])
    assert decide_unknown_contrastive(x).tolist() == [[True, False, True]]


def test_fuse_truth_table():
    a = np.array([[1, 1, 0, 0]], bool)
    b = np.array([[1, 0, 1, 0]], bool)
    assert fuse_unknown(a, b).tolist() == [[True, False, False, False]]
    assert not fuse_unknown(np.zeros((2, 2), bool), np.ones((2, 2), bool)).any()
    with pytest.raises(ShapeMismatch):
        fuse_unknown(np.zeros((2, 2)), np.zeros((2, 3)))


@given(arrays(bool, (4, 4)), arrays(bool, (4, 4)))
def test_fuse_is_and_and_dominated(a, b):
    out = fuse_unknown(a, b)
    np.testing.assert_array_equal(out, a & b)
    assert not (out & ~a).any() and not (out & ~b).any()


@pytest.mark.parametrize("dim", [1, 2, 4, 8])
def test_calibration_converges_to_chi2_mass(dim):
    r = np.random.default_rng(dim)
    mu = r.normal(size=dim)
    var = r.uniform(0.5, 2.0, size=dim)
    bank = DescriptorBank.from_moments(mu[None], var[None], [1000], True)
    x = mu + np.sqrt(var) * r.standard_normal((1, 10_000, dim))
    known = ~decide_unknown_semantic(score_against_bank(x, bank), bank)
    assert abs(known.mean() - chi2.cdf(dim, dim)) < 0.03


# discovery ---------------------------------------------------------------


def fresh_state(dim=2):
    bank = DescriptorBank.empty(2, dim)
    bank.accumulate(1, np.random.default_rng(0).normal(size=(20, dim)))
    return DiscoveryState.from_known(bank)


def test_first_anomalous_pixel_creates_class():
    state = fresh_state()
    x = np.array([[[50.0, 50.0], [0.0, 0.0]]])
    (mask,), new = discover_classes([(x, np.array([[True, False]]))], state)
    assert mask.tolist() == [[2, 1]]
    assert new.discovered.tolist() == [2]
    assert new.bank.count[2] == 1
    assert state.discovered.size == 0


def test_identical_pixels_share_a_class():
    state = fresh_state()
    x = np.array([[[50.0, 50.0], [50.0, 50.0]]])
    (mask,), new = discover_classes([(x, np.ones((1, 2), bool))], state)
    assert mask.tolist() == [[2, 2]]
    assert new.bank.count[2] == 2
    np.testing.assert_array_equal(new.bank.mean[2], [50, 50])


def test_discovery_two_clusters():
    r = np.random.default_rng(7)
    D, sigma = 8, 0.5
    means = synth.separated_means(r, 3, D, 20 * sigma)
    bank = unit_bank(means[:1])
    state = DiscoveryState.from_known(bank)
    a = means[1] + sigma * r.standard_normal((500, D))
    b = means[2] + sigma * r.standard_normal((500, D))
    x = np.concatenate([a, b])
    order = r.permutation(1000)
    (mask,), new = discover_classes([(x[order][None], np.ones((1, 1000), bool))], state)
    assert new.discovered.size == 2
    truth = np.repeat([0, 1], 500)[order]
    labels = mask.ravel()
    for t in (0, 1):
        assert len(set(labels[truth == t])) == 1
        k = labels[truth == t][0]
        np.testing.assert_allclose(new.bank.mean[k], x[order][truth == t].mean(0), atol=1e-9)
    np.testing.assert_array_equal(new.bank.mean[0], bank.mean[0])


def test_frozen_rows_untouched_and_bank_grows():
    specs = synth.demo_specs(seed=2)
    scenes = [synth.generate(s) for s in specs]
    state = DiscoveryState.from_known(synth.training_bank(scenes, specs[0]))
    before = state.bank.copy()
    sizes = [state.bank.num_classes]
    for sc in scenes:
        _, state = run_pipeline(sc.sem_features, sc.con_features, sc.offsets, state,
                                PipelineConfig(frozenset({3}), min_cluster_size=10))
        sizes.append(state.bank.num_classes)
    assert sizes == sorted(sizes)
    k = before.num_classes
    np.testing.assert_array_equal(state.bank.mean[:k], before.mean)
    np.testing.assert_array_equal(state.bank.m2[:k], before.m2)
    np.testing.assert_array_equal(state.bank.count[:k], before.count)


def test_gate_is_chi2_quantile():
    cfg = DiscoveryConfig(accept_tail=0.01)
    assert cfg.gate(8) == pytest.approx(chi2.ppf(0.99, 8))


# clustering --------------------------------------------------------------


def test_cluster_empty_mask():
    out = cluster_offsets(np.zeros((5, 5, 2)), np.zeros((5, 5), bool), min_cluster_size=2)
    assert not out.any()


def _sinks(n_sinks, noise, seed):
    regions = [synth.Region(2, "rect", (5, 0, 15, 20)), synth.Region(2, "rect", (35, 30, 45, 50))]
    spec = synth.SceneSpec(
        seed=seed, height=50, width=50, dim=1,
        known=(synth.ClassSpec((0.0,), (1.0,), thing=False), synth.ClassSpec((9.0,), (1.0,))),
        regions=tuple(regions[:n_sinks]), offset_noise=noise)
    return synth.generate(spec)


def _agreement(pred, truth, mask):
    """Fraction of pixels whose predicted id maps to their true id (best one-to-one map)."""
    ok = 0
    for j in np.unique(truth[mask]):
        ids, counts = np.unique(pred[mask & (truth == j)], return_counts=True)
        ok += counts.max() if ids[counts.argmax()] != 0 else 0
    return ok / mask.sum()


@pytest.mark.parametrize("n_sinks", [1, 2])
def test_cluster_noisy_sinks(n_sinks):
    sc = _sinks(n_sinks, 0.5, seed=11)
    things = sc.semantic == 2
    out = cluster_offsets(sc.offsets, things, min_cluster_size=10)
    assert int(out.max()) == n_sinks
    assert _agreement(out, sc.instance, things) >= 0.99


def test_cluster_is_deterministic():
    sc = _sinks(2, 0.5, seed=3)
    a = cluster_offsets(sc.offsets, sc.semantic == 2, min_cluster_size=10)
    b = cluster_offsets(sc.offsets, sc.semantic == 2, min_cluster_size=10)
    np.testing.assert_array_equal(a, b)


# semantic filtering ------------------------------------------------------


def test_filter_examples():
    inst = np.array([[1, 1, 0], [2, 2, 2]])
    sem = np.array([[3, 3, 0], [4, 4, 5]])
    out = filter_instances_by_semantics(inst, sem)
    np.testing.assert_array_equal(out, [[1, 1, 0], [2, 2, 3]])
    with pytest.raises(ShapeMismatch):
        filter_instances_by_semantics(inst, sem[:, :2])


@given(arrays(np.int64, (5, 5), elements=st.integers(0, 3)),
       arrays(np.int64, (5, 5), elements=st.integers(0, 2)))
def test_filter_output_is_consistent_fixpoint(inst, sem):
    out = filter_instances_by_semantics(inst, sem)
    validate_pair(sem, out)
    np.testing.assert_array_equal(filter_instances_by_semantics(out, sem), out)


# full pipeline -----------------------------------------------------------


def _demo(seed=0):
    specs = synth.demo_specs(seed=seed)
    scenes = [synth.generate(s) for s in specs]
    return specs, scenes, DiscoveryState.from_known(synth.training_bank(scenes, specs[0]))


def test_pipeline_on_all_known_scene():
    specs, scenes, state = _demo()
    spec = synth.SceneSpec(
        seed=5, height=32, width=32, dim=specs[0].dim, known=specs[0].known,
        regions=(synth.Region(3, "rect", (4, 4, 14, 14)), synth.Region(2, "rect", (20, 0, 32, 32))))
    sc = synth.generate(spec)
    out, new = run_pipeline(sc.sem_features, sc.con_features, sc.offsets, state,
                            PipelineConfig(frozenset({3}), min_cluster_size=10))
    assert not out.anomaly.any()
    assert new.discovered.size == 0
    assert set(np.unique(out.semantic[out.instances > 0])) <= {3}


def test_pipeline_discovers_two_unknown_classes():
    specs, scenes, state = _demo()
    cfg = PipelineConfig(frozenset({3}), min_cluster_size=10)
    out, new = run_pipeline(scenes[0].sem_features, scenes[0].con_features, scenes[0].offsets,
                            state, cfg)
    assert new.discovered.size == 2
    found = set(np.unique(out.semantic[out.anomaly]))
    assert found == set(new.discovered.tolist())
    unknown_inst = np.unique(out.instances[out.anomaly])
    assert len(set(unknown_inst) - {0}) == 2
    validate_pair(out.semantic, out.instances)
    np.testing.assert_array_equal(filter_instances_by_semantics(out.instances, out.semantic),
                                  out.instances)


def test_pipeline_is_deterministic():
    specs, scenes, state = _demo(1)
    cfg = PipelineConfig(frozenset({3}), min_cluster_size=10)
    sc = scenes[0]
    a, sa = run_pipeline(sc.sem_features, sc.con_features, sc.offsets, state, cfg)
    b, sb = run_pipeline(sc.sem_features, sc.con_features, sc.offsets, state, cfg)
    for f in ("semantic", "instances", "anomaly", "anomaly_score"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    np.testing.assert_array_equal(sa.bank.mean, sb.bank.mean)
