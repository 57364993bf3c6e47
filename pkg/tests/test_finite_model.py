import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forestfire.core import BURN, GROWTH, MassDistribution
from forestfire.finite_model import (ClusterSet, InfeasibleInit, Model, SimConfig, init_model, mean_snapshot,
                                     partition_counts, run_replicas, run_until, snapshot_sigma, snapshot_vn,
                                     step, tagged_growth_rate, total_growth_rate)
from forestfire.kinetics import borel_vk
from forestfire.stats import chi2_gof


def _largest_remainder(n, v):
    """Independent oracle: exact rational targets n v_l / l, floors, then remainders in order."""
    from fractions import Fraction
    targets = [Fraction(n) * Fraction(x).limit_denominator(10**6) / l for l, x in enumerate(v, 1)]
    counts = [int(t) for t in targets]
    rest = n - sum(l * c for l, c in enumerate(counts, 1))
    for l in sorted(range(1, len(v) + 1), key=lambda l: -(targets[l - 1] - counts[l - 1])):
        if targets[l - 1] - counts[l - 1] > 0 and l <= rest:
            counts[l - 1] += 1
            rest -= l
    counts[0] += rest
    return counts


@pytest.mark.parametrize("n,init,expected", [
    (100, {1: 1.0}, [100]),
    (10, {2: 1.0}, [0, 5]),
    (10, {1: 0.5, 3: 0.5}, [7, 0, 1]),
    (12, {1: 0.25, 2: 0.25, 3: 0.5}, [4, 1, 2]),
    (3, {5: 1.0}, [3, 0, 0, 0, 0]),
])
def test_partition_counts(n, init, expected):
    d = MassDistribution.from_dict(init)
    got = partition_counts(d, n)
    assert list(got) == expected
    assert list(got) == _largest_remainder(n, d.masses)


def test_partition_explicit_and_infeasible():
    assert list(partition_counts([4, 3, 2, 1], 10)) == [1, 1, 1, 1]
    with pytest.raises(InfeasibleInit):
        partition_counts([4, 3], 10)
    with pytest.raises(InfeasibleInit):
        partition_counts([0, 10], 10)


def test_init_model_examples():
    m = init_model(SimConfig(100))
    assert m.tagged_size == 1 and np.array_equal(m.snapshot_vn().masses, [1.0])
    m = init_model(SimConfig(10, init=MassDistribution.from_dict({2: 1.0})))
    assert list(m.clusters.histogram()) == [0, 5]


def test_tagged_vertex_paintbox():
    # labels increase with cluster size, so U picks size via the size-biased cdf
    cfg = SimConfig(10, init=[1, 1, 1, 1, 2, 4])
    assert Model(cfg, u=0.39).tagged_size == 1
    assert Model(cfg, u=0.4).tagged_size == 2
    assert Model(cfg, u=0.59).tagged_size == 2
    assert Model(cfg, u=0.6).tagged_size == 4


@pytest.mark.parametrize("cfg,expected", [
    (SimConfig(10), 5.5),
    (SimConfig(10, dagger=True), 5.5),
    (SimConfig(10, dagger=True, init=[10]), 10.0),
    (SimConfig(10, dagger=False, init=[10]), 5.5),
])
def test_total_growth_rate(cfg, expected):
    assert total_growth_rate(init_model(cfg)) == pytest.approx(expected)


@pytest.mark.parametrize("k,n,dagger,expected", [
    (3, 10, False, 2.7),
    (3, 10, True, 3.0),
    (10, 10, False, 5.5),
    (1, 10, False, 1.0),
])
def test_tagged_growth_rate(k, n, dagger, expected):
    assert tagged_growth_rate(k, n, dagger) == pytest.approx(expected)


def test_merge_burn_semantics():
    cs = ClusterSet(10, [1, 1, 1, 1])          # clusters {0}, {1,2}, {3,4,5}, {6..9}
    cs.merge(0, 1)
    assert cs.size_of(2) == 3 and list(cs.members(0)) == [0, 1, 2]
    cs.recount()
    before = cs.histogram().copy()
    cs.burn(7)
    assert all(cs.size_of(v) == 1 for v in range(6, 10))
    assert cs.size_of(0) == 3 and cs.size_of(4) == 3
    h = cs.histogram()
    assert h[0] == before[0] + 4 and len(h) == 3
    cs.recount()
    cs.burn(6)                                 # burning a singleton changes nothing
    assert np.array_equal(cs.histogram(), h)


def test_snapshot_examples():
    m = init_model(SimConfig(10, init=[4, 3, 2, 1]))
    assert np.allclose(snapshot_vn(m).masses, [0.1, 0.2, 0.3, 0.4])
    m.burn_cluster_of(9)
    assert np.allclose(snapshot_vn(m).masses, [0.5, 0.2, 0.3])


def test_step_merges_two_singletons():
    m = init_model(SimConfig(2, seed=4))
    for _ in range(100):
        ev = step(m)
        if m.clusters.size_of(0) == 2:
            break
    assert ev.kind == "growth" and ev.sizes == (1, 1)
    assert m.clusters.size_of(1) == 2 and m.t > 0


def test_loops_are_noops():
    m = init_model(SimConfig(1, seed=0))
    t0 = m.t
    for _ in range(5):
        ev = step(m)
        assert ev.kind == "growth"
    assert m.t > t0 and m.tagged_size == 1


def test_fire_step_burns_cluster():
    m = init_model(SimConfig(5, lam=1e6, init=[5], seed=1))
    ev = step(m)
    assert ev.kind == "fire" and ev.sizes == (5,)
    assert list(m.clusters.histogram()) == [5]
    p = m.path()
    assert p.kinds[-1] == BURN and p.sizes[-1] == 1 and p.prev_sizes[-1] == 5


def test_run_until_noop_and_backwards():
    m = init_model(SimConfig(50, seed=2))
    run_until(m, 0.0)
    assert m.n_events == 0
    run_until(m, 1.0)
    assert m.t == 1.0
    with pytest.raises(ValueError):
        run_until(m, 0.5)


def test_fires_dominate():
    m = init_model(SimConfig(2000, lam=50.0, seed=3))
    run_until(m, 2.0)
    assert m.snapshot_vn().masses[0] > 0.97


def test_recount_after_million_events():
    m = init_model(SimConfig(20000, lam=20000 ** -0.3, dagger=True, seed=5))
    while m.n_events < 10**6:
        run_until(m, m.t + 10.0)
    m.clusters.recount()
    assert m.snapshot_vn().masses.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 300), st.floats(0, 2), st.booleans(), st.integers(0, 2**31))
def test_mass_conservation_property(n, lam, dagger, seed):
    m = init_model(SimConfig(n, lam=lam, dagger=dagger, seed=seed))
    run_until(m, 1.5)
    h = m.clusters.histogram()
    assert int(np.dot(np.arange(1, len(h) + 1), h)) == n
    m.clusters.recount()


def test_tagged_path_consistent():
    m = init_model(SimConfig(3000, lam=0.02, seed=8))
    run_until(m, 4.0)
    p = m.path()
    assert p.size_at(4.0) == m.tagged_size
    grow = p.kinds == GROWTH
    assert np.all(p.sizes[grow] > p.prev_sizes[grow])
    assert np.all(p.sizes[~grow] == 1)


def test_er_mean_matches_borel():
    snaps, _ = run_replicas(SimConfig(20000, horizon=1.0, seed=11), [0.25, 0.5, 0.75, 1.0], 20)
    for i, t in enumerate([0.25, 0.5, 0.75, 1.0]):
        m = mean_snapshot([s[i] for s in snaps])[:10]
        v = np.array([borel_vk(k, t) for k in range(1, 11)])
        assert np.all(np.abs(m - v) <= 4 * snapshot_sigma(v, 20000, 20) + 1 / 20000)


def test_exchangeability_tagged_law():
    # tagged size over replicas follows the mean size-biased histogram
    R = 4000
    cfg = SimConfig(400, lam=0.05, horizon=2.0, seed=13)
    snaps, paths = run_replicas(cfg, [2.0], R)
    tagged = np.array([p.size_at(2.0) for p in paths])
    v = mean_snapshot([s[0] for s in snaps])[:8]
    counts = np.bincount(np.minimum(tagged, 9), minlength=10)[1:9]
    _, _, pval = chi2_gof(counts, R, v)
    assert pval > 0.001


def test_replicas_reproducible():
    cfg = SimConfig(500, lam=0.1, horizon=1.0, seed=21)
    a, pa = run_replicas(cfg, [1.0], 3, workers=1)
    b, pb = run_replicas(cfg, [1.0], 3, workers=2)
    for x, y in zip(a, b):
        assert np.array_equal(x[0].masses, y[0].masses)
    assert [p.to_json() for p in pa] == [p.to_json() for p in pb]
