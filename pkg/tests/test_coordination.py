import math

import numpy as np
import pytest

import popwash.coordination as coord
from popwash.coordination import (CommLedger, ShufflePlan, StrategyConfig, apply_shuffle,
                                  expected_comm_fraction, expected_shuffle_scalars_per_step,
                                  layer_probability, papa_all_step, papa_ema_step, parse_plan,
                                  sample_shuffle_plan, serialize_plan)
from popwash.errors import ValidationError
from popwash.params import (LayeredParams, ParamLayout, PopulationView, consensus_distance,
                            consensus_mean)


def random_population(rng, layout, n):
    return PopulationView([LayeredParams([rng.standard_normal(s) for s in layout.shapes])
                           for _ in range(n)])


def scalar_population(values):
    return PopulationView([LayeredParams([np.array([float(v)])]) for v in values])


class TestLayerProbability:
    def test_decreasing_examples(self):
        assert layer_probability(0, 5, 0.1, "decreasing") == pytest.approx(0.1)
        assert layer_probability(2, 5, 0.1, "decreasing") == pytest.approx(0.05)
        assert layer_probability(4, 5, 0.1, "decreasing") == 0.0

    def test_constant(self):
        for l in range(4):
            assert layer_probability(l, 4, 0.3, "constant") == 0.3

    def test_increasing_first_layer_never_shuffled(self):
        assert layer_probability(0, 6, 0.2, "increasing") == 0.0
        assert layer_probability(5, 6, 0.2, "increasing") == pytest.approx(0.2)

    def test_single_layer_forces_constant(self):
        assert layer_probability(0, 1, 0.2, "constant") == 0.2
        with pytest.raises(ValidationError):
            layer_probability(0, 1, 0.2, "decreasing")

    def test_out_of_range(self):
        with pytest.raises(ValidationError):
            layer_probability(5, 5, 0.1)


class TestStrategyConfig:
    def test_wash_requires_p(self):
        with pytest.raises(ValidationError):
            StrategyConfig(kind="wash").normalized()

    def test_p_range(self):
        with pytest.raises(ValidationError):
            StrategyConfig(kind="wash", p=1.5).normalized()

    def test_papa_defaults(self):
        cfg = StrategyConfig(kind="papa").normalized()
        assert cfg.alpha == 0.99
        assert cfg.period == 10

    def test_papa_all_requires_period(self):
        with pytest.raises(ValidationError):
            StrategyConfig(kind="papa_all").normalized()

    def test_alpha_range(self):
        with pytest.raises(ValidationError):
            StrategyConfig(kind="papa", alpha=1.0, period=10).normalized()

    def test_empty_window_allowed(self):
        cfg = StrategyConfig(kind="wash", p=0.1, window=(0, 0)).normalized()
        assert cfg.window == (0, 0)

    def test_reversed_window_rejected(self):
        with pytest.raises(ValidationError):
            StrategyConfig(kind="wash", p=0.1, window=(5, 3)).normalized()

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            StrategyConfig(kind="gossip").normalized()


class TestSamplePlan:
    layout = ParamLayout(shapes=((10,), (10,)), depths=(0, 1))

    def test_p_zero_empty_plan(self):
        cfg = StrategyConfig(kind="wash", p=0.0, schedule="constant")
        plan = sample_shuffle_plan(1, self.layout, cfg, 3, step=0)
        assert plan.num_selected == 0

    def test_p_one_selects_everything(self):
        cfg = StrategyConfig(kind="wash", p=1.0, schedule="constant")
        plan = sample_shuffle_plan(1, self.layout, cfg, 3, step=0)
        assert np.array_equal(plan.coords, np.arange(20))
        plan.validate()

    def test_decreasing_final_layer_never_selected(self):
        cfg = StrategyConfig(kind="wash", p=1.0, schedule="decreasing")
        plan = sample_shuffle_plan(1, self.layout, cfg, 4, step=0)
        assert np.array_equal(plan.coords, np.arange(10))  # depth-1 tensor excluded

    def test_deterministic_per_seed_and_step(self):
        cfg = StrategyConfig(kind="wash", p=0.4, schedule="constant")
        a = sample_shuffle_plan(9, self.layout, cfg, 5, step=7)
        b = sample_shuffle_plan(9, self.layout, cfg, 5, step=7)
        assert np.array_equal(a.coords, b.coords)
        assert np.array_equal(a.perms, b.perms)
        c = sample_shuffle_plan(9, self.layout, cfg, 5, step=8)
        assert not (np.array_equal(a.coords, c.coords) and np.array_equal(a.perms, c.perms))

    def test_rejects_non_wash(self):
        with pytest.raises(ValidationError):
            sample_shuffle_plan(1, self.layout, StrategyConfig(kind="papa", alpha=0.9, period=5),
                                3, step=0)

    def test_selected_count_binomial_bound(self):
        # elementwise path: d=1e4, p=0.01 per draw stays within 4 sigma
        layout = ParamLayout(shapes=((10_000,),), depths=(0,))
        cfg = StrategyConfig(kind="wash", p=0.01, schedule="constant")
        sigma = math.sqrt(10_000 * 0.01 * 0.99)
        for step in range(100):
            plan = sample_shuffle_plan(123, layout, cfg, 2, step=step)
            assert abs(plan.num_selected - 100) <= 4 * sigma

    def test_blockwise_path_valid_and_binomial(self):
        # expected hits above the threshold switch to binomial + choice
        layout = ParamLayout(shapes=((200_000,),), depths=(0,))
        cfg = StrategyConfig(kind="wash", p=0.1, schedule="constant")
        assert 0.1 * 200_000 > coord.BLOCKWISE_THRESHOLD
        sigma = math.sqrt(200_000 * 0.1 * 0.9)
        for step in range(20):
            plan = sample_shuffle_plan(5, layout, cfg, 3, step=step)
            assert abs(plan.num_selected - 20_000) <= 4 * sigma
            assert np.all(np.diff(plan.coords) > 0)
            plan.validate()

    def test_both_paths_distributionally_close(self, monkeypatch):
        layout = ParamLayout(shapes=((30_000,),), depths=(0,))
        cfg = StrategyConfig(kind="wash", p=0.5, schedule="constant")
        block = [sample_shuffle_plan(6, layout, cfg, 2, step=s).num_selected for s in range(40)]
        monkeypatch.setattr(coord, "BLOCKWISE_THRESHOLD", 10**9)
        elem = [sample_shuffle_plan(6, layout, cfg, 2, step=s).num_selected for s in range(40)]
        se = math.sqrt(2 * 30_000 * 0.25 / 40)
        assert abs(np.mean(block) - np.mean(elem)) <= 4 * se


class TestApplyShuffle:
    def test_cycle_example(self):
        pop = scalar_population([1, 2, 6])
        before_sq, _ = consensus_distance(pop)
        plan = ShufflePlan(step=0, n_models=3, coords=np.array([0]),
                           perms=np.array([[2, 0, 1]]))
        apply_shuffle(pop, None, plan)
        values = [m.layers[0][0] for m in pop.models]
        assert values == [6.0, 1.0, 2.0]
        after_sq, _ = consensus_distance(pop)
        assert before_sq == pytest.approx(14.0)
        assert after_sq == pytest.approx(14.0, rel=1e-12)

    def test_identity_permutation_counts_but_moves_nothing(self):
        pop = scalar_population([1, 2, 6])
        plan = ShufflePlan(step=0, n_models=3, coords=np.array([0]),
                           perms=np.array([[0, 1, 2]]))
        delta = apply_shuffle(pop, None, plan)
        assert [m.layers[0][0] for m in pop.models] == [1.0, 2.0, 6.0]
        assert np.all(delta.nominal == 1.0)
        assert np.all(delta.effective == 0.0)

    def test_multiset_preserved_per_coordinate(self):
        rng = np.random.default_rng(3)
        layout = ParamLayout(shapes=((6, 5), (5,)), depths=(0, 1))
        pop = random_population(rng, layout, 4)
        before = np.stack([m.flatten() for m in pop.models])
        cfg = StrategyConfig(kind="wash", p=0.7, schedule="constant")
        plan = sample_shuffle_plan(11, layout, cfg, 4, step=2)
        apply_shuffle(pop, None, plan)
        after = np.stack([m.flatten() for m in pop.models])
        np.testing.assert_array_equal(np.sort(after, axis=0), np.sort(before, axis=0))
        untouched = np.setdiff1d(np.arange(layout.total_size), plan.coords)
        np.testing.assert_array_equal(after[:, untouched], before[:, untouched])

    def test_optimizer_state_follows_same_permutation(self):
        rng = np.random.default_rng(4)
        layout = ParamLayout(shapes=((4,),), depths=(0,))
        pop = random_population(rng, layout, 3)
        momenta = [LayeredParams([rng.standard_normal(4)]) for _ in range(3)]
        mom_before = np.stack([m.flatten() for m in momenta])
        par_before = np.stack([m.flatten() for m in pop.models])
        plan = ShufflePlan(step=0, n_models=3, coords=np.array([1, 3]),
                           perms=np.array([[1, 2, 0], [2, 0, 1]]))
        delta = apply_shuffle(pop, momenta, plan, include_opt=True)
        mom_after = np.stack([m.flatten() for m in momenta])
        par_after = np.stack([m.flatten() for m in pop.models])
        for j, coordn in enumerate((1, 3)):
            perm = plan.perms[j]
            np.testing.assert_array_equal(par_after[:, coordn], par_before[perm, coordn])
            np.testing.assert_array_equal(mom_after[:, coordn], mom_before[perm, coordn])
        assert np.all(delta.nominal == 4.0)  # 2 coords x 2 (params + momentum)

    def test_ledger_matches_plan(self):
        rng = np.random.default_rng(5)
        layout = ParamLayout(shapes=((50,),), depths=(0,))
        pop = random_population(rng, layout, 5)
        momenta = [LayeredParams([rng.standard_normal(50)]) for _ in range(5)]
        cfg = StrategyConfig(kind="wash", p=0.3, schedule="constant")
        plan = sample_shuffle_plan(2, layout, cfg, 5, step=0)
        for include_opt in (False, True):
            delta = apply_shuffle(pop, momenta, plan, include_opt=include_opt)
            factor = 2 if include_opt else 1
            assert delta.nominal.sum() == 5 * plan.num_selected * factor

    def test_mean_preserved(self):
        rng = np.random.default_rng(6)
        layout = ParamLayout(shapes=((30, 2), (11,)), depths=(0, 1))
        pop = random_population(rng, layout, 6)
        mean_before = consensus_mean(pop).flatten()
        cfg = StrategyConfig(kind="wash", p=0.9, schedule="constant")
        plan = sample_shuffle_plan(3, layout, cfg, 6, step=1)
        apply_shuffle(pop, None, plan)
        mean_after = consensus_mean(pop).flatten()
        np.testing.assert_allclose(mean_after, mean_before, rtol=1e-12, atol=1e-15)

    def test_consensus_preservation_property(self):
        # randomized sweep over N, d, p at tol 1e-10 relative
        rng = np.random.default_rng(7)
        for case in range(40):
            n = int(rng.integers(2, 9))
            sizes = rng.integers(5, 200, size=3)
            layout = ParamLayout(shapes=tuple((int(s),) for s in sizes), depths=(0, 1, 2))
            pop = random_population(rng, layout, n)
            p = float(rng.choice([0.01, 0.2, 0.8, 1.0]))
            schedule = ("constant", "decreasing", "increasing")[case % 3]
            cfg = StrategyConfig(kind="wash", p=p, schedule=schedule)
            plan = sample_shuffle_plan(100 + case, layout, cfg, n, step=case)
            before, _ = consensus_distance(pop)
            apply_shuffle(pop, None, plan)
            after, _ = consensus_distance(pop)
            assert after == pytest.approx(before, rel=1e-10)

    def test_two_model_expectation_monte_carlo(self):
        # mean of model 0's value converges to the two-model average
        layout = ParamLayout(shapes=((1,),), depths=(0,))
        cfg = StrategyConfig(kind="wash", p=1.0, schedule="constant")
        theta = (1.0, 4.0)
        pop = scalar_population(theta)
        draws = np.empty(100_000)
        for m in range(draws.size):
            pop.models[0].layers[0][0] = theta[0]
            pop.models[1].layers[0][0] = theta[1]
            plan = sample_shuffle_plan(31, layout, cfg, 2, step=m)
            apply_shuffle(pop, None, plan)
            draws[m] = pop.models[0].layers[0][0]
        se = draws.std(ddof=1) / math.sqrt(draws.size)
        assert abs(draws.mean() - 2.5) <= 3 * se

    def test_wrong_population_size_rejected(self):
        pop = scalar_population([1, 2])
        plan = ShufflePlan(step=0, n_models=3, coords=np.array([0]),
                           perms=np.array([[0, 1, 2]]))
        with pytest.raises(ValidationError):
            apply_shuffle(pop, None, plan)

    def test_out_of_range_coordinate_rejected(self):
        pop = scalar_population([1, 2])
        plan = ShufflePlan(step=0, n_models=2, coords=np.array([5]),
                           perms=np.array([[1, 0]]))
        with pytest.raises(ValidationError):
            apply_shuffle(pop, None, plan)


class TestPapa:
    def test_ema_scalar_example(self):
        pop = scalar_population([1, 2, 6])
        papa_ema_step(pop, alpha=0.5)
        values = [m.layers[0][0] for m in pop.models]
        assert values == pytest.approx([2.0, 2.5, 4.5])
        sum_sq, _ = consensus_distance(pop)
        assert sum_sq == pytest.approx(3.5, rel=1e-12)

    def test_alpha_near_one_is_near_identity(self):
        pop = scalar_population([1, 2, 6])
        papa_ema_step(pop, alpha=1 - 1e-12)
        values = [m.layers[0][0] for m in pop.models]
        assert values == pytest.approx([1.0, 2.0, 6.0], abs=1e-10)

    def test_contraction_is_alpha_squared(self):
        rng = np.random.default_rng(8)
        layout = ParamLayout(shapes=((40,), (7,)), depths=(0, 1))
        for alpha in (0.5, 0.9, 0.99):
            pop = random_population(rng, layout, 5)
            before, _ = consensus_distance(pop)
            papa_ema_step(pop, alpha)
            after, _ = consensus_distance(pop)
            assert after == pytest.approx(alpha ** 2 * before, rel=1e-10)

    def test_mean_unchanged(self):
        rng = np.random.default_rng(9)
        layout = ParamLayout(shapes=((25,),), depths=(0,))
        pop = random_population(rng, layout, 4)
        before = consensus_mean(pop).flatten()
        papa_ema_step(pop, 0.7)
        np.testing.assert_allclose(consensus_mean(pop).flatten(), before, rtol=1e-12)

    def test_alpha_out_of_range(self):
        with pytest.raises(ValidationError):
            papa_ema_step(scalar_population([1, 2]), alpha=1.0)

    def test_papa_all_collapses(self):
        rng = np.random.default_rng(10)
        layout = ParamLayout(shapes=((12,),), depths=(0,))
        pop = random_population(rng, layout, 4)
        mean_before = consensus_mean(pop).flatten()
        papa_all_step(pop)
        for m in pop.models:
            np.testing.assert_array_equal(m.flatten(), pop.models[0].flatten())
        np.testing.assert_allclose(pop.models[0].flatten(), mean_before, rtol=1e-15)
        assert consensus_distance(pop)[0] == 0.0

    def test_papa_all_idempotent(self):
        rng = np.random.default_rng(11)
        layout = ParamLayout(shapes=((9,),), depths=(0,))
        pop = random_population(rng, layout, 3)
        papa_all_step(pop)
        snapshot = [m.flatten() for m in pop.models]
        papa_all_step(pop)
        for before, m in zip(snapshot, pop.models):
            np.testing.assert_array_equal(m.flatten(), before)


class TestCommCost:
    def test_table_ratios_exact(self):
        wash = StrategyConfig(kind="wash", p=0.001, schedule="decreasing")
        assert expected_comm_fraction(wash, papa_period=10).ratio_vs_papa == 1 / 200
        wash_opt = StrategyConfig(kind="wash_opt", p=0.001, schedule="decreasing")
        assert expected_comm_fraction(wash_opt, papa_period=10).ratio_vs_papa == 1 / 100
        assert expected_comm_fraction(
            StrategyConfig(kind="wash", p=0.05, schedule="decreasing"),
            papa_period=10).ratio_vs_papa == 1 / 4
        assert expected_comm_fraction(
            StrategyConfig(kind="wash_opt", p=0.05, schedule="decreasing"),
            papa_period=10).ratio_vs_papa == 1 / 2

    def test_none_and_papa(self):
        assert expected_comm_fraction(StrategyConfig(kind="none")).fraction == 0.0
        papa = StrategyConfig(kind="papa", alpha=0.99, period=10)
        cost = expected_comm_fraction(papa, papa_period=10)
        assert cost.fraction == pytest.approx(0.1)
        assert cost.ratio_vs_papa == pytest.approx(1.0)

    def test_constant_schedule_not_halved(self):
        cfg = StrategyConfig(kind="wash", p=0.01, schedule="constant")
        assert expected_comm_fraction(cfg).fraction == pytest.approx(0.01)

    def test_layout_aware_expectation(self):
        layout = ParamLayout(shapes=((100,), (60,)), depths=(0, 1))
        cfg = StrategyConfig(kind="wash", p=0.1, schedule="decreasing")
        # depth 0 shuffles at p, depth 1 never
        assert expected_shuffle_scalars_per_step(layout, cfg) == pytest.approx(10.0)
        opt = StrategyConfig(kind="wash_opt", p=0.1, schedule="constant")
        assert expected_shuffle_scalars_per_step(layout, opt) == pytest.approx(32.0)


class TestLedger:
    def test_accumulation_and_monotonicity(self):
        ledger = CommLedger(n_models=3)
        plan = ShufflePlan(step=0, n_models=3, coords=np.array([0, 1]),
                           perms=np.array([[1, 2, 0], [0, 1, 2]]))
        pop = PopulationView([LayeredParams([np.zeros(2)]) for _ in range(3)])
        delta = apply_shuffle(pop, None, plan)
        ledger.record_shuffle(delta, expected_per_model=1.5)
        assert ledger.nominal_mean == 2.0
        assert ledger.expected == 1.5
        before = ledger.nominal.copy()
        ledger.record_allreduce(100)
        assert np.all(ledger.nominal >= before)
        assert ledger.nominal_mean == 102.0

    def test_round_trip(self):
        ledger = CommLedger(n_models=2)
        ledger.record_allreduce(10)
        back = CommLedger.from_dict(ledger.as_dict())
        assert back.n_models == 2
        assert np.array_equal(back.nominal, ledger.nominal)
        assert back.expected == ledger.expected


class TestPlanSerialization:
    def test_round_trip(self):
        layout = ParamLayout(shapes=((4,), (4,)), depths=(0, 1))
        cfg = StrategyConfig(kind="wash", p=0.9, schedule="constant")
        plan = sample_shuffle_plan(17, layout, cfg, 3, step=5)
        text = serialize_plan(plan, layout)
        back = parse_plan(text)
        assert back.step == plan.step
        assert np.array_equal(back.coords, plan.coords)
        assert np.array_equal(back.perms, plan.perms)

    def test_record_format(self):
        layout = ParamLayout(shapes=((2,), (2,)), depths=(0, 1))
        plan = ShufflePlan(step=9, n_models=2, coords=np.array([0, 3]),
                           perms=np.array([[1, 0], [0, 1]]))
        lines = serialize_plan(plan, layout).splitlines()
        assert lines[0].split() == ["9", "0", "0", "1", "0"]
        assert lines[1].split() == ["9", "1", "3", "0", "1"]
