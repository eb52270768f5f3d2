import math

import numpy as np
import pytest
from pydantic import ValidationError as PydanticValidationError

from continual_merge.errors import ValidationError
from continual_merge.theory import (
    DiscreteTaskWorld,
    RiskSpec,
    enumerated_moe_risk,
    ideal_risk,
    jensen_gap_cross_entropy,
    moe_risk_closed_form,
    moe_risk_monte_carlo,
    random_world,
    risk_spec_from_world,
    routing_penalty,
    simplex_grid,
    static_mixture_risk,
    static_optimal_risk,
    static_risk_from_spec,
    superiority_condition,
)

EXAMPLE = RiskSpec(priors=[0.5, 0.5], risk_matrix=[[0.1, 0.9], [0.8, 0.2]], routing_errors=[0.1, 0.1])


def _uniform(t):
    return [1.0 / t] * t


def _world(labels, predictions, classes=2):
    return DiscreteTaskWorld(
        tuple(np.asarray(y) for y in labels),
        tuple(tuple(np.asarray(p) for p in tables) for tables in predictions),
        classes,
    )


class TestRiskSpec:
    def test_priors_must_sum_to_one(self):
        with pytest.raises(PydanticValidationError):
            RiskSpec(priors=[0.5, 0.6], risk_matrix=[[0, 0], [0, 0]], routing_errors=[0, 0])

    def test_risks_in_unit_interval(self):
        with pytest.raises(PydanticValidationError):
            RiskSpec(priors=[1.0], risk_matrix=[[1.5]], routing_errors=[0.0])

    def test_matrix_shape(self):
        with pytest.raises(PydanticValidationError):
            RiskSpec(priors=[0.5, 0.5], risk_matrix=[[0.1, 0.2]], routing_errors=[0, 0])


class TestClosedForm:
    def test_perfect_routing(self):
        spec = EXAMPLE.model_copy(update={"routing_errors": [0.0, 0.0]})
        assert moe_risk_closed_form(spec) == pytest.approx(ideal_risk(spec), abs=1e-15)
        assert ideal_risk(spec) == pytest.approx(0.15, abs=1e-15)

    def test_worked_example(self):
        assert moe_risk_closed_form(EXAMPLE) == pytest.approx(0.22, abs=1e-12)

    def test_always_misrouted(self):
        spec = EXAMPLE.model_copy(update={"routing_errors": [1.0, 1.0]})
        assert moe_risk_closed_form(spec) == pytest.approx(0.5 * 0.9 + 0.5 * 0.8, abs=1e-12)

    def test_single_task_rejected(self):
        with pytest.raises(ValidationError):
            routing_penalty(RiskSpec(priors=[1.0], risk_matrix=[[0.1]], routing_errors=[0.0]))

    def test_affine_non_decreasing_in_eps(self):
        risks = [moe_risk_closed_form(EXAMPLE.model_copy(update={"routing_errors": [e, 0.1]}))
                 for e in (0.0, 0.25, 0.5)]
        assert risks[0] <= risks[1] <= risks[2]
        assert risks[2] - risks[1] == pytest.approx(risks[1] - risks[0], abs=1e-14)


class TestMonteCarlo:
    def test_exact_without_routing_noise(self):
        spec = RiskSpec(priors=[0.2, 0.3, 0.5], risk_matrix=[[0.1, 0.4, 0.3], [0.5, 0.2, 0.9], [0.6, 0.7, 0.05]],
                        routing_errors=[0.0, 0.0, 0.0])
        estimate, stderr = moe_risk_monte_carlo(spec, 1000, rng_seed=3)
        assert estimate == ideal_risk(spec)
        assert stderr == 0.0

    def test_matches_closed_form(self):
        estimate, stderr = moe_risk_monte_carlo(EXAMPLE, 1_000_000, rng_seed=42)
        assert abs(estimate - 0.22) < 4 * stderr

    def test_deterministic_and_job_independent(self):
        serial = moe_risk_monte_carlo(EXAMPLE, 200_000, rng_seed=7, n_jobs=1)
        assert moe_risk_monte_carlo(EXAMPLE, 200_000, rng_seed=7, n_jobs=1) == serial
        assert moe_risk_monte_carlo(EXAMPLE, 200_000, rng_seed=7, n_jobs=2) == serial

    def test_draws_positive(self):
        with pytest.raises(ValidationError):
            moe_risk_monte_carlo(EXAMPLE, 0, rng_seed=0)


class TestStaticMixtures:
    def test_simplex_grid(self):
        grid = simplex_grid(3, 3)
        assert grid.shape == (6, 3)
        np.testing.assert_allclose(grid.sum(axis=1), 1.0)

    def test_identical_experts(self):
        y = np.array([0, 1, 1, 0])
        p = np.array([0, 1, 0, 0])
        world = _world([y, y], [[p, p], [p, p]])
        risks = {static_mixture_risk(world, _uniform(2), alpha) for alpha in simplex_grid(2, 11)}
        assert len({round(r, 12) for r in risks}) == 1

    def test_dominant_expert(self):
        y0, y1 = np.array([0, 1, 1]), np.array([1, 1, 0])
        world = _world([y0, y1], [[y0, y1], [1 - y0, y1]])
        risk, alpha = static_optimal_risk(world, 11)
        assert risk == 0.0
        np.testing.assert_array_equal(alpha, [1.0, 0.0])

    def test_independent_grid_evaluator(self, rng):
        world = random_world(2, 12, 3, rng)
        risk, alpha = static_optimal_risk(world, 101)
        best = math.inf
        for k in range(101):
            a = (k / 100, 1 - k / 100)
            total = 0.0
            for task in range(2):
                losses = [1.0 - sum(a[i] * (world.predictions[i][task][j] == world.labels[task][j])
                                    for i in range(2)) for j in range(12)]
                total += 0.5 * sum(losses) / 12
            best = min(best, total)
        assert risk == pytest.approx(best, abs=1e-12)

    def test_vote_rule(self):
        y = np.array([0, 1])
        world = _world([y, y], [[np.array([0, 0]), np.array([0, 0])], [np.array([1, 1]), np.array([1, 1])]])
        assert static_mixture_risk(world, _uniform(2), np.array([0.5, 0.5]), rule="vote") == 0.5

    def test_vote_optimum_inside_simplex(self):
        # expert i misses point i of every task; ties go to class 0, the wrong class
        y = np.ones(3, dtype=int)
        tables = [1 - np.eye(3, dtype=int)[i] for i in range(3)]
        world = _world([y, y, y], [[t, t, t] for t in tables])
        for vertex in np.eye(3):
            assert static_mixture_risk(world, _uniform(3), vertex, rule="vote") == pytest.approx(1 / 3)
        risk, alpha = static_optimal_risk(world, 4, rule="vote")
        assert risk == 0.0
        np.testing.assert_allclose(alpha, [1 / 3] * 3)
        risk, alpha = static_optimal_risk(world, 11, rule="vote")
        assert risk == 0.0
        assert np.all(alpha > 0) and np.all(alpha < 0.5)
        assert static_optimal_risk(world, 11)[0] == pytest.approx(1 / 3, abs=1e-12)

    def test_vote_matches_naive_grid_search(self, rng):
        world = random_world(3, 9, 3, rng, heterogeneous=False)
        risk, _ = static_optimal_risk(world, 6, rule="vote")
        best = math.inf
        for alpha in simplex_grid(3, 6):
            total = 0.0
            for task in range(3):
                wrong = 0
                for j in range(9):
                    mass = [0.0] * 3
                    for i in range(3):
                        mass[world.predictions[i][task][j]] += alpha[i]
                    wrong += mass.index(max(mass)) != world.labels[task][j]
                total += wrong / 9 / 3
            best = min(best, total)
        assert risk == pytest.approx(best, abs=1e-12)

    def test_grid_limit(self, rng):
        with pytest.raises(ValidationError):
            static_optimal_risk(random_world(4, 4, 2, rng), 5)

    def test_spec_vertex_matches_grid(self, rng):
        world = random_world(3, 10, 3, rng)
        spec = risk_spec_from_world(world, _uniform(3), [0.0] * 3)
        grid_risk, _ = static_optimal_risk(world, 11)
        assert static_risk_from_spec(spec)[0] == pytest.approx(grid_risk, abs=1e-12)


class TestSuperiority:
    def test_perfect_routing_heterogeneous(self):
        spec = EXAMPLE.model_copy(update={"routing_errors": [0.0, 0.0]})
        assert superiority_condition(spec, static_risk_from_spec(spec)[0])

    def test_boundary_is_false(self):
        spec = RiskSpec(priors=[0.5, 0.5], risk_matrix=[[0.0, 1.0], [1.0, 0.0]], routing_errors=[0.25, 0.25])
        assert routing_penalty(spec) == 0.25
        assert not superiority_condition(spec, 0.25)

    def test_agrees_with_direct_comparison(self, rng):
        for _ in range(1000):
            t = int(rng.integers(2, 5))
            priors = rng.dirichlet(np.ones(t))
            priors[-1] = 1.0 - math.fsum(priors[:-1])
            if priors[-1] < 0:
                continue
            spec = RiskSpec(priors=priors.tolist(), risk_matrix=rng.uniform(size=(t, t)).tolist(),
                            routing_errors=rng.uniform(size=t).tolist())
            static_opt = float(rng.uniform())
            assert superiority_condition(spec, static_opt) == (moe_risk_closed_form(spec) < static_opt)


class TestDiscreteWorlds:
    @pytest.mark.parametrize("num_tasks", [2, 3])
    def test_enumeration_matches_decomposition(self, rng, num_tasks):
        for _ in range(100):
            world = random_world(num_tasks, int(rng.integers(2, 9)), 3, rng, heterogeneous=bool(rng.integers(2)))
            priors = _uniform(num_tasks)
            eps = rng.uniform(size=num_tasks).tolist()
            spec = risk_spec_from_world(world, priors, eps)
            enumerated = enumerated_moe_risk(world, priors, eps)
            assert enumerated == pytest.approx(moe_risk_closed_form(spec), abs=1e-12)
            static_opt, _ = static_optimal_risk(world, 11)
            if superiority_condition(spec, static_opt):
                assert enumerated < static_opt

    def test_perfect_routing_beats_static(self, rng):
        for _ in range(50):
            t = int(rng.integers(2, 4))
            world = random_world(t, 8, 3, rng)
            priors = _uniform(t)
            moe = enumerated_moe_risk(world, priors, [0.0] * t)
            static_opt, _ = static_optimal_risk(world, 11)
            assert moe < static_opt

    def test_world_validation(self):
        with pytest.raises(ValidationError):
            _world([np.array([0, 1])], [[np.array([0])]])


def test_jensen_gap_two_points():
    p_experts = np.array([[0.9, 0.1], [0.2, 0.8]])
    mixture, weighted = jensen_gap_cross_entropy(p_experts, np.array([0.5, 0.5]), label=0)
    assert mixture == pytest.approx(-math.log(0.55), abs=1e-12)
    assert weighted == pytest.approx(-0.5 * (math.log(0.9) + math.log(0.2)), abs=1e-12)
    assert mixture <= weighted
