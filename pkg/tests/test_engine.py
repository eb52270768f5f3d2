import numpy as np
import pytest

from continual_merge.bench import generate_suite
from continual_merge.engine import (
    Adam,
    GateState,
    LowRankExpert,
    MergedModel,
    MingleConfig,
    MingleMerger,
    SeedBuffer,
    adapt_task,
    build_expert,
    gate_activation_matrix,
    gate_gradients,
    gate_weight_step,
    interference,
    kl_adaptation_loss,
    kl_and_gate_gradients,
    load_merged,
    merged_forward,
    merged_predict,
    save_merged,
)
from continual_merge.errors import RankError, ValidationError
from continual_merge.linalg import diagonal_coefficients, svd, truncated_svd
from continual_merge.mergers import TaskVector, task_vector
from continual_merge.models import Layer, ModelParams, PrototypeHead, finetune, forward, init_model, make_head
from continual_merge.nullspace import NullSpaceProjector, SubspaceBank

SIZES = [5, 6, 6, 4]


def _random_expert(rng, d_out, d_in, r=2):
    return LowRankExpert(rng.normal(size=(d_out, r)), rng.normal(size=(r, d_in)), 0.1 * rng.normal(size=d_out))


def _mixture(rng, tasks=2):
    base = init_model(SIZES, seed=11)
    model = MergedModel(base, make_head(6, 4, temperature=5.0, seed=12))
    for _ in range(tasks):
        model.add_task({l: _random_expert(rng, layer.weight.shape[0], layer.weight.shape[1])
                        for l, layer in enumerate(base.layers)})
    for layer in model.slots:
        for slot in layer:
            slot.gate.weight = 0.3 * rng.normal(size=slot.gate.weight.shape)
            slot.gate.bias = float(0.3 * rng.normal())
    return model


def _trained_pair(suite, task_id, theta0, head):
    task = suite.tasks[task_id]
    tuned = finetune(theta0, head.restrict(task.class_ids), task.train, 30, 0.05, rng_seed=task.seed)
    seed = SeedBuffer.draw(task.test.inputs, task.test.labels, task.class_ids, 4, rng_seed=task_id)
    return tuned, seed


def _naive_merged_logits(model, head, x):
    last = len(model.base.layers) - 1
    out = []
    for row in x:
        h = row.copy()
        for l, layer in enumerate(model.base.layers):
            z = layer.weight @ h + layer.bias
            for slot in model.slots[l]:
                g = float(np.dot(slot.gate.weight, h) + slot.gate.bias)
                z = z + g * (slot.expert.b_factor @ (slot.expert.a_factor @ h) + slot.expert.bias)
            h = np.maximum(z, 0.0) if l < last else z
        f = h / np.linalg.norm(h)
        out.append([head.temperature * float(f @ p) for p in head.prototypes])
    return np.array(out)


def _projector(rng, mode, scores):
    basis, _ = np.linalg.qr(rng.normal(size=(6, 2)))
    projector = NullSpaceProjector(SubspaceBank(2, {0: basis}), mode, beta=0.99, gamma=1.0)
    projector.tracker.scores[0] = np.asarray(scores, dtype=np.float64)
    return basis, projector


class TestBuildExpert:
    def test_rank_one_first_task(self):
        u, v = np.array([1.0, 2.0, 2.0]) / 3.0, np.array([0.6, 0.8])
        delta = TaskVector([Layer(4.0 * np.outer(u, v), np.zeros(3))])
        expert = build_expert(delta, None, 1, is_first_task=True)[0]
        np.testing.assert_allclose(expert.dense(), 4.0 * np.outer(u, v), atol=1e-14)

    def test_full_removal(self, rng):
        w = rng.normal(size=(4, 3))
        b = rng.normal(size=4)
        delta = TaskVector([Layer(w, b)])
        expert = build_expert(delta, {0: (w, b)}, 2, is_first_task=False)[0]
        np.testing.assert_allclose(expert.dense(), 0.0, atol=1e-12)
        np.testing.assert_allclose(expert.bias, 0.0, atol=1e-12)

    def test_first_task_matches_truncated_svd(self, rng):
        w = rng.normal(size=(8, 6))
        expert = build_expert(TaskVector([Layer(w, np.zeros(8))]), None, 4, is_first_task=True)[0]
        np.testing.assert_allclose(expert.dense(), truncated_svd(w, 4).reconstruct(), atol=1e-8)
        assert expert.rank == 4

    def test_orthogonal_to_prior_directions(self, rng):
        theta0 = init_model(SIZES, seed=0)
        prior = None
        for t in range(4):
            model = init_model(SIZES, seed=10 + t)
            experts = build_expert(task_vector(model, theta0), prior, 2, is_first_task=prior is None)
            if prior is not None:
                for l, expert in experts.items():
                    directions = svd(prior[l][0]).significant()
                    assert np.max(np.abs(diagonal_coefficients(expert.dense(), directions))) < 1e-8
                    assert expert.rank == 2
            prior = {l: (e.dense() + (prior[l][0] if prior else 0.0), e.bias + (prior[l][1] if prior else 0.0))
                     for l, e in experts.items()}

    def test_rank_too_large(self, rng):
        delta = TaskVector([Layer(rng.normal(size=(3, 2)), np.zeros(3))])
        with pytest.raises(RankError):
            build_expert(delta, None, 3, is_first_task=True)

    def test_prior_required_after_first(self, rng):
        delta = TaskVector([Layer(rng.normal(size=(3, 2)), np.zeros(3))])
        with pytest.raises(ValidationError):
            build_expert(delta, None, 1, is_first_task=False)


class TestMergedForward:
    def test_no_experts_equals_base(self, rng):
        base = init_model(SIZES, seed=1)
        head = make_head(3, 4, seed=2)
        x = rng.normal(size=(5, 5))
        merged_logits, _ = merged_forward(MergedModel(base, head), x)
        base_logits, _ = forward(base, head, x)
        np.testing.assert_allclose(merged_logits, base_logits, atol=1e-12)

    def test_zero_gates_equal_base(self, rng):
        model = _mixture(rng)
        for layer in model.slots:
            for slot in layer:
                slot.gate = GateState.zeros(slot.gate.weight.size)
        x = rng.normal(size=(5, 5))
        merged_logits, _ = merged_forward(model, x)
        base_logits, _ = forward(model.base, model.head, x)
        np.testing.assert_allclose(merged_logits, base_logits, atol=1e-12)

    def test_unit_gates_equal_summed_experts(self, rng):
        model = _mixture(rng)
        for layer in model.slots:
            for slot in layer:
                slot.gate = GateState.unit(slot.gate.weight.size)
        summed = model.base.copy()
        for l, layer in enumerate(model.slots):
            for slot in layer:
                summed.layers[l].weight += slot.expert.dense()
                summed.layers[l].bias += slot.expert.bias
        x = rng.normal(size=(5, 5))
        np.testing.assert_allclose(merged_forward(model, x)[0], forward(summed, model.head, x)[0], atol=1e-10)

    def test_gate_values_recorded(self, rng):
        model = _mixture(rng, tasks=3)
        x = rng.normal(size=(4, 5))
        _, record = merged_forward(model, x)
        assert len(record.gate_values[0]) == 3
        np.testing.assert_allclose(record.gate_values[0][1], model.slots[0][1].gate(x))

    def test_matches_per_sample_mixture(self, rng):
        for _ in range(5):
            model = _mixture(rng, tasks=3)
            x = rng.normal(size=(6, 5))
            block = model.head.restrict([1, 3, 4])
            logits, _ = merged_forward(model, x, block)
            np.testing.assert_allclose(logits, _naive_merged_logits(model, block, x), rtol=0, atol=1e-12)

    def test_predict_restricts_to_block(self, rng):
        model = _mixture(rng)
        predictions = merged_predict(model, rng.normal(size=(10, 5)), [2, 3])
        assert set(predictions.tolist()) <= {0, 1}


class TestGateGradients:
    def test_finite_differences(self, rng):
        for trial in range(20):
            model = _mixture(rng)
            for layer in model.slots:
                for slot in layer:
                    slot.gate.frozen = False
            reference = init_model(SIZES, seed=100 + trial)
            x = rng.normal(size=(6, 5))
            class_ids = [0, 1, 2]
            _, grads = kl_and_gate_gradients(model, reference, x, class_ids)
            eps = 1e-6
            for task in (0, 1):
                for l in range(len(SIZES) - 1):
                    gate = model.slots[l][task].gate
                    numeric = np.zeros_like(gate.weight)
                    for i in range(gate.weight.size):
                        original = gate.weight[i]
                        gate.weight[i] = original + eps
                        up = kl_and_gate_gradients(model, reference, x, class_ids)[0]
                        gate.weight[i] = original - eps
                        down = kl_and_gate_gradients(model, reference, x, class_ids)[0]
                        gate.weight[i] = original
                        numeric[i] = (up - down) / (2 * eps)
                    np.testing.assert_allclose(grads[task][l][0], numeric, rtol=1e-4, atol=1e-8)

                    original = gate.bias
                    gate.bias = original + eps
                    up = kl_and_gate_gradients(model, reference, x, class_ids)[0]
                    gate.bias = original - eps
                    down = kl_and_gate_gradients(model, reference, x, class_ids)[0]
                    gate.bias = original
                    assert grads[task][l][1] == pytest.approx((up - down) / (2 * eps), rel=1e-4, abs=1e-8)

    def test_only_unfrozen_gates(self, rng):
        model = _mixture(rng)
        model.freeze(0)
        _, grads = kl_and_gate_gradients(model, init_model(SIZES, seed=5), rng.normal(size=(4, 5)), [0, 1])
        assert list(grads) == [1]

    def test_no_unfrozen_gates(self, rng):
        model = _mixture(rng)
        model.freeze()
        with pytest.raises(ValidationError):
            kl_and_gate_gradients(model, init_model(SIZES, seed=5), rng.normal(size=(4, 5)), [0, 1])

    def test_kl_zero_when_identical(self, rng):
        base = init_model(SIZES, seed=4)
        model = MergedModel(base, make_head(3, 4, seed=2))
        seed = SeedBuffer(rng.normal(size=(5, 5)), [0, 1, 2])
        assert kl_adaptation_loss(model, base, seed) == 0.0

    def test_kl_one_hot_against_uniform(self):
        head = PrototypeHead(np.eye(2), 1000.0)
        model = MergedModel(ModelParams([Layer(np.eye(2), np.zeros(2))]), head)
        uniform = ModelParams([Layer(np.zeros((2, 2)), np.zeros(2))])
        seed = SeedBuffer(np.array([[1.0, 0.0], [0.0, 3.0]]), [0, 1])
        assert kl_adaptation_loss(model, uniform, seed) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_kl_matches_direct_sum(self, rng):
        for trial in range(5):
            model = _mixture(rng)
            reference = init_model(SIZES, seed=40 + trial)
            class_ids = [1, 3, 4]
            x = rng.normal(size=(7, 5))
            block = model.head.restrict(class_ids)
            p_logits, _ = merged_forward(model, x, block)
            q_logits, _ = forward(reference, block, x)
            expected = 0.0
            for pl, ql in zip(p_logits, q_logits):
                p = np.exp(pl - pl.max()) / np.exp(pl - pl.max()).sum()
                q = np.exp(ql - ql.max()) / np.exp(ql - ql.max()).sum()
                expected += sum(pc * np.log(pc / qc) for pc, qc in zip(p, q)) / len(x)
            loss = kl_adaptation_loss(model, reference, SeedBuffer(x, class_ids))
            assert loss == pytest.approx(expected, abs=1e-10)

    def test_zero_expert_gets_no_gradient(self, rng):
        model = _mixture(rng)
        for layer in model.slots:
            expert = layer[1].expert
            layer[1].expert = LowRankExpert(np.zeros_like(expert.b_factor), expert.a_factor,
                                            np.zeros_like(expert.bias))
        model.freeze(0)
        grads = gate_gradients(model, init_model(SIZES, seed=6), rng.normal(size=(5, 5)), [0, 1, 2])
        for grad_w, grad_b in grads[1].values():
            np.testing.assert_array_equal(grad_w, 0.0)
            assert grad_b == 0.0

    def test_duplicated_batch(self, rng):
        model = _mixture(rng)
        reference = init_model(SIZES, seed=8)
        x = rng.normal(size=(4, 5))
        single = gate_gradients(model, reference, x, [0, 1, 2])
        double = gate_gradients(model, reference, np.vstack([x, x]), [0, 1, 2])
        for task in single:
            for l, (grad_w, grad_b) in single[task].items():
                np.testing.assert_allclose(double[task][l][0], grad_w, rtol=0, atol=1e-12)
                assert double[task][l][1] == pytest.approx(grad_b, abs=1e-12)


class TestSeedBuffer:
    def test_draw_per_class(self):
        labels = np.repeat([0, 1], 10)
        inputs = np.arange(20, dtype=float).reshape(-1, 1)
        seed = SeedBuffer.draw(inputs, labels, [4, 5], 3, rng_seed=0)
        assert len(seed) == 6
        assert np.all(labels[seed.pool_indices[:3]] == 0) and np.all(labels[seed.pool_indices[3:]] == 1)

    def test_too_few_samples(self):
        with pytest.raises(ValidationError):
            SeedBuffer.draw(np.zeros((4, 1)), np.array([0, 0, 1, 1]), [0, 1], 3, rng_seed=0)

    def test_empty(self):
        with pytest.raises(ValidationError):
            SeedBuffer(np.zeros((0, 3)), [0])


class TestAdaptation:
    def test_adam_first_step_magnitude(self):
        optimizer = Adam(lr=0.1)
        optimizer.advance()
        step = optimizer.update(("w",), np.array([3.0, -0.5]))
        np.testing.assert_allclose(step, [-0.1, 0.1], rtol=1e-6)

    def test_first_relaxed_step_scales_protected_directions(self, rng):
        scores = np.array([0.5, 2.0])
        basis, projector = _projector(rng, "relaxed", scores)
        grad = rng.normal(size=6)
        optimizer = Adam(lr=0.01)
        optimizer.advance()
        step = gate_weight_step(optimizer, ("w",), grad, projector, 0)
        expected = -0.01 * (1.0 - np.exp(-scores)) * np.sign(basis.T @ grad)
        np.testing.assert_allclose(basis.T @ step, expected, rtol=1e-6)

    def test_relaxed_step_is_single_shrinkage_of_free_step(self, rng):
        scores = np.array([0.3, 1.5])
        basis, projector = _projector(rng, "relaxed", scores)
        keep = 1.0 - np.exp(-scores)
        rotation = projector.rotation(0)
        np.testing.assert_array_equal(rotation[:, :2], basis)
        constrained, free = Adam(lr=0.01), Adam(lr=0.01)
        for _ in range(6):
            grad = rng.normal(size=6)
            constrained.advance()
            free.advance()
            step = gate_weight_step(constrained, ("w",), grad, projector, 0)
            unconstrained = rotation @ free.update(("w",), rotation.T @ grad)
            np.testing.assert_allclose(basis.T @ step, keep * (basis.T @ unconstrained), rtol=0, atol=1e-14)
            np.testing.assert_allclose(step - basis @ (basis.T @ step),
                                       unconstrained - basis @ (basis.T @ unconstrained), rtol=0, atol=1e-14)

    def test_hard_step_stays_outside_bank(self, rng):
        basis, projector = _projector(rng, "hard", [0.0, 0.0])
        optimizer = Adam(lr=0.01)
        for _ in range(4):
            optimizer.advance()
            step = gate_weight_step(optimizer, ("w",), rng.normal(size=6), projector, 0)
            np.testing.assert_allclose(basis.T @ step, 0.0, atol=1e-15)
            assert np.linalg.norm(step) > 0.0

    def test_step_without_projector_is_plain_adam(self, rng):
        grad = rng.normal(size=4)
        a, b = Adam(lr=0.02), Adam(lr=0.02)
        a.advance()
        b.advance()
        np.testing.assert_array_equal(gate_weight_step(a, ("w",), grad, None, 0), b.update(("w",), grad))

    def test_zero_lr_leaves_gates(self, rng):
        model = _mixture(rng)
        seed = SeedBuffer(rng.normal(size=(6, 5)), [0, 1, 2])
        out = adapt_task(model, init_model(SIZES, seed=3), seed, None, MingleConfig(lr=0.0), rng_seed=0)
        np.testing.assert_array_equal(out.slots[0][1].gate.weight, model.slots[0][1].gate.weight)

    def test_adaptation_lowers_kl(self, tiny_suite):
        theta0 = init_model([8, 8, 8, 8], seed=0)
        head = make_head(tiny_suite.num_classes, 8, seed=1)
        tuned, seed = _trained_pair(tiny_suite, 0, theta0, head)
        merger = MingleMerger(theta0, head, MingleConfig(rank=2, subspace_k=2, steps=40, batch_size=8))
        merger.step(tuned, seed, rng_seed=0)
        curve = merger.loss_curves[0]
        assert curve[-1] < curve[0]

    def test_input_model_untouched(self, rng):
        model = _mixture(rng)
        before = model.slots[1][1].gate.weight.copy()
        seed = SeedBuffer(rng.normal(size=(6, 5)), [0, 1, 2])
        adapt_task(model, init_model(SIZES, seed=3), seed, None, MingleConfig(steps=3), rng_seed=0)
        np.testing.assert_array_equal(model.slots[1][1].gate.weight, before)

    def test_unknown_policy(self):
        with pytest.raises(ValidationError):
            MingleConfig(trainable_gates="oldest")


class TestMingleMerger:
    @pytest.fixture
    def setup(self, tiny_suite):
        theta0 = init_model([8, 8, 8, 8], seed=0)
        head = make_head(tiny_suite.num_classes, 8, seed=1)
        pairs = [_trained_pair(tiny_suite, t, theta0, head) for t in range(3)]
        return theta0, head, pairs

    def test_old_gates_and_factors_frozen(self, setup):
        theta0, head, pairs = setup
        merger = MingleMerger(theta0, head, MingleConfig(rank=2, subspace_k=2, steps=5, batch_size=8))
        merger.step(*pairs[0], rng_seed=0)
        gate = merger.model.slots[1][0].gate.copy()
        checksums = merger.model.expert_checksums()
        merger.step(*pairs[1], rng_seed=1)
        assert merger.t == 2
        np.testing.assert_array_equal(merger.model.slots[1][0].gate.weight, gate.weight)
        assert merger.model.slots[1][0].gate.bias == gate.bias
        assert [layer[:1] for layer in merger.model.expert_checksums()] == checksums
        assert merger.model.unfrozen_tasks() == []

    def test_same_seed_is_bitwise_reproducible(self, setup):
        theta0, head, pairs = setup

        def gates():
            merger = MingleMerger(theta0, head, MingleConfig(rank=2, subspace_k=2, steps=10, batch_size=4))
            for t, pair in enumerate(pairs):
                merger.step(*pair, rng_seed=t)
            return [(slot.gate.weight.tobytes(), slot.gate.bias) for layer in merger.model.slots for slot in layer]

        assert gates() == gates()

    def test_bank_grows_by_at_most_k(self, setup):
        theta0, head, pairs = setup
        merger = MingleMerger(theta0, head, MingleConfig(rank=2, subspace_k=2, steps=3, batch_size=8))
        previous = 0
        for t, pair in enumerate(pairs):
            merger.step(*pair, rng_seed=t)
            columns = merger.bank.columns(0)
            assert previous < columns <= previous + 2
            previous = columns

    def test_fixed_gates(self, setup):
        theta0, head, pairs = setup
        merger = MingleMerger(theta0, head, MingleConfig(rank=2, fixed_gates=True))
        merger.step(*pairs[0], rng_seed=0)
        gate = merger.model.slots[0][0].gate
        assert gate.frozen and gate.bias == 1.0 and not np.any(gate.weight)
        assert merger.loss_curves == []

    def test_interference_and_activation_matrix(self, setup, tiny_suite):
        theta0, head, pairs = setup
        merger = MingleMerger(theta0, head, MingleConfig(rank=2, subspace_k=2, steps=5, batch_size=8))
        for t, pair in enumerate(pairs[:2]):
            merger.step(*pair, rng_seed=t)
        x = tiny_suite.tasks[0].test.inputs
        scores = interference(merger.model, x, task=1)
        assert set(scores) == {0, 1, 2} and all(v >= 0 for v in scores.values())
        g = gate_activation_matrix(merger.model, [x, tiny_suite.tasks[1].test.inputs])
        assert g.shape == (2, 2)
        with pytest.raises(ValidationError):
            interference(merger.model, x, task=5)

    def test_hard_projection_suppresses_interference(self):
        suite = generate_suite(num_tasks=2, classes_per_task=2, input_dim=8, samples_per_class=30,
                               margin=4.0, seed=9, test_per_class=20, intrinsic_dim=3)
        theta0 = init_model([8, 8, 8, 8], seed=0)
        head = make_head(suite.num_classes, 8, seed=1)
        config = MingleConfig(rank=2, subspace_k=3, steps=30, batch_size=8, projection="hard",
                              learn_gate_bias=False, gated_layers=[0])
        merger = MingleMerger(theta0, head, config)
        tuned0, seed0 = _trained_pair(suite, 0, theta0, head)
        merger.step(tuned0, seed0, rng_seed=0)
        block = head.restrict(suite.tasks[0].class_ids)
        before, _ = merged_forward(merger.model, seed0.inputs, block)

        merger.step(*_trained_pair(suite, 1, theta0, head), rng_seed=1)
        after, _ = merged_forward(merger.model, seed0.inputs, block)
        assert np.any(merger.model.slots[0][1].gate.weight)
        assert np.max(np.abs(after - before)) < 1e-6


def test_merged_checkpoint_round_trip(tmp_path, rng):
    model = _mixture(rng)
    model.freeze(0)
    save_merged(tmp_path / "merged.json", model, {"seed": 1})
    loaded, meta = load_merged(tmp_path / "merged.json")
    x = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(merged_forward(loaded, x)[0], merged_forward(model, x)[0])
    assert loaded.unfrozen_tasks() == [1] and meta == {"seed": 1}
