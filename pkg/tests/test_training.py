"""Loss terms, stimulation rates, SGD, session driver, and checkpoint IO."""

import math

import numpy as np
import pytest

from mfscil import autodiff as ad
from mfscil.embeddings import ImageEmbedding, SyntheticSpec, synthesize
from mfscil.errors import DataError, NumericError
from mfscil.interpreter import InterpreterConfig, build_frozen
from mfscil.model import MemoryPrompt, build_bank_traced, init_prompt
from mfscil.training import (
    TrainConfig,
    TrainingState,
    accumulate_gamma,
    consolidation_penalty,
    load_checkpoint,
    new_state,
    save_checkpoint,
    session_cross_entropy,
    sgd_step,
    stimulation_rate,
    total_loss,
    train_session,
)

SMALL = InterpreterConfig(model_dim=16, layers=1, heads=2, feed_forward_dim=32,
                          vocab_size=64, max_sequence_len=16, seed=3)


def small_world(classes=3, train_per_class=2, seed=0, noise=0.05):
    frozen = build_frozen(SMALL, dtype=np.float64)
    spec = SyntheticSpec(classes=classes, train_per_class=train_per_class,
                         test_per_class=1, dim=16, separation=1.0, noise=noise, seed=seed)
    train, test = synthesize(spec)
    return frozen, train, test


def fixed_bank(sims_rows):
    """A traced bank whose normalized rows produce the wanted cosine row."""
    return ad.Tensor(np.asarray(sims_rows, dtype=np.float64))


class TestSessionCrossEntropy:
    def test_singleton_bank_zero_loss(self):
        img = ImageEmbedding(vector=np.array([1.0, 0.0]), class_id=0, sample_id=0)
        bank = fixed_bank([[3.0, 0.0]])
        loss = session_cross_entropy([(img, 0)], None, [0], bank, beta=1.0)
        assert abs(loss.item()) < 1e-12

    def test_uniform_similarities_ln_c(self):
        # image orthogonal to the plane spanned by identical-similarity rows
        img = ImageEmbedding(vector=np.array([1.0, 0.0, 0.0]), class_id=0, sample_id=0)
        rows = np.array([[1.0, 1.0, 0.0], [1.0, -1.0, 0.0], [1.0, 0.0, 1.0], [1.0, 0.0, -1.0]])
        loss = session_cross_entropy([(img, 0)], None, [0, 1, 2, 3], fixed_bank(rows), beta=1.0)
        assert abs(loss.item() - math.log(4)) < 1e-12

    def test_two_class_analytic(self):
        # cosine row (1, 0) with beta=1 and true class first: -ln(e/(e+1))
        img = ImageEmbedding(vector=np.array([1.0, 0.0]), class_id=0, sample_id=0)
        rows = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss = session_cross_entropy([(img, 0)], None, [0, 1], fixed_bank(rows), beta=1.0)
        want = -math.log(math.e / (math.e + 1.0))
        assert abs(loss.item() - want) < 1e-12
        assert abs(loss.item() - 0.3133) < 1e-4

    def test_beta_scales_logits(self):
        img = ImageEmbedding(vector=np.array([1.0, 0.0]), class_id=0, sample_id=0)
        rows = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss = session_cross_entropy([(img, 0)], None, [0, 1], fixed_bank(rows), beta=10.0)
        want = -math.log(math.exp(10.0) / (math.exp(10.0) + 1.0))
        assert abs(loss.item() - want) < 1e-12

    def test_label_outside_learned_rejected(self):
        img = ImageEmbedding(vector=np.ones(2), class_id=9, sample_id=0)
        with pytest.raises(DataError):
            session_cross_entropy([(img, 9)], None, [0, 1], fixed_bank(np.eye(2)), beta=1.0)

    def test_empty_batch_rejected(self):
        with pytest.raises(DataError):
            session_cross_entropy([], None, [0], fixed_bank(np.eye(2)), beta=1.0)


class TestStimulationRate:
    def test_prompt_len_zero_empty(self):
        frozen, train, _ = small_world()
        rate = stimulation_rate(frozen, MemoryPrompt(np.zeros((0, 16))), "class 0",
                                train.samples[0].vector)
        assert rate.shape == (0, 16)

    def test_zero_image_zero_rate(self):
        frozen, _, _ = small_world()
        prompt = MemoryPrompt(np.random.default_rng(0).normal(0, 0.02, size=(2, 16)))
        rate = stimulation_rate(frozen, prompt, "class 0", np.zeros(16))
        np.testing.assert_array_equal(rate, np.zeros((2, 16)))

    def test_linearity_in_image(self):
        frozen, train, _ = small_world()
        prompt = MemoryPrompt(np.random.default_rng(1).normal(0, 0.02, size=(2, 16)))
        v = train.samples[0].vector.astype(np.float64)
        a = stimulation_rate(frozen, prompt, "class 0", v)
        b = stimulation_rate(frozen, prompt, "class 0", 2.0 * v)
        np.testing.assert_allclose(b, 2.0 * a, rtol=1e-12)

    def test_equals_tape_gradient_of_inner_product(self):
        from mfscil import interpreter as interp

        frozen, train, _ = small_world()
        theta = np.random.default_rng(2).normal(0, 0.02, size=(2, 16))
        v = train.samples[0].vector.astype(np.float64)
        rate = stimulation_rate(frozen, MemoryPrompt(theta.copy()), "class 0", v)

        leaf = ad.Tensor(theta, requires_grad=True, dtype=np.float64)
        toks = interp.tokenize("class 0", SMALL, 2)
        m = interp.interpret(frozen, leaf, toks)
        direct = ad.grad(ad.dot(ad.Tensor(v, dtype=np.float64), m), leaf)
        np.testing.assert_array_equal(rate, direct)

    def test_matches_finite_differences(self):
        from mfscil.gradcheck import central_difference, relative_error, stimulation_rate_forward

        frozen, train, _ = small_world()
        theta = np.random.default_rng(3).normal(0, 0.02, size=(2, 16))
        v = train.samples[0].vector.astype(np.float64)
        rate = stimulation_rate(frozen, MemoryPrompt(theta.copy()), "class 0", v)
        numeric = central_difference(
            lambda th: stimulation_rate_forward(frozen, th, "class 0", v), theta.copy()
        )
        assert relative_error(rate, numeric).max() < 1e-4

    def test_dim_mismatch_rejected(self):
        frozen, _, _ = small_world()
        with pytest.raises(DataError):
            stimulation_rate(frozen, MemoryPrompt(np.zeros((2, 16))), "class 0", np.zeros(8))


class TestConsolidationPenalty:
    def test_zero_gamma_zero_penalty(self):
        leaf = ad.Tensor(np.ones((2, 3)), requires_grad=True, dtype=np.float64)
        p = consolidation_penalty(leaf, np.zeros((2, 3)), np.zeros((2, 3)), alpha=5.0)
        assert p.item() == 0.0

    def test_at_anchor_zero_penalty(self):
        theta = np.random.default_rng(0).normal(size=(2, 3))
        leaf = ad.Tensor(theta, requires_grad=True, dtype=np.float64)
        p = consolidation_penalty(leaf, theta.copy(), np.ones((2, 3)), alpha=5.0)
        assert p.item() == 0.0

    def test_analytic_two_entry_case(self):
        # |Theta| = 2, weights (1, 0), alpha = 2, drift (3, 5) -> (2/2)*(1*9) = 9
        leaf = ad.Tensor(np.array([[3.0, 5.0]]), requires_grad=True, dtype=np.float64)
        p = consolidation_penalty(leaf, np.zeros((1, 2)), np.array([[1.0, 0.0]]), alpha=2.0)
        assert abs(p.item() - 9.0) < 1e-12

    def test_gamma_normalized_to_unit_max(self):
        leaf = ad.Tensor(np.array([[1.0, 1.0]]), requires_grad=True, dtype=np.float64)
        a = consolidation_penalty(leaf, np.zeros((1, 2)), np.array([[4.0, 2.0]]), alpha=1.0)
        b = consolidation_penalty(leaf, np.zeros((1, 2)), np.array([[1.0, 0.5]]), alpha=1.0)
        assert abs(a.item() - b.item()) < 1e-12

    def test_negative_gamma_weighted_by_magnitude(self):
        leaf = ad.Tensor(np.array([[1.0, 1.0]]), requires_grad=True, dtype=np.float64)
        a = consolidation_penalty(leaf, np.zeros((1, 2)), np.array([[1.0, -1.0]]), alpha=1.0)
        b = consolidation_penalty(leaf, np.zeros((1, 2)), np.array([[1.0, 1.0]]), alpha=1.0)
        assert abs(a.item() - b.item()) < 1e-12

    def test_missing_anchor_rejected(self):
        leaf = ad.Tensor(np.ones((1, 2)), requires_grad=True, dtype=np.float64)
        with pytest.raises(DataError):
            consolidation_penalty(leaf, None, np.ones((1, 2)), alpha=1.0)


class TestTotalLoss:
    def config(self, alpha=1.0):
        return TrainConfig(learning_rate=0.02, batch_size=8, epochs_base=1,
                           epochs_incremental=1, alpha=alpha, beta=10.0, seed=0)

    def world(self):
        frozen, train, _ = small_world()
        labels = dict(train.labels)
        batch = [(s, s.class_id) for s in train.samples]
        theta = np.random.default_rng(4).normal(0, 0.02, size=(2, 16))
        return frozen, labels, batch, theta

    def ce_only(self, frozen, labels, batch, theta):
        leaf = ad.Tensor(theta, requires_grad=True, dtype=np.float64)
        ids, bank = build_bank_traced(frozen, leaf, labels)
        return session_cross_entropy(batch, leaf, ids, bank, beta=10.0).item()

    def test_base_session_equals_cross_entropy(self):
        frozen, labels, batch, theta = self.world()
        state = TrainingState(prompt=MemoryPrompt(theta.copy()),
                              gamma_acc=np.zeros((2, 16)), theta_star=None)
        leaf = ad.Tensor(theta, requires_grad=True, dtype=np.float64)
        loss = total_loss(batch, leaf, frozen, labels, state, self.config())
        assert loss.item() == self.ce_only(frozen, labels, batch, theta)

    def test_at_anchor_equals_cross_entropy(self):
        frozen, labels, batch, theta = self.world()
        state = TrainingState(prompt=MemoryPrompt(theta.copy()),
                              gamma_acc=np.ones((2, 16)), theta_star=theta.copy())
        leaf = ad.Tensor(theta, requires_grad=True, dtype=np.float64)
        loss = total_loss(batch, leaf, frozen, labels, state, self.config())
        assert abs(loss.item() - self.ce_only(frozen, labels, batch, theta)) < 1e-15

    def test_alpha_zero_equals_cross_entropy(self):
        frozen, labels, batch, theta = self.world()
        state = TrainingState(prompt=MemoryPrompt(theta.copy()),
                              gamma_acc=np.ones((2, 16)),
                              theta_star=theta + 0.5)
        leaf = ad.Tensor(theta, requires_grad=True, dtype=np.float64)
        loss = total_loss(batch, leaf, frozen, labels, state, self.config(alpha=0.0))
        assert abs(loss.item() - self.ce_only(frozen, labels, batch, theta)) < 1e-15


class TestSgdStep:
    def test_zero_gradient_no_change(self):
        prompt = MemoryPrompt(np.ones((2, 3), dtype=np.float32))
        sgd_step(prompt, np.zeros((2, 3)), learning_rate=0.5)
        np.testing.assert_array_equal(prompt.matrix, np.ones((2, 3)))

    def test_zero_learning_rate_no_change(self):
        prompt = MemoryPrompt(np.ones((2, 3), dtype=np.float32))
        sgd_step(prompt, np.ones((2, 3)), learning_rate=0.0)
        np.testing.assert_array_equal(prompt.matrix, np.ones((2, 3)))

    def test_analytic_step(self):
        prompt = MemoryPrompt(np.array([[1.0]], dtype=np.float32))
        sgd_step(prompt, np.array([[2.0]]), learning_rate=0.5)
        assert prompt.matrix[0, 0] == 0.0

    def test_non_finite_gradient_rejected(self):
        prompt = MemoryPrompt(np.ones((1, 1), dtype=np.float32))
        with pytest.raises(NumericError):
            sgd_step(prompt, np.array([[np.nan]]), learning_rate=0.1)


class TestAccumulateGamma:
    def test_prompt_len_zero_stays_zero(self):
        frozen, train, _ = small_world()
        state = new_state(MemoryPrompt(np.zeros((0, 16))))
        accumulate_gamma(state, frozen, dict(train.labels), train.samples)
        assert state.gamma_acc.shape == (0, 16)

    def test_additivity_over_classes(self):
        frozen, train, _ = small_world()
        prompt = MemoryPrompt(np.random.default_rng(5).normal(0, 0.02, size=(2, 16)))
        state = new_state(prompt.copy())
        accumulate_gamma(state, frozen, dict(train.labels), train.samples)
        total = np.zeros((2, 16))
        for cid, label in train.labels.items():
            first = min(train.class_samples(cid), key=lambda s: s.sample_id)
            total += stimulation_rate(frozen, prompt, label, first.vector)
        np.testing.assert_allclose(state.gamma_acc, total, rtol=1e-12)

    def test_single_class_equals_direct_call(self):
        frozen, train, _ = small_world()
        prompt = MemoryPrompt(np.random.default_rng(6).normal(0, 0.02, size=(2, 16)))
        state = new_state(prompt.copy())
        accumulate_gamma(state, frozen, {0: train.labels[0]}, train.class_samples(0))
        direct = stimulation_rate(frozen, prompt, train.labels[0],
                                  train.class_samples(0)[0].vector)
        np.testing.assert_array_equal(state.gamma_acc, direct)

    def test_repeating_doubles(self):
        frozen, train, _ = small_world()
        prompt = MemoryPrompt(np.random.default_rng(7).normal(0, 0.02, size=(2, 16)))
        state = new_state(prompt.copy())
        accumulate_gamma(state, frozen, dict(train.labels), train.samples)
        once = state.gamma_acc.copy()
        accumulate_gamma(state, frozen, dict(train.labels), train.samples)
        np.testing.assert_allclose(state.gamma_acc, 2.0 * once, rtol=1e-12)

    def test_uses_first_sample_by_sample_id(self):
        frozen, train, _ = small_world()
        prompt = MemoryPrompt(np.random.default_rng(8).normal(0, 0.02, size=(2, 16)))
        state = new_state(prompt.copy())
        shuffled = list(reversed(train.class_samples(0)))
        accumulate_gamma(state, frozen, {0: train.labels[0]}, shuffled)
        first = min(train.class_samples(0), key=lambda s: s.sample_id)
        direct = stimulation_rate(frozen, prompt, train.labels[0], first.vector)
        np.testing.assert_array_equal(state.gamma_acc, direct)


class TestTrainSession:
    def config(self, **kw):
        base = dict(learning_rate=1.0, batch_size=4, epochs_base=2,
                    epochs_incremental=2, alpha=1.0, beta=10.0, seed=0)
        base.update(kw)
        return TrainConfig(**base)

    def test_base_session_sets_anchor_and_gamma(self):
        frozen, train, _ = small_world()
        state = new_state(init_prompt(2, 16, seed=0, dtype=np.float64))
        train_session(state, frozen, dict(train.labels), train.samples, self.config())
        assert state.session_index == 1
        assert state.theta_star is not None
        np.testing.assert_array_equal(state.theta_star, state.prompt.matrix)
        assert np.abs(state.gamma_acc).max() > 0
        assert state.metrics[-1]["classes"] == 3

    def test_deterministic(self):
        frozen, train, _ = small_world()

        def once():
            state = new_state(init_prompt(2, 16, seed=0, dtype=np.float64))
            train_session(state, frozen, dict(train.labels), train.samples, self.config())
            return state.prompt.matrix

        np.testing.assert_array_equal(once(), once())

    def test_class_overlap_rejected(self):
        frozen, train, _ = small_world()
        state = new_state(init_prompt(2, 16, seed=0, dtype=np.float64))
        train_session(state, frozen, dict(train.labels), train.samples, self.config())
        with pytest.raises(DataError, match="overlap"):
            train_session(state, frozen, {0: train.labels[0]},
                          train.class_samples(0), self.config())

    def test_empty_session_rejected(self):
        frozen, train, _ = small_world()
        state = new_state(init_prompt(2, 16, seed=0, dtype=np.float64))
        with pytest.raises(DataError):
            train_session(state, frozen, {}, [], self.config())

    def test_sample_outside_session_rejected(self):
        frozen, train, _ = small_world()
        state = new_state(init_prompt(2, 16, seed=0, dtype=np.float64))
        with pytest.raises(DataError):
            train_session(state, frozen, {0: train.labels[0]}, train.samples, self.config())

    def test_anchor_immutable_across_incremental_sessions(self):
        frozen, train, _ = small_world(classes=5)
        state = new_state(init_prompt(2, 16, seed=0, dtype=np.float64))
        base = {c: train.labels[c] for c in (0, 1, 2)}
        base_samples = [s for s in train.samples if s.class_id in base]
        train_session(state, frozen, base, base_samples, self.config())
        anchor = state.theta_star.copy()
        for cid in (3, 4):
            train_session(state, frozen, {cid: train.labels[cid]},
                          train.class_samples(cid), self.config())
            np.testing.assert_array_equal(state.theta_star, anchor)
        assert state.session_index == 3

    def test_frozen_weights_unchanged_by_training(self):
        frozen, train, _ = small_world()
        before = frozen.checksum()
        state = new_state(init_prompt(2, 16, seed=0, dtype=np.float64))
        train_session(state, frozen, dict(train.labels), train.samples, self.config())
        assert frozen.checksum() == before


class TestCheckpointFormat:
    def state(self, with_anchor=True):
        rng = np.random.default_rng(9)
        theta = rng.normal(size=(2, 4)).astype(np.float32)
        return TrainingState(
            prompt=MemoryPrompt(theta),
            gamma_acc=rng.normal(size=(2, 4)).astype(np.float32),
            theta_star=rng.normal(size=(2, 4)).astype(np.float32) if with_anchor else None,
            session_index=3,
        )

    def test_round_trip_bit_exact(self, tmp_path):
        path = tmp_path / "s.mfck"
        state = self.state()
        save_checkpoint(path, state)
        back = load_checkpoint(path)
        assert back.session_index == 3
        for a, b in ((state.prompt.matrix, back.prompt.matrix),
                     (state.theta_star, back.theta_star),
                     (state.gamma_acc, back.gamma_acc)):
            assert a.tobytes() == b.tobytes()

    def test_round_trip_without_anchor(self, tmp_path):
        path = tmp_path / "na.mfck"
        save_checkpoint(path, self.state(with_anchor=False))
        back = load_checkpoint(path)
        assert back.theta_star is None

    def test_header_layout(self, tmp_path):
        import struct

        path = tmp_path / "h.mfck"
        save_checkpoint(path, self.state())
        raw = path.read_bytes()
        magic, version, L, D, session, flags = struct.unpack_from("<4sIIIII", raw, 0)
        assert magic == b"MFCK" and version == 1
        assert (L, D, session, flags) == (2, 4, 3, 1)
        assert len(raw) == 24 + 3 * 4 * L * D

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.mfck"
        save_checkpoint(path, self.state())
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="magic"):
            load_checkpoint(path)

    def test_truncation_rejected(self, tmp_path):
        path = tmp_path / "t.mfck"
        save_checkpoint(path, self.state())
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(DataError):
            load_checkpoint(path)
