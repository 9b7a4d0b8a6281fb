"""Finite-difference verification of the tape gradients.

Runs at float64 on a deliberately tiny model; central differences with
step 1e-5 must agree with the analytic gradients to better than 1e-4
relative error on every prompt entry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .embeddings import SyntheticSpec, synthesize
from .interpreter import InterpreterConfig, build_frozen
from .model import MemoryPrompt
from .training import TrainConfig, TrainingState, stimulation_rate, total_loss

FD_STEP = 1e-5
REL_TOL = 1e-4

TINY_CONFIG = InterpreterConfig(
    model_dim=16, layers=1, heads=2, feed_forward_dim=32,
    vocab_size=64, max_sequence_len=16, seed=7,
)


@dataclass
class GradCheckReport:
    checks: list[tuple[str, float]]  # (name, max relative error)
    skipped: bool = False

    @property
    def max_error(self) -> float:
        return max((e for _, e in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return self.skipped or self.max_error < REL_TOL


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def central_difference(fn, theta: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Per-entry central finite differences of a scalar function of theta."""
    out = np.zeros_like(theta)
    flat = out.reshape(-1)
    base = theta.copy()
    for i in range(base.size):
        probe = base.reshape(-1)
        orig = probe[i]
        probe[i] = orig + step
        up = fn(base)
        probe[i] = orig - step
        down = fn(base)
        probe[i] = orig
        flat[i] = (up - down) / (2.0 * step)
    return out


def run_grad_check(seed: int = 0, prompt_length: int = 2) -> GradCheckReport:
    """Check total-loss and stimulation-rate gradients on the tiny model."""
    if prompt_length == 0:
        return GradCheckReport(checks=[], skipped=True)
    frozen = build_frozen(TINY_CONFIG, dtype=np.float64)
    d = TINY_CONFIG.model_dim
    rng = np.random.default_rng(seed)
    theta0 = rng.normal(0.0, 0.02, size=(prompt_length, d))

    spec = SyntheticSpec(classes=3, train_per_class=2, test_per_class=1,
                         dim=d, separation=1.0, noise=0.05, seed=seed)
    train_ds, _ = synthesize(spec)
    labels = train_ds.labels
    batch = [(s, s.class_id) for s in train_ds.samples]
    config = TrainConfig(learning_rate=0.02, batch_size=8, epochs_base=1,
                         epochs_incremental=1, alpha=0.5, beta=10.0, seed=seed)

    # exercise the penalty path: anchor offset from theta, nonzero gamma
    theta_star = theta0 + rng.normal(0.0, 0.01, size=theta0.shape)
    gamma = rng.normal(0.0, 1.0, size=theta0.shape)
    state = TrainingState(prompt=MemoryPrompt(theta0.copy()), gamma_acc=gamma,
                          theta_star=theta_star, session_index=1,
                          learned_labels=dict(labels))

    def loss_value(theta: np.ndarray) -> float:
        leaf = ad.Tensor(theta, requires_grad=True, dtype=np.float64)
        return total_loss(batch, leaf, frozen, labels, state, config).item()

    leaf = ad.Tensor(theta0, requires_grad=True, dtype=np.float64)
    analytic_loss = ad.grad(total_loss(batch, leaf, frozen, labels, state, config), leaf)
    numeric_loss = central_difference(loss_value, theta0)
    loss_err = float(relative_error(analytic_loss, numeric_loss).max())

    image = train_ds.samples[0].vector.astype(np.float64)
    label = labels[train_ds.samples[0].class_id]
    prompt = MemoryPrompt(theta0.copy())
    analytic_rate = stimulation_rate(frozen, prompt, label, image)

    def inner_value(theta: np.ndarray) -> float:
        return float(
            stimulation_rate_forward(frozen, theta, label, image)
        )

    numeric_rate = central_difference(inner_value, theta0)
    rate_err = float(relative_error(analytic_rate, numeric_rate).max())

    return GradCheckReport(checks=[("total_loss", loss_err), ("stimulation_rate", rate_err)])


def stimulation_rate_forward(frozen, theta: np.ndarray, label: str, image: np.ndarray) -> float:
    """Forward-only value of the image/class-embedding inner product."""
    from . import interpreter as interp

    tokens = interp.tokenize(label, frozen.config, theta.shape[0])
    m = interp.interpret(frozen, ad.Tensor(theta, dtype=theta.dtype), tokens)
    return float(image @ m.data)
