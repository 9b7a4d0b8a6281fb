"""Minimal end-to-end run through the library API.

Synthesizes a small embedding dataset, trains the memory prompt over a
base session plus two 2-way 5-shot incremental sessions, and prints the
union accuracy after each session. Finishes in well under a minute.

    python3 demos/quickstart.py
"""

import math

from mfscil.embeddings import SyntheticSpec, synthesize
from mfscil.interpreter import InterpreterConfig, build_frozen
from mfscil.protocol import build_plan, run_experiment
from mfscil.training import TrainConfig

SEED = 4
DIM = 64

spec = SyntheticSpec(classes=14, train_per_class=12, test_per_class=10,
                     dim=DIM, separation=1.0, noise=0.05, seed=SEED)
train, test = synthesize(spec)

# One encoder layer with a sharpened init keeps the prompt-to-embedding
# map smooth enough for few-shot sessions at this width (see README).
interpreter = InterpreterConfig(model_dim=DIM, layers=1, heads=4,
                                feed_forward_dim=128, vocab_size=4096,
                                max_sequence_len=48, seed=SEED)
frozen = build_frozen(interpreter, weight_std=2 * 0.02 * math.sqrt(768 / DIM))

plan = build_plan(train, "custom", seed=SEED, ways=2, shots=5, base_count=10)
config = TrainConfig(learning_rate=3.0, batch_size=32, epochs_base=1000,
                     epochs_incremental=30, alpha=10.0, beta=10.0, seed=SEED)

result = run_experiment(frozen, train, test, plan, prompt_length=16,
                        train_config=config, seed=SEED)

print(f"{'session':>8} {'classes':>8} {'accuracy':>9} {'loss':>8}")
for row in result.rows:
    print(f"{row.session:>8} {row.classes:>8} {row.accuracy:>9.3f} {row.loss:>8.4f}")
