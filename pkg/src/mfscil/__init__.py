"""Memory-prompt few-shot class-incremental learner.

A trainable prompt matrix is prepended to class-label token embeddings,
run through a small frozen transformer to produce class embeddings, and
classified against image embeddings by cosine similarity. Training
consolidates the prompt across sessions with a stimulation-weighted
anchor penalty.
"""

from .autodiff import Tensor, cosine_similarity, grad
from .embeddings import (
    EmbeddingDataset,
    ImageEmbedding,
    SyntheticSpec,
    load_embeddings,
    synthesize,
    write_embeddings,
)
from .errors import ConfigError, DataError, MfscilError, NumericError
from .interpreter import (
    FrozenInterpreter,
    InterpreterConfig,
    build_frozen,
    interpret,
    interpret_class_set,
    load_labels,
    tokenize,
    write_labels,
)
from .model import ClassEmbeddingBank, MemoryPrompt, build_bank, classify, init_prompt, score
from .protocol import SessionPlan, build_plan, evaluate, run_experiment, session_data
from .training import (
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

__version__ = "0.1.0"
