"""Session planning, N-way K-shot sampling, union-set evaluation, and the
full experiment loop.

A plan splits class ids into one large base session plus fixed-way
incremental sessions; evaluation after session t always covers the union
of everything learned so far.
"""

from __future__ import annotations

import csv
import io
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .embeddings import EmbeddingDataset, ImageEmbedding
from .errors import ConfigError, DataError
from .model import ClassEmbeddingBank, MemoryPrompt, build_bank, classify, init_prompt
from .training import TrainConfig, TrainingState, new_state, train_session

PLAN_KINDS = {
    "cifar_like": (60, 5, 5),   # base classes, ways, shots
    "cub_like": (100, 10, 5),
}


@dataclass(frozen=True)
class SessionPlan:
    base_classes: tuple[int, ...]
    incremental: tuple[tuple[int, ...], ...]
    ways: int
    shots: int

    @property
    def sessions(self) -> int:
        return 1 + len(self.incremental)

    def classes_for(self, t: int) -> tuple[int, ...]:
        if t < 1 or t > self.sessions:
            raise ConfigError(f"session index {t} outside [1, {self.sessions}]")
        return self.base_classes if t == 1 else self.incremental[t - 2]

    def learned_through(self, t: int) -> list[int]:
        out = list(self.base_classes)
        for s in self.incremental[: t - 1]:
            out.extend(s)
        return sorted(out)


@dataclass
class SessionData:
    session: int
    train: list[ImageEmbedding]
    test: list[ImageEmbedding]
    classes: tuple[int, ...]


@dataclass
class ResultRow:
    session: int
    classes: int
    accuracy: float
    loss: float
    seconds: float


def build_plan(dataset: EmbeddingDataset, kind: str, seed: int,
               ways: int | None = None, shots: int | None = None,
               base_count: int | None = None) -> SessionPlan:
    """Seeded split of the dataset's class ids into base + incremental sessions."""
    if kind in PLAN_KINDS:
        base_count, ways, shots = PLAN_KINDS[kind]
    elif kind == "custom":
        if not (ways and shots and base_count):
            raise ConfigError("custom plan needs ways, shots, and base_count")
    else:
        raise ConfigError(f"unknown plan kind {kind!r}")
    class_ids = dataset.class_ids
    if len(class_ids) < base_count + ways:
        raise DataError(
            f"{len(class_ids)} classes cannot fill a base of {base_count} plus a {ways}-way session"
        )
    for cid in class_ids:
        if len(dataset.class_samples(cid)) < shots:
            raise DataError(f"class {cid} has fewer than {shots} training samples")
    rng = np.random.default_rng(seed)
    order = [class_ids[i] for i in rng.permutation(len(class_ids))]
    base = tuple(sorted(order[:base_count]))
    rest = order[base_count:]
    n_inc = len(rest) // ways
    incremental = tuple(tuple(sorted(rest[i * ways:(i + 1) * ways])) for i in range(n_inc))
    return SessionPlan(base_classes=base, incremental=incremental, ways=ways, shots=shots)


def session_data(plan: SessionPlan, train_ds: EmbeddingDataset, test_ds: EmbeddingDataset,
                 t: int, seed: int) -> SessionData:
    """Training pool and union test set for session t.

    The base session keeps every available training sample; incremental
    sessions draw exactly K per class without replacement.
    """
    classes = plan.classes_for(t)
    if t == 1:
        train = [s for cid in classes for s in train_ds.class_samples(cid)]
    else:
        rng = np.random.default_rng([seed, t])
        train = []
        for cid in classes:
            pool = train_ds.class_samples(cid)
            if len(pool) < plan.shots:
                raise DataError(f"class {cid} has fewer than {plan.shots} training samples")
            chosen = rng.choice(len(pool), size=plan.shots, replace=False)
            train.extend(pool[i] for i in sorted(chosen))
    learned = set(plan.learned_through(t))
    test = [s for s in test_ds.samples if s.class_id in learned]
    return SessionData(session=t, train=train, test=test, classes=classes)


def evaluate(bank: ClassEmbeddingBank, test: list[ImageEmbedding], threads: int = 1) -> float:
    """Top-1 micro accuracy of cosine classification over the test samples."""
    if not test:
        raise DataError("empty test set")
    if threads <= 1 or len(test) < 2 * threads:
        hits = sum(classify(s.vector, bank) == s.class_id for s in test)
        return hits / len(test)
    chunks = np.array_split(np.arange(len(test)), threads)

    def count(idx):
        return sum(classify(test[i].vector, bank) == test[i].class_id for i in idx)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        hits = sum(pool.map(count, chunks))
    return hits / len(test)


def eval_threads() -> int:
    raw = os.environ.get("MFSCIL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"MFSCIL_THREADS={raw!r} is not an integer")


@dataclass
class ExperimentResult:
    rows: list[ResultRow]
    state: TrainingState
    plan: SessionPlan


def run_experiment(frozen, train_ds: EmbeddingDataset, test_ds: EmbeddingDataset,
                   plan: SessionPlan, prompt_length: int, train_config: TrainConfig,
                   seed: int, suffix: str | None = None,
                   state: TrainingState | None = None) -> ExperimentResult:
    """Train session by session, evaluating the union test set after each.

    Passing a partially-trained state resumes after its session index.
    """
    if state is None:
        prompt = init_prompt(prompt_length, frozen.config.model_dim, seed)
        state = new_state(prompt)
        rows: list[ResultRow] = []
    else:
        rows = []
        if not state.learned_labels and state.session_index > 0:
            # labels are not stored in checkpoints; rebuild from the plan
            state.learned_labels = {
                cid: train_ds.labels[cid] for cid in plan.learned_through(state.session_index)
            }
    threads = eval_threads()
    for t in range(state.session_index + 1, plan.sessions + 1):
        started = time.perf_counter()
        data = session_data(plan, train_ds, test_ds, t, seed)
        session_labels = {cid: train_ds.labels[cid] for cid in data.classes}
        train_session(state, frozen, session_labels, data.train, train_config, suffix)
        bank = build_bank(frozen, state.prompt, state.learned_labels, suffix)
        accuracy = evaluate(bank, data.test, threads)
        rows.append(ResultRow(
            session=t,
            classes=len(state.learned_labels),
            accuracy=accuracy,
            loss=state.metrics[-1]["loss"],
            seconds=time.perf_counter() - started,
        ))
    return ExperimentResult(rows=rows, state=state, plan=plan)


def results_csv(rows: list[ResultRow], include_timing: bool = False) -> str:
    """Serialize result rows.

    The CSV is the reproducible artifact of a run: identical config and
    seed must yield identical bytes. Wall time is not reproducible, so
    the seconds column is written as 0.000 unless include_timing is set;
    real timings are always available on the printed table.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["session", "classes", "accuracy", "loss", "seconds"])
    for r in rows:
        seconds = f"{r.seconds:.3f}" if include_timing else "0.000"
        writer.writerow([r.session, r.classes, f"{r.accuracy:.6f}", f"{r.loss:.6f}", seconds])
    return buf.getvalue()
