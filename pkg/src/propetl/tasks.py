"""Deterministic synthetic classification tasks over a small vocabulary.

Every label is computed by an exact rule from the token sequence, so a
task file can always be re-verified with :func:`label_of`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RULES = ("contains", "parity", "compare", "linear", "first_last")
SPLITS = ("train", "valid", "test")


@dataclass
class Task:
    name: str
    rule: dict
    num_classes: int
    splits: dict[str, tuple[np.ndarray, np.ndarray]] = field(repr=False)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self.splits[name]

    @property
    def train_size(self) -> int:
        return len(self.splits["train"][1])

    def check_labels(self) -> None:
        for split, (X, Y) in self.splits.items():
            if len(Y) and (Y.min() < 0 or Y.max() >= self.num_classes):
                raise ValueError(f"task {self.name}/{split}: label outside [0, {self.num_classes})")


@dataclass
class TaskSet:
    tasks: list[Task]
    sampling_temperature: float = 10.0

    def __post_init__(self):
        for t in self.tasks:
            t.check_labels()

    @property
    def train_sizes(self) -> list[int]:
        return [t.train_size for t in self.tasks]


def label_of(rule: dict, seq) -> int:
    """Apply a task rule to one token sequence."""
    seq = np.asarray(seq)
    kind = rule["kind"]
    if kind == "contains":
        return int((seq == rule["token"]).any())
    if kind == "parity":
        return int((seq == rule["token"]).sum() % 2)
    if kind == "compare":
        return int((seq == rule["a"]).sum() > (seq == rule["b"]).sum())
    if kind == "linear":
        return int(np.asarray(rule["weights"])[seq].sum() > 0)
    if kind == "first_last":
        return int(seq[0] == seq[-1])
    raise ValueError(f"unknown rule kind {kind!r}")


def _valid(rule: dict, seq: np.ndarray) -> bool:
    kind = rule["kind"]
    if kind == "compare":
        return (seq == rule["a"]).sum() != (seq == rule["b"]).sum()
    if kind == "linear":
        return np.asarray(rule["weights"])[seq].sum() != 0
    return True


def make_rule(kind: str, vocab_size: int, rng: np.random.Generator) -> dict:
    if kind in ("contains", "parity"):
        return {"kind": kind, "token": int(rng.integers(vocab_size))}
    if kind == "compare":
        a, b = rng.choice(vocab_size, size=2, replace=False)
        return {"kind": kind, "a": int(a), "b": int(b)}
    if kind == "linear":
        return {"kind": kind, "weights": [int(w) for w in rng.choice([-1, 1], size=vocab_size)]}
    if kind == "first_last":
        return {"kind": kind}
    raise ValueError(f"unknown rule kind {kind!r}; expected one of {RULES}")


def _sample_seq(rule: dict, label: int, vocab_size: int, seq_len: int, rng) -> np.ndarray:
    # Targeted proposals keep the classes balanced; rejection enforces the label.
    kind = rule["kind"]
    while True:
        seq = rng.integers(vocab_size, size=seq_len)
        if kind == "contains":
            seq[seq == rule["token"]] = (rule["token"] + 1) % vocab_size
            if label:
                pos = rng.choice(seq_len, size=int(rng.integers(1, 4)), replace=False)
                seq[pos] = rule["token"]
        elif kind == "parity":
            seq[seq == rule["token"]] = (rule["token"] + 1) % vocab_size
            c = int(rng.integers(0, 3)) * 2 + label
            if c:
                seq[rng.choice(seq_len, size=min(c, seq_len), replace=False)] = rule["token"]
        elif kind == "first_last" and label:
            seq[-1] = seq[0]
        if _valid(rule, seq) and label_of(rule, seq) == label:
            return seq


def generate_task(name: str, kind: str, n_train: int, n_valid: int, n_test: int, *,
                  vocab_size: int = 16, seq_len: int = 16, seed: int = 0,
                  rule: dict | None = None) -> Task:
    """Class-balanced task with exact-rule labels."""
    rng = np.random.default_rng(seed)
    rule = make_rule(kind, vocab_size, rng) if rule is None else rule
    splits = {}
    for split, n in zip(SPLITS, (n_train, n_valid, n_test)):
        labels = np.arange(n) % 2
        rng.shuffle(labels)
        X = np.stack([_sample_seq(rule, int(y), vocab_size, seq_len, rng) for y in labels]) if n else \
            np.zeros((0, seq_len), dtype=np.int64)
        splits[split] = (X.astype(np.int64), labels.astype(np.int64))
    return Task(name, rule, 2, splits)


DEFAULT_SUITE = (("contains", 2000), ("compare", 2000), ("first_last", 2000))
IMBALANCED_SUITE = (("contains", 10_000), ("compare", 100))


def generate_suite(spec=DEFAULT_SUITE, seed: int = 0, *, vocab_size: int = 16, seq_len: int = 16,
                   eval_size: int = 500, temperature: float = 10.0) -> TaskSet:
    """One task per (rule kind, train size) entry of ``spec``."""
    tasks = []
    for i, (kind, n) in enumerate(spec):
        tasks.append(generate_task(f"{kind}{i}", kind, n, eval_size, eval_size,
                                   vocab_size=vocab_size, seq_len=seq_len, seed=seed * 1000 + i))
    return TaskSet(tasks, temperature)


def save_task(task: Task, path) -> None:
    doc = {"name": task.name, "rule": task.rule, "num_classes": task.num_classes,
           "splits": {s: {"X": X.tolist(), "Y": Y.tolist()} for s, (X, Y) in task.splits.items()}}
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


def load_task(path) -> Task:
    doc = json.loads(Path(path).read_text())
    splits = {s: (np.asarray(v["X"], dtype=np.int64).reshape(len(v["Y"]), -1), np.asarray(v["Y"], dtype=np.int64))
              for s, v in doc["splits"].items()}
    task = Task(doc["name"], doc["rule"], doc["num_classes"], splits)
    task.check_labels()
    return task
