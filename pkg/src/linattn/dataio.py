"""Interaction-log ingestion, synthetic dataset generation, the per-user
leave-one-out split, and padded sequence batching.

Log file format: one interaction per line, tab-separated integers
`user_id \\t item_id \\t timestamp`. Lines may arrive in any order; records
are sorted by (user, timestamp, input order) and ids are remapped to a
dense 1..n range (0 is reserved for padding).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matrix import Rng


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    timestamp: int


@dataclass
class InteractionLog:
    """Dense-id interaction records, per-user time-ordered."""
    records: list[Interaction]
    user_count: int
    item_count: int

    @property
    def sparsity(self) -> float:
        cells = self.user_count * self.item_count
        return 1.0 - len(self.records) / cells if cells else 0.0

    def by_user(self) -> dict[int, list[int]]:
        """Item lists per user in interaction order."""
        out: dict[int, list[int]] = {}
        for r in self.records:
            out.setdefault(r.user, []).append(r.item)
        return out


class LogFormatError(ValueError):
    """Malformed interaction file; message carries the line number."""


def _canonicalize(raw: list[tuple[int, int, int]]) -> InteractionLog:
    # stable sort keeps input order for equal (user, timestamp) pairs
    order = sorted(range(len(raw)), key=lambda i: (raw[i][0], raw[i][2]))
    user_map: dict[int, int] = {}
    item_map: dict[int, int] = {}
    records = []
    for i in order:
        u, it, ts = raw[i]
        du = user_map.setdefault(u, len(user_map) + 1)
        di = item_map.setdefault(it, len(item_map) + 1)
        records.append(Interaction(du, di, ts))
    return InteractionLog(records, len(user_map), len(item_map))


def load_log(path: str) -> InteractionLog:
    """Parse a TSV interaction file; ids are densely remapped starting at 1."""
    raw: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise LogFormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            try:
                raw.append((int(parts[0]), int(parts[1]), int(parts[2])))
            except ValueError:
                raise LogFormatError(f"{path}:{lineno}: non-integer field in {line!r}") from None
    if not raw:
        raise LogFormatError(f"{path}: empty interaction file")
    return _canonicalize(raw)


def write_log(path: str, log: InteractionLog) -> None:
    """Write the canonical (sorted, dense-id) form back out as TSV."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in log.records:
            fh.write(f"{r.user}\t{r.item}\t{r.timestamp}\n")


@dataclass(frozen=True)
class SyntheticSpec:
    pattern: str = "cyclic"   # cyclic | markov
    n_users: int = 200
    n_items: int = 50
    seq_len: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in ("cyclic", "markov"):
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if self.n_items < 2:
            raise ValueError("n_items must be >= 2")
        if self.n_users < 1 or self.seq_len < 2:
            raise ValueError("need n_users >= 1 and seq_len >= 2")


def cyclic_successor(item: int, n_items: int) -> int:
    """Deterministic next item of the cyclic pattern: (i mod n) + 1."""
    return (item % n_items) + 1


def make_synthetic(spec: SyntheticSpec) -> InteractionLog:
    """Deterministic synthetic log; the cyclic pattern has a unique correct
    next item for every prefix, the markov pattern follows a seeded random
    transition table.

    Ids are emitted dense (users 1..n_users, items 1..n_items) with no
    remapping, so the generating pattern survives into the log verbatim.
    """
    rng = Rng(spec.seed)
    records: list[Interaction] = []
    transitions = None
    if spec.pattern == "markov":
        # rows: current item; one fixed categorical distribution per row
        weights = rng.uniform(spec.n_items, spec.n_items) + 0.05
        transitions = np.cumsum(weights / weights.sum(axis=1, keepdims=True), axis=1)
    for user in range(1, spec.n_users + 1):
        item = int(rng.integers(1, spec.n_items + 1))
        for t in range(spec.seq_len):
            records.append(Interaction(user, item, t))
            if spec.pattern == "cyclic":
                item = cyclic_successor(item, spec.n_items)
            else:
                u = rng.uniform(1, 1)[0, 0]
                item = min(int(np.searchsorted(transitions[item - 1], u) + 1), spec.n_items)
    return InteractionLog(records, spec.n_users, spec.n_items)


def markov_transition_table(spec: SyntheticSpec) -> np.ndarray:
    """The generating row-stochastic table for a markov spec (for count checks)."""
    if spec.pattern != "markov":
        raise ValueError("transition table only exists for the markov pattern")
    rng = Rng(spec.seed)
    weights = rng.uniform(spec.n_items, spec.n_items) + 0.05
    return weights / weights.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# leave-one-out split and batching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SequenceExample:
    """One padded next-item example: ids right-padded with 0 to a fixed window."""
    ids: tuple[int, ...]
    true_len: int
    target: int


@dataclass
class SequenceBatch:
    examples: list[SequenceExample]

    def __len__(self) -> int:
        return len(self.examples)


@dataclass
class Splits:
    train: list[SequenceExample]
    valid: list[SequenceExample]
    test: list[SequenceExample]
    dropped_users: int


def _to_example(prefix: list[int], target: int, window: int) -> SequenceExample:
    kept = prefix[-window:]                      # recency truncation
    padded = tuple(kept) + (0,) * (window - len(kept))
    return SequenceExample(ids=padded, true_len=len(kept), target=target)


def leave_one_out_split(log: InteractionLog, window: int) -> Splits:
    """Per user: last item is the test target, second-to-last the validation
    target, and the preceding item the training target, each predicted from
    the full earlier history. Users with fewer than 4 interactions are
    dropped and counted."""
    if window < 2:
        raise ValueError("window must be >= 2")
    train, valid, test = [], [], []
    dropped = 0
    for _user, items in sorted(log.by_user().items()):
        if len(items) < 4:
            dropped += 1
            continue
        train.append(_to_example(items[:-3], items[-3], window))
        valid.append(_to_example(items[:-2], items[-2], window))
        test.append(_to_example(items[:-1], items[-1], window))
    return Splits(train, valid, test, dropped)


def all_prefix_examples(log: InteractionLog, window: int) -> list[SequenceExample]:
    """Optional training augmentation: every (prefix, next) pair up to the
    train boundary (last three interactions stay held out)."""
    out = []
    for _user, items in sorted(log.by_user().items()):
        if len(items) < 4:
            continue
        for cut in range(1, len(items) - 2):
            out.append(_to_example(items[:cut], items[cut], window))
    return out


def batches(examples: list[SequenceExample], batch_size: int,
            shuffle_rng: Rng | None = None) -> list[SequenceBatch]:
    """Chunk examples into batches; deterministic order under a fixed seed."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = list(examples)
    if shuffle_rng is not None:
        shuffle_rng.shuffle(order)
    return [SequenceBatch(order[i:i + batch_size]) for i in range(0, len(order), batch_size)]


def split_batches(log: InteractionLog, window: int, batch_size: int, split: str,
                  shuffle_rng: Rng | None = None) -> list[SequenceBatch]:
    """Batched view of one split of a log ('train' | 'valid' | 'test')."""
    splits = leave_one_out_split(log, window)
    if split not in ("train", "valid", "test"):
        raise ValueError(f"unknown split {split!r}")
    return batches(getattr(splits, split), batch_size, shuffle_rng)
