"""
CSV report writers shared by the CLI commands.

Every writer goes through atomic_output, so a failing command never
leaves a half-written report behind.
"""

import logging
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path

import numpy as np
import pandas as pd

from .corpus import PhoneInventory
from .fileio import atomic_output
from .training import EpochLog, EvaluationResult, SweepResult

logger = logging.getLogger(__name__)


def write_table(path: str | Path, rows: Iterable[Mapping | Sequence], columns: Sequence[str]) -> None:
    """Rows (dicts or tuples) as a headed CSV with the given column order"""
    rows = list(rows)
    if rows and isinstance(rows[0], Mapping):
        df = pd.DataFrame([[row[c] for c in columns] for row in rows], columns=list(columns))
    else:
        df = pd.DataFrame([list(row) for row in rows], columns=list(columns))
    with atomic_output(path) as tmp:
        df.to_csv(tmp, index=False, lineterminator="\n")
    logger.info(f"Wrote {len(rows)} rows to {path}")


def write_training_log(path: str | Path, history: Sequence[EpochLog]) -> None:
    write_table(path, [h.to_dict() for h in history], ["epoch", "loss", "train_accuracy"])


def write_confusion(path: str | Path, result: EvaluationResult, inventory: PhoneInventory) -> None:
    """Rows are true consonants, columns predicted consonants"""
    rows = [
        [consonant, *result.confusion[i].tolist()]
        for i, consonant in enumerate(inventory.consonants)
    ]
    write_table(path, rows, ["consonant", *inventory.consonants])


def write_class_accuracy(path: str | Path, result: EvaluationResult, inventory: PhoneInventory) -> None:
    support = result.confusion.sum(axis=1)
    rows = [
        (consonant, int(support[i]), "" if np.isnan(result.per_class_accuracy[i]) else float(result.per_class_accuracy[i]))
        for i, consonant in enumerate(inventory.consonants)
    ]
    write_table(path, rows, ["consonant", "n", "accuracy"])


def write_sweep(path: str | Path, results: Sequence[SweepResult]) -> None:
    write_table(path, [r.to_dict() for r in results], ["window_ms", "accuracy", "n_train", "n_test"])
