import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from partgait import protocols
from partgait.evaluation import embed_sequences, evaluate_cross_view
from partgait.model import ModelConfig
from partgait.synthetic import toy_sequences
from partgait.training import TrainConfig, stage1_loss, train_model

_ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key, title, ok, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {key} {title}: {detail}")


class Criterion:
    """Collects measurements for one acceptance criterion and records pass/fail on exit."""

    def __init__(self, key, title):
        self.key, self.title = key, title
        self.notes = []

    def note(self, text):
        self.notes.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = "; ".join(self.notes) or ("ok" if ok else "")
        if not ok and exc is not None:
            detail = f"{detail}; {type(exc).__name__}: {exc}".strip("; ")
        _ACCEPTANCE.append((self.key, self.title, ok, detail))
        print(f"{'PASS' if ok else 'FAIL'} {self.key} {self.title}: {detail}")
        return False


@pytest.fixture
def criterion():
    return Criterion


@dataclass
class ToyRun:
    sequences: list
    train: list
    gallery: list
    probe: list
    params: object
    stage1: list
    stage2: list
    stage1_full_loss: float
    report: object
    seconds: dict = field(default_factory=dict)


def toy_data(data_seed=0):
    """8 ids x 4 views x 4 recordings: recordings 1-2 train, 3 is gallery, 4 is probe."""
    seqs = toy_sequences(n_ids=8, seqs=4, frames=16, seed=data_seed)
    train = [s for s in seqs if s.sequence_index <= 2]
    gallery = [s for s in seqs if s.sequence_index == 3]
    probe = [s for s in seqs if s.sequence_index == 4]
    return seqs, train, gallery, probe


def run_toy(model_config=None, train_config=None, data_seed=0):
    """Generate the toy set, train both stages and evaluate held-out recordings."""
    t0 = time.perf_counter()
    seqs, train, gallery, probe = toy_data(data_seed)
    t1 = time.perf_counter()
    params, h1, h2 = train_model(train, model_config or ModelConfig.toy(), train_config or TrainConfig.toy())
    t2 = time.perf_counter()
    loss, _ = stage1_loss(train, [s.subject_id for s in train], params)
    report = evaluate_cross_view(embed_sequences(gallery, params), embed_sequences(probe, params),
                                 protocols.custom())
    t3 = time.perf_counter()
    return ToyRun(seqs, train, gallery, probe, params, h1, h2, loss, report,
                  {"data": t1 - t0, "train": t2 - t1, "eval": t3 - t2, "total": t3 - t0})


@pytest.fixture(scope="session")
def toy_run():
    return run_toy()
