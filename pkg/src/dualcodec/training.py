"""Training loop shared by the estimator and the command line."""

from __future__ import annotations

import logging
from typing import Callable, Sequence, TextIO

import numpy as np

from .codec import DualCodecModel, LossReport, train_step
from .dsp import AudioBuffer

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "q") + LossReport.FIELDS + ("grad_norm", "clipped")


def loss_log_header() -> str:
    return "# " + " ".join(LOG_COLUMNS) + "\n"


def loss_log_line(step: int, r: LossReport) -> str:
    vals = [str(step), str(r.q)] + [repr(float(getattr(r, k))) for k in LossReport.FIELDS]
    vals += [repr(float(r.grad_norm)), str(int(r.clipped))]
    return " ".join(vals) + "\n"


def read_loss_log(path) -> dict[str, np.ndarray]:
    rows = np.loadtxt(path, comments="#", ndmin=2)
    return {name: rows[:, i] for i, name in enumerate(LOG_COLUMNS)}


def train(
    model: DualCodecModel,
    corpus: Sequence[AudioBuffer],
    steps: int,
    batch_size: int = 4,
    seed: int = 0,
    log_file: TextIO | None = None,
    on_step: Callable[[int, LossReport], None] | None = None,
    fit_extractor: bool = True,
) -> list[LossReport]:
    """Run ``steps`` optimizer steps on random batches drawn from ``corpus``.

    All utterances in a batch are cropped to the shortest one. The extractor's
    normalization statistics are fitted on the corpus first unless disabled.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if not corpus:
        raise ValueError("training corpus is empty")
    if fit_extractor and not model.extractor.fitted:
        model.extractor.fit(corpus)
    rng = np.random.default_rng(seed)
    opt = model.make_optimizer()
    n = len(corpus)
    reports = []
    for step in range(steps):
        idx = rng.choice(n, min(batch_size, n), replace=False)
        length = min(len(corpus[i]) for i in idx)
        batch = [corpus[i].samples[:length] for i in idx]
        r = train_step(batch, model, opt, rng, step)
        reports.append(r)
        if log_file is not None:
            log_file.write(loss_log_line(step, r))
            log_file.flush()
        if on_step is not None:
            on_step(step, r)
    return reports
