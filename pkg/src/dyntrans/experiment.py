"""Glue used by the command line and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .collaborative import LossConfig, TrainState, train
from .config import ExperimentConfig
from .data import Utterance
from .decoding import decode_offline
from .emformer import Encoder
from .metrics import WerReport, corpus_wer
from .model import DetModel, ModelConfig
from .rng import RngStream

log = logging.getLogger(__name__)


@dataclass
class TrainRun:
    model: DetModel
    state: TrainState
    rng: RngStream
    history: list[dict]


def init_run(cfg: ExperimentConfig, mode: str, seed: int, depths: Sequence[int] | None = None) -> TrainRun:
    """Fresh model, optimiser state and training stream for ``seed``.

    Parameters are drawn from lane 1 of the seed, training noise (dropout,
    layer skipping, masking) from lane 2, so the two never interact.
    """
    mcfg = cfg.model
    if depths is not None:
        mcfg = ModelConfig(**{**mcfg.to_dict(), "encoder": mcfg.encoder, "depths": tuple(depths)})
    if mode == "layer_dropout" and len(mcfg.depths) != 1:
        mcfg = ModelConfig(**{**mcfg.to_dict(), "encoder": mcfg.encoder, "depths": mcfg.depths[:1]})
    root = RngStream(seed)
    model = DetModel(mcfg, root.fork(1))
    return TrainRun(model, TrainState.from_config(cfg.train), root.fork(2), [])


def run_training(run: TrainRun, cfg: ExperimentConfig, utts: Sequence[Utterance], loss_cfg: LossConfig,
                 data_seed: int, steps: int | None = None, log_every: int = 100) -> TrainRun:
    run.history += train(run.model, utts, cfg.train, loss_cfg, run.state, run.rng, data_seed, steps, log_every)
    return run


def evaluate_encoder(model: DetModel, encoder: Encoder, utts: Sequence[Utterance],
                     max_symbols: int = 4) -> WerReport:
    """Corpus WER of greedy decoding with ``encoder`` (full-sequence masked encode)."""
    pairs = []
    for u in utts:
        hyp, _ = decode_offline(np.asarray(u.features, dtype=np.float64), encoder, model.predictor,
                                model.joiner, max_symbols)
        pairs.append((u.tokens, hyp))
    return corpus_wer(pairs)
