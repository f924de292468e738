"""
Training a teacher and a student together
=========================================

A 4-layer teacher and a 3-layer student share their first two layers. The
student adds one private layer. Both are trained at once with their own
transducer losses, a frame-level cross-entropy on the synthetic alignment
labels and a distillation term pulling the student toward the teacher.

This runs a few hundred updates on a small corpus (about a minute on one
core); the acceptance suite uses the full toy configuration.
"""

import json
import logging
from pathlib import Path

from dyntrans.config import load_config
from dyntrans.data import gen_corpus
from dyntrans.experiment import evaluate_encoder, init_run, run_training

logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "toy.json")
cfg.train.steps = 300
train_u = gen_corpus(10, 500, cfg.data.gen)
test_u = gen_corpus(20, 50, cfg.data.gen)

run = init_run(cfg, "collaborative", seed=0)
run_training(run, cfg, train_u, cfg.loss_config("collaborative"), data_seed=0, log_every=50)

last = run.history[-1]
print(json.dumps({k: last[k] for k in ("step", "loss", "tr", "ce", "kld")}, indent=1))

m = run.model
for i in range(m.num_encoders):
    print(f"encoder {i + 1} ({m.encoder(i).depth} layers): WER {evaluate_encoder(m, m.encoder(i), test_u).wer:.3f}")
