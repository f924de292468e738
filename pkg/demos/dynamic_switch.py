"""
Switching encoders mid-utterance
================================

Start each utterance on the small encoder and hand over to the full one
after K milliseconds. The predictor state carries over; layers shared by
both encoders keep their left-context caches. Compute falls as K grows.

The model here is untrained, so only the cost side is meaningful.
"""

import math

import numpy as np

from dyntrans.data import GenConfig, gen_corpus
from dyntrans.decoding import CostClock, SwitchPlan, dynamic_switch_decode, simulate_burst, stream_decode
from dyntrans.metrics import latency_metrics
from dyntrans.model import build_det_model

model = build_det_model((4, 3), seed=0)
cfg = model.ecfg
utt = gen_corpus(0, 1, GenConfig(tokens_per_utt=(8, 8)))[0]
T = utt.num_frames
print(f"{T} frames, segments of {cfg.segment_frames}")

for k_ms in (0, 40, 80, 120, 160, math.inf):   # inf: the whole utterance on the small encoder
    plan = SwitchPlan.from_ms(min(k_ms, 1e9), cfg.frame_ms, cfg.segment_frames, begin=1, rest=0).for_length(T, cfg.segment_frames)
    tr = dynamic_switch_decode(utt.features, model, plan)
    print(f"K={plan.switch_frames:3d} frames  MACs={tr.total_flops:8d}  encoders={''.join(e[-1] for e in tr.segment_encoder)}")

# a wake word delivered all at once: the first 30 frames are already there.
# The model clock charges 2e4 MACs per ms, about twice real time here, so
# the backlog from the burst drains before the end of the utterance.
burst = simulate_burst(T, min(30, T), cfg.frame_ms)
tr = stream_decode(utt.features, model.encoder(0), model.predictor, model.joiner, burst,
                   clock=CostClock(macs_per_ms=2e4))
lat = latency_metrics(tr)
print(f"burst: RTF {lat.rtf:.3f}, final emission {lat.spl_ms:.1f} ms after the last frame")
print("segment start times (ms):", np.round(tr.segment_start_ms, 2))
