"""
Block streaming with left-context caching
=========================================

The encoder sees frames in segments. During training the whole utterance
goes through one masked pass, with each segment's look-ahead frames copied
in front of the sequence. At decode time segments arrive one at a time and
the keys/values of the last few frames are cached per layer. Both paths
produce the same numbers.
"""

import numpy as np

from dyntrans.emformer import Encoder, EncoderConfig, build_block_mask, stream_full
from dyntrans.rng import RngStream

# frame 3 (segment [3, 4]) may look at frames 1..5; frame 1 only at 1..3
lay = build_block_mask(T=5, S=2, L=2, R=1)
print(lay.mask.astype(int))
print("hard copies of frames", lay.rc_src + 1)

cfg = EncoderConfig(num_layers=3, model_dim=16, num_heads=2, ffn_dim=32, segment_frames=4,
                    left_context_frames=8, right_context_frames=1, input_dim=8, out_dim=16)
enc = Encoder(cfg, RngStream(0))
x = np.random.default_rng(1).normal(size=(37, 8))

full, _ = enc(x)
streamed = stream_full(enc, x)
print("max |full - streamed| =", np.abs(full.data - streamed).max())
