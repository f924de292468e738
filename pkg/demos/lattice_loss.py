"""
The transducer loss on a tiny lattice
=====================================

A two-frame utterance with one label has exactly two alignments: emit the
label at frame 0 or at frame 1, each followed by the blanks that move time
forward. With uniform logits over three classes every step has probability
1/3, so the loss is -log(2/27).
"""

import math

import numpy as np

from dyntrans.lattice import brute_force_loss, count_alignments, transducer_forward_backward

blank = 2
logits = np.zeros((2, 2, 3))            # [T, U+1, classes]
loss, grad = transducer_forward_backward(logits, [0], blank)
print("forward-backward :", loss)
print("closed form      :", math.log(27 / 2))
print("alignments       :", count_alignments(2, 1))

# each node's gradient sums to zero over the classes (softmax identity)
print("class sums       :", np.abs(grad.sum(-1)).max())

# random logits: the dynamic programme agrees with explicit enumeration
rng = np.random.default_rng(0)
logits = rng.normal(size=(4, 4, 4))
y = [1, 0, 2]
print("DP vs enumeration:", transducer_forward_backward(logits, y, 3)[0], brute_force_loss(logits, y, 3))
