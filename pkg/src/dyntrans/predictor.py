"""Label-history predictor and joiner shared by every encoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import Embedding, Linear, LSTMCell, Module
from .rng import RngStream
from .tensor import Tensor, tanh


@dataclass(frozen=True)
class Vocab:
    """``size`` real units ``0..size-1``; the blank is the extra index ``size``."""
    size: int

    @property
    def blank_id(self) -> int:
        return self.size

    @property
    def num_classes(self) -> int:
        return self.size + 1

    def check_tokens(self, tokens: Sequence[int]) -> None:
        for tok in tokens:
            if not 0 <= tok < self.size:
                raise ValueError(f"token {tok} outside vocabulary of size {self.size}")


@dataclass
class PredictorState:
    h: list[Tensor]
    c: list[Tensor]
    last_token: int


class Predictor(Module):
    """Embedding -> LSTM stack -> linear projection to the joint width."""

    def __init__(self, vocab: Vocab, embed_dim: int, num_layers: int, hidden: int,
                 joint_dim: int, rng: RngStream):
        self.vocab = vocab
        self.embed = Embedding(vocab.num_classes, embed_dim, rng)
        self.lstms = [LSTMCell(embed_dim if i == 0 else hidden, hidden, rng) for i in range(num_layers)]
        self.proj = Linear(hidden, joint_dim, rng)
        self.hidden = hidden

    def zero_state(self, batch: tuple[int, ...] = ()) -> PredictorState:
        z = np.zeros(batch + (self.hidden,))
        return PredictorState([Tensor(z) for _ in self.lstms], [Tensor(z) for _ in self.lstms],
                              self.vocab.blank_id)

    def forward(self, tokens: Sequence[int], state: PredictorState | None = None):
        """Run the predictor over ``tokens``.

        A fresh call (``state=None``) must start with the blank, which stands
        in for the empty history; later calls carry ``state`` and may not
        contain the blank. Output length equals ``len(tokens)``.
        """
        tokens = [int(t) for t in tokens]
        if not tokens:
            raise ValueError("predictor needs at least one input")
        if state is None:
            if tokens[0] != self.vocab.blank_id:
                raise ValueError("first input of a fresh predictor stream must be the blank")
            self.vocab.check_tokens(tokens[1:])
            state = self.zero_state()
        else:
            self.vocab.check_tokens(tokens)
        x = self.embed(np.asarray(tokens))
        hs, cs = [], []
        for i, cell in enumerate(self.lstms):
            x, (h, c) = cell.run(x, (state.h[i], state.c[i]))
            hs.append(h)
            cs.append(c)
        return self.proj(x), PredictorState(hs, cs, tokens[-1])

    __call__ = forward

    def forward_batch(self, inputs: np.ndarray) -> Tensor:
        """Padded batch ``[B, n]`` of input ids (blank first) -> ``[B, n, joint]``."""
        inputs = np.asarray(inputs)
        x = self.embed(inputs)
        state = self.zero_state((inputs.shape[0],))
        for i, cell in enumerate(self.lstms):
            x, _ = cell.run(x, (state.h[i], state.c[i]))
        return self.proj(x)


class Joiner(Module):
    """``W tanh(h_e + h_p) + b``."""

    def __init__(self, joint_dim: int, vocab: Vocab, rng: RngStream):
        self.out = Linear(joint_dim, vocab.num_classes, rng)

    def __call__(self, h_e, h_p) -> Tensor:
        if h_e.shape[-1] != h_p.shape[-1]:
            raise ValueError("joiner inputs must have equal width")
        return self.out(tanh(h_e + h_p))


def predictor_forward(predictor: Predictor, tokens, state=None):
    return predictor.forward(tokens, state)


def joiner_logits(joiner: Joiner, h_e, h_p) -> Tensor:
    return joiner(h_e, h_p)
