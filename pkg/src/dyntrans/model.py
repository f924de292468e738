"""Multi-encoder transducer with weight-shared encoders of decreasing depth."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .emformer import (DropoutPlan, EmformerLayer, Encoder, EncoderConfig, EncoderHead,
                       parse_dropout_plan, prune_encoder)
from .nn import Linear, Module
from .predictor import Joiner, Predictor, Vocab
from .rng import RngStream
from .tensor import log_softmax, relu


@dataclass
class ModelConfig:
    vocab_size: int = 16
    aux_classes: int = 16
    embed_dim: int = 16
    pred_layers: int = 2
    pred_dim: int = 32
    depths: tuple[int, ...] = (4, 3)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.depths = tuple(int(d) for d in self.depths)
        if not self.depths:
            raise ValueError("need at least one encoder depth")
        if any(d < 1 for d in self.depths):
            raise ValueError("depths must be >= 1")
        if any(b >= a for a, b in zip(self.depths, self.depths[1:])):
            raise ValueError("depths must be strictly decreasing")

    @property
    def joint_dim(self) -> int:
        return self.encoder.out_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class AuxHead(Module):
    """Frame classifier shared by all encoders: hidden layer + projection."""

    def __init__(self, d_in: int, hidden: int, classes: int, rng: RngStream):
        self.hidden = Linear(d_in, hidden, rng)
        self.out = Linear(hidden, classes, rng)

    def __call__(self, h):
        return self.out(relu(self.hidden(h)))

    def log_probs(self, h):
        return log_softmax(self(h), axis=-1)


class DetModel(Module):
    """Teacher encoder of depth ``depths[0]`` plus students.

    Student ``i`` runs teacher layers ``1 .. depths[i]-1`` followed by its own
    private final layer. Every encoder has its own output head; the input
    projection, predictor, joiner and auxiliary head are shared.
    """

    def __init__(self, cfg: ModelConfig, rng: RngStream):
        self.cfg = cfg
        ecfg = EncoderConfig(**{**cfg.encoder.to_dict(), "num_layers": cfg.depths[0]})
        self.ecfg = ecfg
        self.vocab = Vocab(cfg.vocab_size)
        teacher = Encoder(ecfg, rng)
        self.input_proj = teacher.input_proj
        self.layers = teacher.layers
        self.private_layers = [EmformerLayer(ecfg, rng) for _ in cfg.depths[1:]]
        self.heads = [teacher.head] + [EncoderHead(ecfg, rng) for _ in cfg.depths[1:]]
        self.predictor = Predictor(self.vocab, cfg.embed_dim, cfg.pred_layers, cfg.pred_dim,
                                   ecfg.out_dim, rng)
        self.joiner = Joiner(ecfg.out_dim, self.vocab, rng)
        self.aux_head = AuxHead(ecfg.out_dim, ecfg.model_dim, cfg.aux_classes, rng)

    @property
    def num_encoders(self) -> int:
        return len(self.cfg.depths)

    @property
    def blank(self) -> int:
        return self.vocab.blank_id

    def encoder_layers(self, i: int) -> list[EmformerLayer]:
        if i == 0:
            return list(self.layers)
        d = self.cfg.depths[i]
        return list(self.layers[:d - 1]) + [self.private_layers[i - 1]]

    def encoder(self, i: int = 0) -> Encoder:
        """View of encoder ``i`` (0 = teacher)."""
        if not 0 <= i < self.num_encoders:
            raise IndexError(f"no encoder {i}")
        return Encoder(self.ecfg, input_proj=self.input_proj, layers=self.encoder_layers(i),
                       head=self.heads[i])

    def pruned(self, plan: DropoutPlan | str, rate: float = 0.0) -> Encoder:
        if isinstance(plan, str):
            plan = parse_dropout_plan(plan, self.cfg.depths[0], rate)
        return prune_encoder(self.encoder(0), plan)

    def encoder_param_count(self) -> int:
        n = sum(layer.num_parameters() for layer in self.layers)
        return n + sum(layer.num_parameters() for layer in self.private_layers)

    def collab_forward(self, x, lengths=None, rng=None, training=False, skip=frozenset(),
                       n_encoders: int | None = None):
        """Outputs of the first ``n_encoders`` encoders (default all), computing
        the shared layers once.

        ``skip`` (0-based) only applies to the teacher's layers and is used
        for layer dropout on single-encoder models.
        """
        enc0 = self.encoder(0)
        x_ext, lay, mask = enc0.embed(x, lengths)
        last, seen = enc0.run_layers(x_ext, mask, self.layers, rng, training, skip, collect=True)
        outs = [enc0.project_out(last, lay)]
        n = self.num_encoders if n_encoders is None else n_encoders
        for i in range(1, n):
            d = self.cfg.depths[i]
            h, _ = self.private_layers[i - 1](seen[d - 1], mask, rng, training)
            outs.append(self.heads[i](h[..., lay.n_copies:, :] if lay.n_copies else h))
        return outs


def export_pruned(model: DetModel, plan: DropoutPlan | str, rng_seed: int = 0) -> DetModel:
    """Standalone single-encoder model holding a copy of the pruned teacher."""
    if isinstance(plan, str):
        plan = parse_dropout_plan(plan, model.cfg.depths[0], 0.0)
    view = prune_encoder(model.encoder(0), plan)
    cfg = ModelConfig(**{**asdict(model.cfg), "encoder": model.cfg.encoder,
                         "depths": (view.depth,)})
    out = DetModel(cfg, RngStream(rng_seed))
    src = {
        "input_proj": view.input_proj, "predictor": model.predictor, "joiner": model.joiner,
        "aux_head": model.aux_head,
    }
    for name, mod in src.items():
        _copy_into(getattr(out, name), mod)
    for dst, layer in zip(out.layers, view.layers):
        _copy_into(dst, layer)
    _copy_into(out.heads[0], view.head)
    return out


def _copy_into(dst: Module, src: Module) -> None:
    for (nd, pd), (ns, ps) in zip(dst.named_parameters(), src.named_parameters()):
        if nd != ns or pd.shape != ps.shape:
            raise ValueError(f"parameter mismatch {nd} vs {ns}")
        pd.data = ps.data.copy()


def state_dict(model: Module) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in model.named_parameters()}


def load_state_dict(model: Module, tensors: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    missing = set(params) - set(tensors)
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
    for k, p in params.items():
        arr = tensors[k]
        if arr.shape != p.shape:
            raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
        p.data = np.array(arr, dtype=np.float64)


def build_det_model(depths, cfg: ModelConfig | None = None, seed: int = 0) -> DetModel:
    cfg = cfg or ModelConfig()
    cfg = ModelConfig(**{**asdict(cfg), "encoder": cfg.encoder, "depths": tuple(depths)})
    return DetModel(cfg, RngStream(seed))
