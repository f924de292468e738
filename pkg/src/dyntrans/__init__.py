"""Dynamic encoder transducer: streaming transducers with weight-shared
encoders of several depths, trained jointly and switched per utterance."""

from .collaborative import LossConfig, TrainConfig, TrainState, train, train_step
from .data import GenConfig, Utterance, gen_corpus, gen_utterance, read_dataset, write_dataset
from .decoding import (DecodeTrace, SwitchPlan, dynamic_switch_decode, greedy_decode,
                       greedy_decode_step, simulate_burst, stream_decode)
from .emformer import (DropoutPlan, Encoder, EncoderConfig, encoder_forward_stream,
                       encoder_forward_train, parse_dropout_plan, prune_encoder)
from .lattice import RestrictionBand, brute_force_loss, transducer_forward_backward, transducer_loss
from .metrics import LatencyReport, WerReport, flops_count, latency_metrics, wer
from .model import DetModel, ModelConfig, build_det_model, export_pruned

__version__ = "0.1.0"
