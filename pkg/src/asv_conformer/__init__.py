"""Conformer speaker verification: features, encoder, pooling head, SAM training,
ASR-to-ASV transfer, scoring and real-time-factor benchmarking."""

from .attention import MultiHeadSelfAttention, length_scaled_attention, rotary_embed, scaled_dot_attention
from .conformer import ConformerBlock, ConformerEncoder, EncoderConfig, subsampled_length
from .features import Waveform, chunk, cmn, mel_filterbank, synth_corpus
from .model import HeadConfig, SpeakerModel, param_count
from .pooling import aam_softmax_loss, attentive_stats_pool, project_xvector
from .sam import BaseOptConfig, SamConfig, lr_at, sam_step
from .scoring import TrialSet, compute_eer, compute_min_dcf, cosine_score, evaluate
from .transfer import ParamStore, load_checkpoint, save_checkpoint, transfer_encoder

__version__ = "0.1.0"
