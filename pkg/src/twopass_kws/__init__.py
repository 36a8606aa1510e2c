"""Streaming open-vocabulary keyword spotting with a two-pass cascade.

A chunk-causal conformer encoder with an attention-based keyword bias
feeds a CTC head for always-on candidate detection; a keyword-conditioned
attention decoder verifies candidates against clipped acoustic segments,
either from the streaming encoder output or from a full-context
re-encoding.
"""

from .model import KeywordSpotter, ModelConfig
from .keywords import Keyword, Lexicon, phonemize, sample_keyword
from .cascade import CascadeConfig, Detection, init_stream, run_stream
from .train import TrainConfig, train_stage
from .ctc import Posteriorgram, Segment, ctc_loss, detect_spikes, estimate_segment, keyword_viterbi

__version__ = "0.1.0"

__all__ = [
    "KeywordSpotter",
    "ModelConfig",
    "Keyword",
    "Lexicon",
    "phonemize",
    "sample_keyword",
    "CascadeConfig",
    "Detection",
    "init_stream",
    "run_stream",
    "TrainConfig",
    "train_stage",
    "Posteriorgram",
    "Segment",
    "ctc_loss",
    "detect_spikes",
    "estimate_segment",
    "keyword_viterbi",
    "__version__",
]
