"""Emotional-support dialogue toolkit.

Pipeline pieces: corpus ingestion and seeded splits, dynamic discourse
windows, bidirectional cognitive knowledge extraction with provenance,
special-token sequence linearization, generation backends, automatic
evaluation metrics, experiment orchestration, and a live session service.
"""

from .backend import GenerationConfig
from .bck import BckStore, BckTriplet, CognitiveComponent, Perspective
from .corpus import Conversation, CorpusSplit, Speaker, Strategy, Utterance
from .discourse import ContextWindow, window
from .linearize import AblationMask, LinearizedExample, MarkerVocabulary
from .metrics import EvalPair, MetricReport, evaluate
from .runner import RunSpec

__version__ = "0.1.0"

__all__ = [
    "AblationMask",
    "BckStore",
    "BckTriplet",
    "CognitiveComponent",
    "ContextWindow",
    "Conversation",
    "CorpusSplit",
    "EvalPair",
    "GenerationConfig",
    "LinearizedExample",
    "MarkerVocabulary",
    "MetricReport",
    "Perspective",
    "RunSpec",
    "Speaker",
    "Strategy",
    "Utterance",
    "evaluate",
    "window",
    "__version__",
]
