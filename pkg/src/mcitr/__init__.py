"""Image-text retrieval with momentum queues and learned feature enhancement.

A trainable library plus CLI: region-level visual features are enriched with
a learned global representation, pooled into a joint embedding space shared
with caption embeddings, and trained with a unified hubness-aware contrastive
objective over both in-batch negatives and momentum-encoder queues.
"""

__version__ = "0.1.0"

from .config import RunConfig, load_config
from .evaluator import RetrievalMetrics, TimingReport
from .feature_store import (Batch, RegionFeatureSet, SplitManifest,
                            TokenFeatureSet, load_dataset, make_synthetic_corpus)
from .momentum_contrast import DynamicQueue, EncoderPair
from .text_encoder import TextEncoder
from .visual_encoder import ImageEncoder

__all__ = [
    "Batch",
    "DynamicQueue",
    "EncoderPair",
    "ImageEncoder",
    "RegionFeatureSet",
    "RetrievalMetrics",
    "RunConfig",
    "SplitManifest",
    "TextEncoder",
    "TimingReport",
    "TokenFeatureSet",
    "load_config",
    "load_dataset",
    "make_synthetic_corpus",
    "__version__",
]
