"""Cross-modal electron micrograph classification toolkit.

Combines a patch-transformer image encoder, attention-pooled text-level
category embeddings distilled from language-model transcripts, few-shot
prediction embeddings from a multimodal-model client, and a hierarchical
multi-head attention fusion head, with a full training / cross-validation
/ ablation harness on top.
"""

__version__ = "0.1.0"

from .kernels import BACKEND as kernel_backend  # noqa: F401
