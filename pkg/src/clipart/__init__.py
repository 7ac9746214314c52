"""Contrastive image/caption pre-training for fine-grained artwork attributes.

The package is a desk-scale pipeline: attribute annotations are turned into
free-form captions, a small dual encoder is trained with a symmetric
InfoNCE objective and the Ranger optimizer, and the resulting embeddings
are evaluated with retrieval ranks, nearest-neighbour label transfer and
per-sample F2.
"""

__version__ = "0.1.0"
