"""
hierbert: desk-scale hierarchical multitask BERT pre-training.

Auxiliary heads (next-sentence prediction, masked-LM, bigram shift) read the
encoder at configurable layers; see `hierbert.heads.HeadPlacement`.
"""

__version__ = "0.1.0"
