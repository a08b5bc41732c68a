"""Generative sequential recommendation with multi-codebook item tokens.

Pipeline: tokenize items into unordered multi-codebook token sets, pretrain
an encoder-decoder sequence model over them, post-train the policy against
recommendation rewards, and decode reasoning paths with confidence-ordered
token selection plus consistency-based reflection.
"""

__version__ = "0.1.0"
