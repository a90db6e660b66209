"""Desk-scale diverse machine translation via mixup interpolation.

Trains a small encoder-decoder transformer with mixup, generates K diverse
translations per input by interpolating the input with sampled training
pairs during beam search, and scores runs with reference BLEU, pairwise
BLEU, and EDA.
"""

__version__ = "0.1.0"
