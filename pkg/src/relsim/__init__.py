"""Multi-relational sentence-pair similarity at desk scale.

A shared bidirectional-LSTM pair encoder with one output head per annotated
relation, trainable single-task, multi-task, or multi-label, plus the
multi-seed evaluation protocol (rank correlations, one-sided t-tests,
annotated comparison tables).
"""

__version__ = "0.1.0"
