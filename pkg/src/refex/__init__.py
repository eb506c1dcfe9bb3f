"""Referring-expression generation guided by a frozen comprehension model.

A numpy-only laboratory: a define-by-run autodiff tape, LSTM generator and
bi-LSTM comprehender, a synthetic attributed-region world with an exact
oracle, training by proxy (compound loss, modified scheduled sampling,
SMIXEC) and generate-and-rerank decoding.
"""

__version__ = "0.1.0"
