"""Seq2seq text generation toolkit.

A bidirectional-LSTM encoder / attention decoder with a copy mechanism,
serving two tasks from one network: description generation from infobox
tables and answer-aware question generation from passages. Training keeps
an exponentially averaged shadow of the weights for evaluation.
"""

__version__ = "0.1.0"
