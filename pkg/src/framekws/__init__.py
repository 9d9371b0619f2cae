"""Frame-level neural keyword search.

A query encoder (bidirectional GRU over symbols) and a document encoder
(bidirectional LSTM over acoustic features) are trained jointly so that
``sigmoid(H e)`` marks the frames where the query occurs. Around them sit
hit decoding, rescoring of an external system's hypotheses, TWV scoring and
a synthetic corpus for desk-scale experiments.
"""

__version__ = "0.1.0"
