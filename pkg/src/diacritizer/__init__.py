"""Character-level diacritic restoration engine.

Sequence labelers (causal and acausal convolutional stacks, LSTM, BiLSTM)
over a self-contained autodiff core, with corpus preparation, training,
evaluation metrics, and an inference throughput benchmark.
"""

__version__ = "0.1.0"
