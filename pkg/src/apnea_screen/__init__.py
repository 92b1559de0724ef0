"""Apnea screening from respiratory audio: ingest, log-mel spectrograms, a
numpy residual CNN with its own reverse-mode autodiff, imbalance-aware
training, and threshold-aware evaluation."""

__version__ = "0.1.0"
