"""Checkpoints, FLOP accounting, latency benchmarking and trace reports."""
