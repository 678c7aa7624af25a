"""Dual-stage audio-deepfake source tracing: a one-class real/fake gate in
front of a fake-algorithm classifier with post-hoc novelty detection."""

__version__ = "0.1.0"
