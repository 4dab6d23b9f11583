"""Episodic encoder/decoder training with denoised curriculum learning for
low-resource NMT domain adaptation, on synthetic multi-domain corpora."""

__version__ = "0.1.0"
