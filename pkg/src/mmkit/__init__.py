"""Multimodal sequence tooling: token codecs, masks, packing and decoding rules."""

__version__ = "0.1.0"
