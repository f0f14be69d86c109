"""SSVEP decoding with cross-stimulus transfer: EMD-based signal reconstruction and a fuzzy-attention decoder."""

__version__ = "0.1.0"
