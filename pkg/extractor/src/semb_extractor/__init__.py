"""Encoder-to-embedding bridge.

Walks a labeled-sample manifest, runs a speech or text encoder over each
sample's audio or transcript, and writes the hidden states as `SEMB`
binary files consumable by the downstream training toolkit.
"""

__version__ = "0.1.0"
