"""Streaming sequence-to-sequence transduction with chunkwise monotonic attention.

The package trains an attention-based encoder-decoder whose attention head is
restricted to move left-to-right, together with a CTC branch over the shared
encoder. Forced alignments from the CTC branch supervise the position of the
attention head during training, which keeps the token boundaries the streaming
decoder commits to close to the acoustic evidence.
"""

__version__ = "0.1.0"
