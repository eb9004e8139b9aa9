"""Prompt-conditioned universal audio separation on discrete codec tokens.

Waveforms are tokenized by a residual-vector-quantized codec, a multi-scale
decoder-only transformer is trained on (mixture, prompt, target) token
layouts, and separation runs as autoregressive generation of target tokens
decoded back to audio.
"""

__version__ = "0.1.0"
