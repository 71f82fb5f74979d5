"""Layer-selective continual pretraining for small decoder-only language models.

The package trains a GPT-2-style model from scratch on a synthetic temporal
corpus, profiles how strongly each attention and MLP block responds to
salient spans of new facts, and uses that profile to freeze or slow down
blocks during continual pretraining.
"""

__version__ = "0.1.0"
