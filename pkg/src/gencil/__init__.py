"""Class-incremental learning as label-text generation.

A frozen image encoder feeds a trainable projection; a small frozen decoder
generates template captions; a deterministic trigram matcher turns generated
text back into class ids.  See README.md for the pipeline walkthrough.
"""

__version__ = "0.1.0"
