"""Gender classification, aggregation and token attribution for TEI drama corpora.

The package covers the whole pipeline: fetching TEI plays from a DraCor-style
REST API (or a local directory), parsing them into a structured play model,
masking lexical confounders, training a small differentiable classifier on
subword-encoded speech at utterance/scene/character granularity, aggregating
predictions per character, and explaining predictions with integrated
gradients.
"""

__version__ = "0.1.0"

from .tei import Gender  # noqa: F401
