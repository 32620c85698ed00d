"""Multi-task emotion cause span extraction and causal emotion entailment in conversations."""

__version__ = "0.1.0"
