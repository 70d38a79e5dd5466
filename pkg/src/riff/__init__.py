"""Reward-guided paraphrase fine-tuning at a scale where every gradient is
checkable by enumeration and finite differences."""

__version__ = "0.1.0"
