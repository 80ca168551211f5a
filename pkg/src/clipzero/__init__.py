"""Zero-shot and few-shot visual question answering and visual entailment with dual encoders."""

__version__ = "0.1.0"
