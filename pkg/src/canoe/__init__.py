"""Knowledge-graph QA synthesis, Dual-GRPO rewards and faithfulness evaluation."""

__version__ = "0.1.0"
