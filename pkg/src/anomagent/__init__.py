"""Tool-using agent for industrial anomaly synthesis, with SFT data construction,
verifiable rewards and GRPO loss kernels."""

__version__ = "0.1.0"
