"""Relative trajectory balance for fine-tuning diffusion and autoregressive
samplers toward a reward-tilted posterior, with a small numpy autodiff core."""

__version__ = "0.1.0"
