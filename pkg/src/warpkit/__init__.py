"""Continuous prompt and verbalizer tuning against a frozen masked LM."""

from warpkit.autodiff import Tensor, no_grad

__all__ = ["Tensor", "no_grad"]
__version__ = "0.1.0"
