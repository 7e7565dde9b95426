"""Joint language-image and image self-supervised pre-training on a numpy autodiff core."""

__version__ = "0.1.0"
