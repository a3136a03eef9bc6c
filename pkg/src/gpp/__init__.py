"""Gaussian privacy protector: sanitized low-dimensional releases that keep a
utility label predictable while hiding a sensitive one."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402
