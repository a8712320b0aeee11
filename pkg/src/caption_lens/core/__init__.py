"""Tensor engine, gradient checking, errors and progress tracking."""
