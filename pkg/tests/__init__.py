"""Test package for caption_lens."""
