"""Sparse synthesis regularization with a tight frame U-net decoder."""
