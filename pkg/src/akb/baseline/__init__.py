"""Separated JPEG + LDPC + 16-QAM reference chain."""
