"""Knowledge-base-assisted variable-rate joint source-channel coding for images."""

__version__ = "0.1.0"
