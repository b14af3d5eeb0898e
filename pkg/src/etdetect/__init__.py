"""Backdoor attack lab with expected-transferability (ET) detection."""

__version__ = "0.1.0"
