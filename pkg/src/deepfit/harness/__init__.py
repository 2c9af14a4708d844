"""Synthetic data, file formats, configuration and command drivers."""
