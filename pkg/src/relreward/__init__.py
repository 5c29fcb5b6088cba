"""Relative reward extraction from base/expert trajectory diffusion models."""
