"""Consensus-constrained parsimonious Gaussian mixture models for pixel labelling."""
