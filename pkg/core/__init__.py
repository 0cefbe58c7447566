"""Simulator internals: numerics, data, protocol, training and reporting."""
