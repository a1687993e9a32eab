"""Desk-scale time-series Transformer laboratory."""
