"""Presets, cost accounting, image I/O, metrics and the end-to-end driver."""
