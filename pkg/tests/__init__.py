"""Tests for Mobile Portrait."""
