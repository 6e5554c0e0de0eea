"""Tests for posemesh."""
