"""Tests for ce-vae."""
