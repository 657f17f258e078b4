"""Test package for pae."""
