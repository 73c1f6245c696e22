"""Test suite for hpc-rtms."""
