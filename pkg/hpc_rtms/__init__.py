"""Hierarchical runtime resource management simulator for heterogeneous HPC clusters."""
