"""Density-aware global-local attention for point cloud segmentation."""
