"""Incremental object keypoint learning (IKL) with knowledge association and mutual promotion."""
