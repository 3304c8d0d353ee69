"""Language-prior-guided dual-branch hierarchical learning-by-clustering
for unsupervised point segmentation, over precomputed features and entity
masks, plus a synthetic long-tail corpus generator."""

__version__ = "0.1.0"
