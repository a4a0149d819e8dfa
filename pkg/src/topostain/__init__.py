"""Topology-aware contrastive virtual staining at desk scale."""

__version__ = "0.1.0"
