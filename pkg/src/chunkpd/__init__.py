"""Chunk-based PD detection."""
