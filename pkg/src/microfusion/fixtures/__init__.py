"""Shipped transcript fixtures (JSON bundles)."""
