"""Detect network misconfigurations in Kubernetes application deployments."""

__version__ = "0.1.0"
