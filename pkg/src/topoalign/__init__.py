"""Topology-agnostic alignment and decoding toolkit for CTC and HMM label topologies."""

__version__ = "0.1.0"
