"""Guarantee of Service (GoS) local recovery over MPLS: signaling, forwarding and simulation."""

__version__ = "0.1.0"
