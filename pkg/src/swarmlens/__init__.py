"""Swarm-state classification from optical flow, with saliency maps and a ground-truth simulator."""

__version__ = "0.1.0"
