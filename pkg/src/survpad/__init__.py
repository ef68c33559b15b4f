"""Desk-scale toolkit for surveillance face anti-spoofing: quality-banded
protocols, ISO/IEC 30107-3 metrics, preprocessing, losses, training
strategies, a numpy trainer and a two-phase challenge harness."""

__version__ = "0.1.0"
