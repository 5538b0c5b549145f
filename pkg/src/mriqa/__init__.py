"""MRI quality characterization, artifact simulation and QA-corpus generation."""

__version__ = "0.1.0"
