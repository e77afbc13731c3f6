"""Interpretability-guided EEG channel selection with a teacher/student CNN."""

__version__ = "0.1.0"
