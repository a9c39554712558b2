"""Recurrence-risk stratification from H&E whole-slide images at desk scale."""

__version__ = "0.1.0"
