"""Occluded gait recognition by visibility-guided mimic distillation, at desk scale."""

__version__ = "0.1.0"
