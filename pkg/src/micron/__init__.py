"""Predict medication additions and removals across a patient's visits from
the change in their health representation."""

__version__ = "0.1.0"
