"""Distilling a frame-level segmentation teacher into small recurrent students
and measuring how cardiac phase detection scales with student size."""

__version__ = "0.1.0"
