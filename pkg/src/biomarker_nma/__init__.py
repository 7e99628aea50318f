"""Bayesian network meta-regression of time-to-event outcomes in
biomarker-defined subgroups, combining aggregate and participant-level data.
"""
__version__ = "0.1.0"
