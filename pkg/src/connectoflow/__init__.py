"""SDE-guided spatio-temporal graph learning for irregular longitudinal cohorts."""

__version__ = "0.1.0"
