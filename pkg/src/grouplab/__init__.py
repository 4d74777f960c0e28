"""Group-wise one-to-many label assignment for set-prediction detectors, at desk scale."""

__version__ = "0.1.0"
