"""ICP pose estimation with failure detection, error attribution and targeted mitigation."""

__version__ = "0.1.0"
