"""Point-supervised head detection: pseudo boxes from point annotations,
locally-constrained regression, curriculum scheduling and counting metrics."""

__version__ = "0.1.0"
