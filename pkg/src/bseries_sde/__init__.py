"""Random-step B-series integrators for single-integrand Stratonovich SDEs."""

__version__ = "0.1.0"
