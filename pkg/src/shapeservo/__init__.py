"""Point-cloud shape servoing of elastic objects at desk scale."""

__version__ = "0.1.0"
