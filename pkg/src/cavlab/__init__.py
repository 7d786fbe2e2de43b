"""cavlab: driving-policy learning lab for connected vehicles at desk scale."""

__version__ = "0.1.0"
