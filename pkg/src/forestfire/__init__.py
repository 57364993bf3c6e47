"""Mean-field forest-fire model: finite simulator, limiting kinetics, characteristics and coupling."""
__version__ = "0.1.0"
