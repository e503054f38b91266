"""Large-ontology event detection: trigger identification, type ranking, type classification."""

__version__ = "0.1.0"
