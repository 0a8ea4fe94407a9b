"""Knowledge graphs from historical documents: extraction, resolution, refinement, evaluation."""

__version__ = "0.1.0"
