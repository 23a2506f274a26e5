"""Graph-regularised (neural structured learning) speech emotion recognition at toy scale."""

__version__ = "0.1.0"
