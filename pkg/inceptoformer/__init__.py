"""InceptoFormer: Parkinson's severity staging from foot-sensor gait signals."""

__version__ = "1.0.0"
