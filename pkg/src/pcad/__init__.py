"""Point-cloud anomaly detection with two memory-bank experts and learned importance-aware fusion."""

__version__ = "0.1.0"
