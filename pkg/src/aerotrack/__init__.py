"""Vehicle detection, tracking and traffic analytics for nadir aerial frames."""

__version__ = "0.1.0"
