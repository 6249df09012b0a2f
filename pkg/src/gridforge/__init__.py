"""Security-labelled operating-point datasets for power systems."""
from .netmodel import Network, build_input_space, bundled_case, parse_case

__version__ = "0.1.0"

__all__ = ["Network", "build_input_space", "bundled_case", "parse_case", "__version__"]
