"""Deep Lambertian Networks: albedo/normal/light latent-variable models of images."""

from dln.errors import DataError, DimensionError, DlnError, NumericalError

__version__ = "0.1.0"

__all__ = ["DataError", "DimensionError", "DlnError", "NumericalError", "__version__"]
