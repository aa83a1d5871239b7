"""Out-of-distribution overconfidence mitigation: spliced seed examples,
a Chamfer-restricted GAN for distribution transformation, suppression
training, and a metrics harness."""

__version__ = "0.1.0"

from .rng import RngState

__all__ = ["RngState", "__version__"]
