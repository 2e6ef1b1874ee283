"""Large-kernel-decomposition dehazing network in pure NumPy.

Kept import-light so the CLI can cap BLAS threads via environment
variables before numpy loads; submodules are imported lazily.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "analysis",
    "blocks",
    "cli",
    "convolution",
    "erf",
    "gradcheck",
    "haze",
    "imageio",
    "layers",
    "metrics",
    "model",
    "precision",
    "runconfig",
    "tensor",
    "train",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
