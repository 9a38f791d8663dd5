"""Self-supervised pitch-contour representations: pipeline, models, CLI.

Submodules load lazily so lightweight entry points (the CLI in
particular) can configure the process before numpy comes in.
"""

from importlib import import_module

__all__ = [
    "autodiff",
    "cli",
    "contour",
    "errors",
    "estimators",
    "ingest",
    "models",
    "pipeline",
    "statfeat",
    "util",
    "verify",
]

__version__ = "1.0.0"


def __getattr__(name: str):
    if name in __all__:
        module = import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(__all__ + ["__version__"])
