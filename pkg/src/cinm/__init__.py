"""A layered compiler for compute-in-memory and compute-near-memory devices."""

# Importing the submodules registers their ops, interpreter semantics and passes.
from . import dialects, rewrites, xform  # noqa: F401
from .lowering import to_cim, to_cnm, to_upmem  # noqa: F401
from .backends import memristor, upmem  # noqa: F401
from . import pipelines, targetsel  # noqa: F401
