from . import cim, cinm, cnm, core  # noqa: F401  (registers ops and interpreter semantics)
