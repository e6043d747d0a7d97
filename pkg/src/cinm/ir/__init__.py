from .core import (
    OPS,
    Builder,
    CapacityError,
    Function,
    IRError,
    IrModule,
    Operation,
    Region,
    ResourceError,
    Token,
    Value,
    VerifyError,
    register_op,
    clone_ops,
    replace_all_uses,
    rewrite_op,
)
from .parser import ParseError, parse_module
from .passes import PASSES, PassFailure, PassPipeline, PassSpec, PassTraceEntry, register_pass, run_pipeline
from .printer import print_module, print_op
from .types import (
    I1,
    I32,
    INDEX,
    BufferType,
    ElementKind,
    IndexType,
    MemRefType,
    OpaqueType,
    TensorType,
    Type,
    WorkgroupType,
)
from .verifier import register_function_check, verify_function, verify_module

__all__ = [name for name in dir() if not name.startswith("_")]
