"""Serverless platform where data buckets and trigger rules drive orchestration."""

from .core import (
    AppSpec,
    DataObject,
    DepType,
    FunctionRequest,
    FunctionSpec,
    InlineArg,
    NodeStatus,
    ObjectRef,
    PheromoneError,
    ProtocolError,
    ReExecMode,
    ReExecRule,
    RefArg,
    Registry,
    RemoteError,
    RequestOrigin,
    SpecError,
    StoreError,
    TriggerAction,
    TriggerError,
    TriggerKind,
    TriggerScope,
    TriggerSpec,
    UnknownAppError,
    compile_dependencies,
    make_trigger_spec,
    new_session,
)
from .triggers import TriggerState, group_of

__version__ = "0.1.0"

__all__ = [
    "AppSpec", "DataObject", "DepType", "FunctionRequest", "FunctionSpec", "InlineArg",
    "NodeStatus", "ObjectRef", "PheromoneError", "ProtocolError", "ReExecMode",
    "ReExecRule", "RefArg", "Registry", "RemoteError", "RequestOrigin", "SpecError",
    "StoreError", "TriggerAction", "TriggerError", "TriggerKind", "TriggerScope",
    "TriggerSpec", "TriggerState", "UnknownAppError", "compile_dependencies",
    "group_of", "make_trigger_spec", "new_session", "__version__",
]
