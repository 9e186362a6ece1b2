"""Remote client for the pheromone coordinator protocol."""

from .client import Client, ENV_COORDINATORS
from .wire import (
    BY_BATCH_SIZE,
    BY_NAME,
    BY_SET,
    BY_TIME,
    DIRECT,
    DYNAMIC_GROUP,
    DYNAMIC_JOIN,
    EVERY_OBJ,
    IMMEDIATE,
    PERIODIC,
    PER_SESSION,
    REDUNDANT,
    ServerError,
    WireError,
)

__version__ = "0.1.0"

__all__ = [
    "Client", "ENV_COORDINATORS", "ServerError", "WireError",
    "IMMEDIATE", "BY_BATCH_SIZE", "BY_TIME", "BY_NAME", "BY_SET", "REDUNDANT",
    "DYNAMIC_JOIN", "DYNAMIC_GROUP", "DIRECT", "PERIODIC", "EVERY_OBJ", "PER_SESSION",
    "__version__",
]
