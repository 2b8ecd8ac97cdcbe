"""Chhoyhopper: client and server rendezvous on a time-hopping IPv6 address.

A service hides inside its /64 by admitting TCP only on two addresses
derived from SHA-256(secret, salt, minute); clients sharing the secret
compute the same address and connect, everyone else sees a dark prefix.
"""

from .core import (
    ActiveMinutes,
    HopAddress,
    HopError,
    NoAaaaRecord,
    ResolutionFailure,
    Resolver,
    Salt,
    ServicePrefix,
    SharedSecret,
    StaticResolver,
    SystemResolver,
    active_minutes,
    current_address,
    derive_suffix,
    hop_address,
    minute_index,
    read_key_file,
    resolve_prefix,
    service_prefix,
)

__version__ = "0.1.0"

__all__ = [
    "ActiveMinutes",
    "HopAddress",
    "HopError",
    "NoAaaaRecord",
    "ResolutionFailure",
    "Resolver",
    "Salt",
    "ServicePrefix",
    "SharedSecret",
    "StaticResolver",
    "SystemResolver",
    "active_minutes",
    "current_address",
    "derive_suffix",
    "hop_address",
    "minute_index",
    "read_key_file",
    "resolve_prefix",
    "service_prefix",
    "__version__",
]
