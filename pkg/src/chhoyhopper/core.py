"""Hop-address derivation shared by the client, the server, and the simulator.

The rendezvous address for a given instant is built from two halves:

* the top 64 bits of the service's public IPv6 address (from DNS or a
  configured prefix literal), and
* a 64-bit suffix taken from SHA-256 over the pre-shared secret, the salt,
  and the current minute index.

The hash input framing is normative for interoperability:

    secret-octets 0x00 salt-octets 0x00 ascii-decimal-minute

with no leading zeros in the minute and no trailing newline.  The NUL
separators keep (secret="ab", salt="c") and (secret="a", salt="bc") from
hashing identically.  The suffix is the first 8 octets of the digest,
interpreted big-endian.
"""

from __future__ import annotations

import hashlib
import ipaddress
import math
import socket
import time
from dataclasses import dataclass
from typing import NamedTuple

HOP_PERIOD_SECONDS = 60
# Second-in-minute below which the previous minute is the nearer neighbour.
ADJACENT_SPLIT_SECONDS = 30

MAX_SECRET_LEN = 1024
MAX_SALT_LEN = 1024

_LOW64 = (1 << 64) - 1


class HopError(Exception):
    """Base class for rendezvous derivation errors."""


class NoAaaaRecord(HopError):
    """The service name has no IPv6 address."""


class ResolutionFailure(HopError):
    """DNS transport failure or timeout."""


@dataclass(frozen=True)
class SharedSecret:
    """Pre-distributed rendezvous credential; opaque octets, never text."""

    data: bytes

    def __post_init__(self):
        if not isinstance(self.data, bytes):
            raise TypeError("secret must be bytes")
        if not 1 <= len(self.data) <= MAX_SECRET_LEN:
            raise ValueError(
                f"secret must be 1..{MAX_SECRET_LEN} octets, got {len(self.data)}"
            )


@dataclass(frozen=True)
class Salt:
    """Per-deployment value mixed into the hash; may be empty."""

    data: bytes = b""

    def __post_init__(self):
        if not isinstance(self.data, bytes):
            raise TypeError("salt must be bytes")
        if len(self.data) > MAX_SALT_LEN:
            raise ValueError(f"salt must be at most {MAX_SALT_LEN} octets")


class ActiveMinutes(NamedTuple):
    """The minute pair a server admits: current plus nearest adjacent."""

    current: int
    adjacent: int

    def as_set(self) -> frozenset[int]:
        return frozenset((self.current, self.adjacent))


@dataclass(frozen=True)
class ServicePrefix:
    """Top 64 bits of the service's public address, plus where it came from."""

    high64: int
    source_name: str

    def __post_init__(self):
        if not 0 <= self.high64 <= _LOW64:
            raise ValueError("prefix must fit in 64 bits")

    @classmethod
    def from_address(cls, address: str, source_name: str | None = None) -> "ServicePrefix":
        """Take the top 64 bits of a full IPv6 address; the low bits are discarded."""
        bits = int(ipaddress.IPv6Address(address))
        return cls(high64=bits >> 64, source_name=source_name or address)

    @property
    def network_text(self) -> str:
        """Canonical `<prefix>/64` rendering of the hopping space."""
        return str(ipaddress.IPv6Network((self.high64 << 64, 64)))


@dataclass(frozen=True, order=True)
class HopAddress:
    """One 128-bit rendezvous address: service prefix over a derived suffix."""

    bits: int

    def __post_init__(self):
        if not 0 <= self.bits < (1 << 128):
            raise ValueError("address must fit in 128 bits")

    @property
    def prefix_high64(self) -> int:
        return self.bits >> 64

    @property
    def suffix(self) -> int:
        return self.bits & _LOW64

    @property
    def text(self) -> str:
        """Canonical lowercase compressed form (RFC 5952 style)."""
        return str(ipaddress.IPv6Address(self.bits))

    def __str__(self) -> str:
        return self.text


def minute_index(epoch_seconds) -> int:
    """Minutes since the Unix epoch: floor(epoch_seconds / 60)."""
    if epoch_seconds < 0:
        raise ValueError("epoch_seconds must be nonnegative")
    return int(math.floor(epoch_seconds / 60))


def active_minutes(epoch_seconds) -> ActiveMinutes:
    """The current minute and the nearest adjacent minute.

    In the first half of a minute the previous minute is nearer, in the
    second half the next one.  Together with the server admitting both
    minutes this guarantees rendezvous for clock skews up to +/-30 s.
    At minute 0 the adjacent minute clamps to 1 (no negative minutes).
    """
    current = minute_index(epoch_seconds)
    second_in_minute = epoch_seconds - current * 60
    if second_in_minute < ADJACENT_SPLIT_SECONDS:
        adjacent = current - 1
    else:
        adjacent = current + 1
    if adjacent < 0:
        adjacent = 1
    return ActiveMinutes(current=current, adjacent=adjacent)


def hash_input(secret: SharedSecret, salt: Salt, minute: int) -> bytes:
    """The normative byte framing fed to SHA-256."""
    if minute < 0:
        raise ValueError("minute index must be nonnegative")
    return secret.data + b"\x00" + salt.data + b"\x00" + str(int(minute)).encode("ascii")


def derive_suffix(secret: SharedSecret, salt: Salt, minute: int) -> int:
    """64-bit interface identifier: first 8 octets of the digest, big-endian."""
    digest = hashlib.sha256(hash_input(secret, salt, minute)).digest()
    return int.from_bytes(digest[:8], "big")


def hop_address(prefix: ServicePrefix, suffix: int) -> HopAddress:
    """Service prefix over the derived suffix; exactly 64 bits each."""
    if not 0 <= suffix <= _LOW64:
        raise ValueError("suffix must fit in 64 bits")
    return HopAddress(bits=(prefix.high64 << 64) | suffix)


class Resolver:
    """Resolves a DNS name to its IPv6 addresses, in resolver order."""

    def resolve_aaaa(self, name: str) -> list[str]:
        raise NotImplementedError


class SystemResolver(Resolver):
    """Resolution through the host's stub resolver (trusted; see README)."""

    def resolve_aaaa(self, name: str) -> list[str]:
        try:
            infos = socket.getaddrinfo(name, None, socket.AF_INET6, socket.SOCK_STREAM)
        except socket.gaierror as exc:
            if exc.errno in (socket.EAI_NONAME, getattr(socket, "EAI_NODATA", -5)):
                raise NoAaaaRecord(f"no AAAA record for {name!r}") from exc
            raise ResolutionFailure(f"lookup of {name!r} failed: {exc}") from exc
        addresses = []
        for _family, _type, _proto, _canon, sockaddr in infos:
            if sockaddr[0] not in addresses:
                addresses.append(sockaddr[0])
        if not addresses:
            raise NoAaaaRecord(f"no AAAA record for {name!r}")
        return addresses


class StaticResolver(Resolver):
    """Fixed name->addresses map for deterministic tests and offline use."""

    def __init__(self, table: dict[str, list[str] | str] | None = None):
        self._table: dict[str, list[str]] = {}
        for name, value in (table or {}).items():
            self.add(name, value)

    def add(self, name: str, value: list[str] | str) -> None:
        addresses = [value] if isinstance(value, str) else list(value)
        self._table.setdefault(name, []).extend(addresses)

    def resolve_aaaa(self, name: str) -> list[str]:
        try:
            return list(self._table[name])
        except KeyError:
            raise NoAaaaRecord(f"no AAAA record for {name!r}") from None


def parse_resolver_map(text: str) -> StaticResolver:
    """Parse `name whitespace ipv6` lines; repeated names append in order."""
    resolver = StaticResolver()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"resolver map line {lineno}: expected 'name address'")
        name, address = parts
        ipaddress.IPv6Address(address)  # reject junk early
        resolver.add(name, address)
    return resolver


def load_resolver_map(path) -> StaticResolver:
    with open(path, "r", encoding="ascii") as fh:
        return parse_resolver_map(fh.read())


def resolve_prefix(name: str, resolver: Resolver) -> ServicePrefix:
    """Top 64 bits of the first AAAA record; the low 64 bits are discarded."""
    first = resolver.resolve_aaaa(name)[0]
    return ServicePrefix.from_address(first, source_name=name)


def service_prefix(name_or_prefix, resolver: Resolver | None = None) -> ServicePrefix:
    """Turn a DNS name, an IPv6 literal, or a `<prefix>/64` into a ServicePrefix.

    Literals are recognised by containing a colon; anything else goes through
    the resolver.
    """
    if isinstance(name_or_prefix, ServicePrefix):
        return name_or_prefix
    text = str(name_or_prefix)
    if ":" in text:
        if "/" in text:
            addr, _, length = text.partition("/")
            if length != "64":
                raise ValueError(f"hopping prefix must be a /64, got /{length}")
            return ServicePrefix.from_address(addr, source_name=text)
        return ServicePrefix.from_address(text)
    if resolver is None:
        resolver = SystemResolver()
    return resolve_prefix(text, resolver)


def current_address(
    secret: SharedSecret,
    salt: Salt,
    name_or_prefix,
    epoch_seconds,
    resolver: Resolver | None = None,
) -> HopAddress:
    """The rendezvous address valid at `epoch_seconds`."""
    prefix = service_prefix(name_or_prefix, resolver)
    return hop_address(prefix, derive_suffix(secret, salt, minute_index(epoch_seconds)))


def read_key_file(path) -> SharedSecret:
    """Read the secret verbatim, stripping at most one trailing newline.

    A final 0x0A (optionally preceded by 0x0D) is treated as an editor
    artifact and removed; every other byte is significant.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data.endswith(b"\r\n"):
        data = data[:-2]
    elif data.endswith(b"\n"):
        data = data[:-1]
    return SharedSecret(data)


class SystemClock:
    """Wall-clock time; the daemon assumes NTP keeps it honest."""

    def now(self) -> float:
        return time.time()
