"""Server-side hopping daemon.

Tracks the pair of currently valid hop addresses and keeps a pluggable
enforcement backend in sync: a userspace forwarding proxy, or netfilter
rule-plan emission for an OS adapter.  Established flows outlive the
rotation that admitted them; only the admission of NEW flows rotates.
"""

from __future__ import annotations

import argparse
import ipaddress
import logging
import signal
import sys
import threading
from dataclasses import dataclass

from .core import (
    ActiveMinutes,
    HopAddress,
    HopError,
    Resolver,
    Salt,
    ServicePrefix,
    SharedSecret,
    SystemClock,
    active_minutes,
    derive_suffix,
    hop_address,
    read_key_file,
    service_prefix,
)

log = logging.getLogger("chhoyhopper.server")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3

# Seconds between sweeps of drained hop addresses in proxy mode.
ADDRESS_GC_SECONDS = 10.0


class ConfigError(Exception):
    """Bad or inconsistent server configuration."""


class BackendInitError(Exception):
    """The enforcement backend could not be brought up."""


@dataclass
class ServerConfig:
    service: str  # DNS name, IPv6 literal, or <prefix>/64
    internal_address: str
    service_port: int
    secret: SharedSecret
    salt: Salt
    backend: str = "proxy"
    interface: str | None = None
    poll_granularity: float = 1.0

    def __post_init__(self):
        if not 1 <= self.service_port <= 65535:
            raise ConfigError(f"service_port out of range: {self.service_port}")
        if self.backend not in ("proxy", "netfilter"):
            raise ConfigError(f"unknown backend: {self.backend!r}")
        if self.poll_granularity <= 0:
            raise ConfigError("poll_granularity must be positive")


@dataclass(frozen=True)
class SlotPlan:
    """The two addresses admitted right now, current minute first."""

    minutes: ActiveMinutes
    addresses: tuple[HopAddress, HopAddress]
    computed_at: float

    @property
    def address_set(self) -> frozenset[HopAddress]:
        return frozenset(self.addresses)


def compute_slot_plan(
    config: ServerConfig, epoch_seconds, resolver: Resolver | None = None
) -> SlotPlan:
    """Addresses for the current and nearest adjacent minute, current first."""
    prefix = service_prefix(config.service, resolver)
    minutes = active_minutes(epoch_seconds)
    addresses = tuple(
        hop_address(prefix, derive_suffix(config.secret, config.salt, m))
        for m in minutes
    )
    return SlotPlan(minutes=minutes, addresses=addresses, computed_at=epoch_seconds)


# ----------------------------------------------------------------------------
# Enforcement actions


@dataclass(frozen=True)
class AddListener:
    address: HopAddress
    port: int


@dataclass(frozen=True)
class RemoveListener:
    address: HopAddress


@dataclass(frozen=True)
class InstallDnat:
    address: HopAddress
    internal_address: str
    port: int


@dataclass(frozen=True)
class RemoveDnat:
    address: HopAddress


@dataclass(frozen=True)
class EnsureDropDefault:
    prefix: ServicePrefix
    port: int
    internal_address: str


Action = AddListener | RemoveListener | InstallDnat | RemoveDnat | EnsureDropDefault
ActionList = tuple[Action, ...]


def admission_diff(
    admitted: frozenset[HopAddress], new: SlotPlan, config: ServerConfig
) -> ActionList:
    """Minimal actions taking the currently admitted set to the new plan.

    Additions come first so a backend that cannot apply the batch atomically
    never passes through an under-admitted state.
    """
    entering = [a for a in new.addresses if a not in admitted]
    leaving = sorted(admitted - new.address_set)
    actions: list[Action] = []
    if config.backend == "proxy":
        actions.extend(AddListener(a, config.service_port) for a in entering)
        actions.extend(RemoveListener(a) for a in leaving)
    else:
        actions.extend(
            InstallDnat(a, config.internal_address, config.service_port)
            for a in entering
        )
        actions.extend(RemoveDnat(a) for a in leaving)
    return tuple(actions)


def plan_diff(old: SlotPlan | None, new: SlotPlan, config: ServerConfig) -> ActionList:
    """Actions for one rotation step; empty when the address sets match."""
    admitted = old.address_set if old is not None else frozenset()
    return admission_diff(admitted, new, config)


# ----------------------------------------------------------------------------
# Rule-plan emission (netfilter mode)


def emit_rule_plan(plan: SlotPlan, config: ServerConfig) -> str:
    """Deterministic rule text enforcing the plan's admission policy.

    One DNAT line per admitted address for NEW flows, one pass line for
    established/related flows, one terminal drop for everything else aimed
    at the hopping /64 on the service port.  Byte-identical for identical
    inputs; ends with a newline.
    """
    prefix = ServicePrefix(plan.addresses[0].prefix_high64, source_name=config.service)
    internal = config.internal_address
    if int(_parse_ipv6(internal)) >> 64 == prefix.high64:
        raise ConfigError(
            "internal address must not lie inside the hopping /64 in netfilter mode"
        )
    port = config.service_port
    lines = [
        f"dnat6 dst={addr.text} tcp dport={port} state=NEW -> {internal}:{port}"
        for addr in plan.addresses
    ]
    lines.append("pass state=ESTABLISHED,RELATED")
    lines.append(f"drop6 dst={prefix.network_text} tcp dport={port}")
    return "\n".join(lines) + "\n"


def _parse_ipv6(text: str) -> ipaddress.IPv6Address:
    try:
        return ipaddress.IPv6Address(text)
    except ValueError as exc:
        raise ConfigError(f"not an IPv6 address: {text!r}") from exc


# ----------------------------------------------------------------------------
# Rotation


class RotationController:
    """Sole writer of enforcement state; one tick converges backend to plan."""

    def __init__(self, config: ServerConfig, backend, clock=None, resolver=None):
        self.config = config
        self.backend = backend
        self.clock = clock or SystemClock()
        self.resolver = resolver
        self.plan: SlotPlan | None = None
        self._last_gc = 0.0

    def start(self) -> SlotPlan:
        """Resolve the prefix, apply the default-drop baseline, converge."""
        plan = compute_slot_plan(self.config, self.clock.now(), self.resolver)
        prefix = ServicePrefix(
            plan.addresses[0].prefix_high64, source_name=self.config.service
        )
        self.backend.apply(
            (
                EnsureDropDefault(
                    prefix=prefix,
                    port=self.config.service_port,
                    internal_address=self.config.internal_address,
                ),
            )
        )
        return self._converge(plan)

    def tick(self) -> SlotPlan:
        """Recompute the plan and converge the backend to it.

        Transient resolution failures keep the last good prefix: hopping
        continues because only the suffix depends on time.
        """
        now = self.clock.now()
        try:
            plan = compute_slot_plan(self.config, now, self.resolver)
        except HopError as exc:
            if self.plan is None:
                raise
            log.warning("event=resolution_failed error=%r keeping_last_plan=1", exc)
            prefix = ServicePrefix(
                self.plan.addresses[0].prefix_high64, source_name=self.config.service
            )
            minutes = active_minutes(now)
            plan = SlotPlan(
                minutes=minutes,
                addresses=tuple(
                    hop_address(
                        prefix, derive_suffix(self.config.secret, self.config.salt, m)
                    )
                    for m in minutes
                ),
                computed_at=now,
            )
        return self._converge(plan)

    def _converge(self, plan: SlotPlan) -> SlotPlan:
        actions = admission_diff(self.backend.admitted_addresses(), plan, self.config)
        if actions:
            try:
                self.backend.apply(actions)
            except Exception as exc:  # retried next tick
                log.error("event=backend_apply_failed error=%r", exc)
                return self.plan if self.plan is not None else plan
            log.info(
                "event=plan_transition minute_current=%d minute_adjacent=%d "
                "addresses=%s,%s",
                plan.minutes.current,
                plan.minutes.adjacent,
                plan.addresses[0],
                plan.addresses[1],
            )
        now = self.clock.now()
        if now - self._last_gc >= ADDRESS_GC_SECONDS:
            self._last_gc = now
            gc = getattr(self.backend, "collect_drained", None)
            if gc is not None:
                gc()
        self.plan = plan
        return plan

    def run_forever(self, stop: threading.Event) -> None:
        """Tick at every half-minute boundary, with a poll-granularity net."""
        while not stop.is_set():
            self.tick()
            now = self.clock.now()
            to_boundary = 30.0 - (now % 30.0)
            stop.wait(min(self.config.poll_granularity, max(to_boundary, 0.05)))
        self.backend.shutdown()
        log.info("event=shutdown")


# ----------------------------------------------------------------------------
# CLI


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chhoyhopper-server",
        description="Admit TCP only on the pair of time-hopping IPv6 addresses "
        "derived from a shared secret, forwarding to a fixed internal service.",
    )
    target = parser.add_mutually_exclusive_group(required=True)
    target.add_argument("--host", help="DNS name whose AAAA record supplies the /64")
    target.add_argument("--prefix", help="hopping prefix literal, e.g. 2001:db8::/64")
    parser.add_argument("--internal", required=True, help="internal service address")
    parser.add_argument("--port", required=True, type=int, help="service TCP port")
    parser.add_argument("--key-file", required=True, help="file holding the secret")
    parser.add_argument("--salt", default="", help="per-deployment salt string")
    parser.add_argument("--backend", choices=("proxy", "netfilter"), default="proxy")
    parser.add_argument("--interface", help="external interface (netfilter mode)")
    parser.add_argument(
        "--poll-granularity", type=float, default=1.0, help="safety-net tick, seconds"
    )
    parser.add_argument(
        "--dry-run",
        action="store_true",
        help="print the rule plan for the current instant and exit",
    )
    parser.add_argument("--log-level", default="INFO")
    return parser


def config_from_args(args) -> ServerConfig:
    try:
        secret = read_key_file(args.key_file)
    except OSError as exc:
        raise ConfigError(f"cannot read key file: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"bad key file: {exc}") from exc
    return ServerConfig(
        service=args.host or args.prefix,
        internal_address=args.internal,
        service_port=args.port,
        secret=secret,
        salt=Salt(args.salt.encode("utf-8")),
        backend=args.backend,
        interface=args.interface,
        poll_granularity=args.poll_granularity,
    )


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level.upper(), format="%(asctime)s %(name)s %(message)s"
    )
    try:
        config = config_from_args(args)
        if args.dry_run:
            plan = compute_slot_plan(config, SystemClock().now())
            sys.stdout.write(emit_rule_plan(plan, config))
            return EXIT_OK
    except (ConfigError, HopError, ValueError) as exc:
        print(f"chhoyhopper-server: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if config.backend == "proxy":
            from .proxy import ProxyBackend

            backend = ProxyBackend(config)
        else:
            from .netfilter import NetfilterBackend, NftAdapter

            backend = NetfilterBackend(config, NftAdapter(config))
        controller = RotationController(config, backend)
        controller.start()
    except (HopError, ConfigError, BackendInitError, OSError) as exc:
        print(f"chhoyhopper-server: backend init failed: {exc}", file=sys.stderr)
        return EXIT_BACKEND

    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    controller.run_forever(stop)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
