"""In-process rendezvous simulator: virtual clock, virtual address registry.

Connections are modeled as instantaneous admission checks against the
registry, which keeps timing behavior (skew tolerance, rotation instants)
exhaustively checkable with no OS networking involved.  Data transfer is
the proxy backend's job, tested separately.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field

from .core import (
    HopAddress,
    Salt,
    SharedSecret,
    current_address,
    minute_index,
    read_key_file,
    service_prefix,
)
from .server import ServerConfig, compute_slot_plan

ACCEPTED = "accepted"
REFUSED = "refused"


class SimClock:
    """Virtual time; advances only when a test says so."""

    def __init__(self, start: float = 0.0):
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def advance(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("virtual time may not move backwards")
        self._now += seconds


@dataclass(frozen=True)
class ConnectionAttempt:
    time: float
    source: str
    destination: HopAddress
    outcome: str


@dataclass
class SimNetwork:
    """Address registry plus a log of every connection attempt."""

    registry: dict[HopAddress, str] = field(default_factory=dict)
    log: list[ConnectionAttempt] = field(default_factory=list)

    def connect(self, time: float, source: str, destination: HopAddress) -> bool:
        accepted = destination in self.registry
        self.log.append(
            ConnectionAttempt(
                time=time,
                source=source,
                destination=destination,
                outcome=ACCEPTED if accepted else REFUSED,
            )
        )
        return accepted

    def addresses_of(self, endpoint: str) -> frozenset[HopAddress]:
        return frozenset(a for a, e in self.registry.items() if e == endpoint)


class SimServer:
    """A hopping server as the network sees it: two registered addresses."""

    def __init__(self, name: str, config: ServerConfig, network: SimNetwork):
        self.name = name
        self.config = config
        self.network = network
        self._running = True

    def tick(self, clock) -> None:
        """Converge this server's registry entries to the plan for `now`."""
        for address in self.network.addresses_of(self.name):
            del self.network.registry[address]
        if not self._running:
            return
        plan = compute_slot_plan(self.config, clock.now())
        for address in plan.addresses:
            self.network.registry[address] = self.name
        assert len(self.network.addresses_of(self.name)) == 2

    def shutdown(self) -> None:
        self._running = False


def sim_client_connect(
    network: SimNetwork,
    clock,
    secret: SharedSecret,
    salt: Salt,
    host_or_prefix,
    skew_seconds: float = 0.0,
    source: str = "client",
) -> bool:
    """One rendezvous attempt from a client whose clock is off by `skew_seconds`."""
    client_time = clock.now() + skew_seconds
    address = current_address(secret, salt, host_or_prefix, client_time)
    return network.connect(clock.now(), source, address)


def skew_sweep_report(
    secret: SharedSecret,
    salt: Salt,
    prefix,
    skews,
    window_start: int = 3600,
    window_seconds: int = 600,
) -> list[tuple[int, float]]:
    """Per-second acceptance fraction for each skew over the time window."""
    if window_seconds < 120:
        raise ValueError("window must cover at least two minutes")
    skews = list(skews)
    if window_start + min(skews) < 0:
        raise ValueError("window start too early for the most negative skew")
    resolved = service_prefix(prefix)
    config = ServerConfig(
        service=resolved.network_text,
        internal_address="::1",
        service_port=22,
        secret=secret,
        salt=salt,
    )
    # The registry only ever holds addresses for a handful of minutes;
    # memoize per-minute client addresses instead of re-deriving 10^5 times.
    client_cache: dict[int, HopAddress] = {}

    def client_address(epoch: float) -> HopAddress:
        minute = minute_index(epoch)
        if minute not in client_cache:
            client_cache[minute] = current_address(secret, salt, resolved, epoch)
        return client_cache[minute]

    network = SimNetwork()
    server = SimServer("svc", config, network)
    clock = SimClock(window_start)
    hits = {skew: 0 for skew in skews}
    for _ in range(window_seconds):
        server.tick(clock)
        for skew in skews:
            address = client_address(clock.now() + skew)
            if network.connect(clock.now(), f"client[{skew:+d}]", address):
                hits[skew] += 1
        clock.advance(1)
    return [(skew, hits[skew] / window_seconds) for skew in skews]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chhoyhopper-sim",
        description="Deterministic rendezvous simulation without OS networking.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sweep = sub.add_parser(
        "sweep", help="CSV of acceptance fraction per client clock skew"
    )
    sweep.add_argument("--skew-min", type=int, default=-120)
    sweep.add_argument("--skew-max", type=int, default=120)
    sweep.add_argument("--window", type=int, default=600, help="window length, seconds")
    sweep.add_argument("--window-start", type=int, default=3600)
    sweep.add_argument("--key-file", help="secret file (a fixed demo key otherwise)")
    sweep.add_argument("--salt", default="sim")
    sweep.add_argument("--prefix", default="2001:db8::/64")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.key_file:
            secret = read_key_file(args.key_file)
        else:
            secret = SharedSecret(b"sim-demo-secret")  # sweep shape is key-independent
        report = skew_sweep_report(
            secret,
            Salt(args.salt.encode("utf-8")),
            args.prefix,
            range(args.skew_min, args.skew_max + 1),
            window_start=args.window_start,
            window_seconds=args.window,
        )
    except (OSError, ValueError) as exc:
        print(f"chhoyhopper-sim: {exc}", file=sys.stderr)
        return 2
    print("skew_seconds,acceptance_fraction")
    for skew, fraction in report:
        print(f"{skew},{fraction:.6f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
