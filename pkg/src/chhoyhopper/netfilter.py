"""Netfilter enforcement: declarative rule plans plus a thin nft adapter.

The daemon never talks to the kernel directly.  It tracks the admitted
address set, renders the rule plan text (see `server.emit_rule_plan`), and
hands the plan to an adapter that translates it into `nft` invocations.
The translation is pure and unit-testable; actually running the commands
needs root and is exercised only in gated integration tests.
"""

from __future__ import annotations

import logging
import subprocess
from dataclasses import dataclass

from .core import HopAddress, ServicePrefix
from .server import (
    AddListener,
    BackendInitError,
    EnsureDropDefault,
    InstallDnat,
    RemoveDnat,
    RemoveListener,
    ServerConfig,
    SlotPlan,
    emit_rule_plan,
)

log = logging.getLogger("chhoyhopper.netfilter")

NFT_TABLE = "chhoyhopper"


@dataclass(frozen=True)
class DropBaseline:
    prefix: ServicePrefix
    port: int
    internal_address: str


class NetfilterBackend:
    """State model of the kernel ruleset, optionally applied via an adapter."""

    def __init__(self, config: ServerConfig, adapter: "NftAdapter | None" = None):
        self.config = config
        self.adapter = adapter
        self._admitted: dict[HopAddress, InstallDnat] = {}
        self.baseline: DropBaseline | None = None

    def admitted_addresses(self) -> frozenset[HopAddress]:
        return frozenset(self._admitted)

    def apply(self, actions) -> None:
        for action in actions:
            if isinstance(action, InstallDnat):
                self._admitted[action.address] = action  # idempotent replay
            elif isinstance(action, RemoveDnat):
                self._admitted.pop(action.address, None)
            elif isinstance(action, EnsureDropDefault):
                self.baseline = DropBaseline(
                    prefix=action.prefix,
                    port=action.port,
                    internal_address=action.internal_address,
                )
            elif isinstance(action, (AddListener, RemoveListener)):
                raise ValueError("listener actions belong to the proxy backend")
            else:
                raise ValueError(f"unknown action: {action!r}")
        if self.adapter is not None:
            self.adapter.sync(self)

    def shutdown(self) -> None:
        self._admitted.clear()
        if self.adapter is not None:
            self.adapter.teardown()

    def rule_plan_for(self, plan: SlotPlan) -> str:
        return emit_rule_plan(plan, self.config)


class NftAdapter:
    """Shells out to nft, rebuilding one dedicated table per sync.

    Rebuilding the whole table from the declarative state keeps the adapter
    idempotent; established flows survive because conntrack state, not the
    rules, carries them (the pass rule).
    """

    def __init__(self, config: ServerConfig, runner=None):
        self.config = config
        self.runner = runner or _run_nft
        if config.interface is None:
            raise BackendInitError("netfilter mode needs --interface")

    def sync(self, backend: NetfilterBackend) -> None:
        for command in self.commands_for(backend):
            self.runner(command)

    def teardown(self) -> None:
        self.runner(["nft", "delete", "table", "ip6", NFT_TABLE])

    def commands_for(self, backend: NetfilterBackend) -> list[list[str]]:
        """The nft argv vectors realizing the backend's admitted state."""
        iface = self.config.interface
        port = str(self.config.service_port)
        internal = self.config.internal_address
        cmds = [
            ["nft", "add", "table", "ip6", NFT_TABLE],
            ["nft", "flush", "table", "ip6", NFT_TABLE],
            [
                "nft", "add", "chain", "ip6", NFT_TABLE, "prerouting",
                "{ type nat hook prerouting priority -100 ; }",
            ],
            [
                "nft", "add", "chain", "ip6", NFT_TABLE, "input",
                "{ type filter hook input priority 0 ; policy accept ; }",
            ],
        ]
        for address in sorted(backend.admitted_addresses()):
            cmds.append(
                [
                    "nft", "add", "rule", "ip6", NFT_TABLE, "prerouting",
                    "iifname", iface, "ip6", "daddr", address.text,
                    "tcp", "dport", port, "ct", "state", "new",
                    "dnat", "to", f"[{internal}]:{port}",
                ]
            )
        cmds.append(
            [
                "nft", "add", "rule", "ip6", NFT_TABLE, "input",
                "ct", "state", "established,related", "accept",
            ]
        )
        baseline = backend.baseline
        if baseline is not None:
            cmds.append(
                [
                    "nft", "add", "rule", "ip6", NFT_TABLE, "input",
                    "iifname", iface, "ip6", "daddr", baseline.prefix.network_text,
                    "tcp", "dport", port, "drop",
                ]
            )
            # EnsureDropDefault also isolates the fixed internal address from
            # external interfaces; it never rotates, so it lives here and not
            # in the per-plan rule text.
            cmds.append(
                [
                    "nft", "add", "rule", "ip6", NFT_TABLE, "input",
                    "iifname", iface, "ip6", "daddr", baseline.internal_address,
                    "tcp", "dport", port, "drop",
                ]
            )
        return cmds


def _run_nft(argv: list[str]) -> None:
    result = subprocess.run(argv, capture_output=True, text=True)
    if result.returncode != 0:
        raise RuntimeError(f"{' '.join(argv)} failed: {result.stderr.strip()}")
