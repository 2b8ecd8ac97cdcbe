"""Client-side rendezvous: compute the hop address, print it or wrap a command.

The client runs the same derivation as the server for its own clock's
current minute; the server's two-slot window absorbs up to 30 s of skew.
"""

from __future__ import annotations

import argparse
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .core import (
    HopAddress,
    HopError,
    Resolver,
    Salt,
    SharedSecret,
    SystemClock,
    active_minutes,
    current_address,
    derive_suffix,
    hop_address,
    load_resolver_map,
    read_key_file,
    service_prefix,
)

EXIT_CONFIG = 2


class ClientConfigError(Exception):
    """Bad client configuration; nothing was launched."""


class UnknownPlaceholder(ClientConfigError):
    """The command template used a %-directive that does not exist."""


@dataclass
class ClientConfig:
    host: str
    key_file: Path
    salt: str
    mode: str = "print"  # or "exec"
    command_template: list[str] = field(default_factory=list)
    port: int | None = None
    try_adjacent: bool = False

    def __post_init__(self):
        if self.mode not in ("print", "exec"):
            raise ClientConfigError(f"unknown mode: {self.mode!r}")
        if self.mode == "exec":
            if not self.command_template:
                raise ClientConfigError("exec mode needs a command template")
            if not any(_has_host_placeholder(arg) for arg in self.command_template):
                raise ClientConfigError("exec template must contain %h")


def _has_host_placeholder(arg: str) -> bool:
    i = 0
    while i < len(arg) - 1:
        if arg[i] == "%":
            if arg[i + 1] == "h":
                return True
            i += 2  # %%, %p, and anything else consume their directive
        else:
            i += 1
    return False


def format_command(template: list[str], address: str, port: int | None) -> list[str]:
    """Substitute %h/%p/%% per argument; arguments are never split or merged."""
    return [_format_arg(arg, address, port) for arg in template]


def _format_arg(arg: str, address: str, port: int | None) -> str:
    out: list[str] = []
    i = 0
    while i < len(arg):
        ch = arg[i]
        if ch != "%":
            out.append(ch)
            i += 1
            continue
        if i + 1 >= len(arg):
            raise UnknownPlaceholder("dangling % at end of argument")
        directive = arg[i + 1]
        if directive == "h":
            out.append(address)
        elif directive == "p":
            if port is None:
                raise ClientConfigError("template uses %p but no port is set")
            out.append(str(port))
        elif directive == "%":
            out.append("%")
        else:
            raise UnknownPlaceholder(f"unknown placeholder %{directive}")
        i += 2
    return "".join(out)


def resolve_target(
    config: ClientConfig, clock=None, resolver: Resolver | None = None
) -> HopAddress:
    """The server's hop address for the client's current minute."""
    secret = read_key_file(config.key_file)
    clock = clock or SystemClock()
    return current_address(
        secret, Salt(config.salt.encode("utf-8")), config.host, clock.now(), resolver
    )


def resolve_adjacent_target(
    config: ClientConfig, clock=None, resolver: Resolver | None = None
) -> HopAddress:
    """The address for the nearest adjacent minute (the --try-adjacent fallback)."""
    secret = read_key_file(config.key_file)
    clock = clock or SystemClock()
    prefix = service_prefix(config.host, resolver)
    minutes = active_minutes(clock.now())
    salt = Salt(config.salt.encode("utf-8"))
    return hop_address(prefix, derive_suffix(secret, salt, minutes.adjacent))


def run(config: ClientConfig, clock=None, resolver: Resolver | None = None) -> int:
    """Print the address, or launch the templated command and pass its status."""
    try:
        target = resolve_target(config, clock, resolver)
        if config.mode == "print":
            print(target.text)
            return 0
        argv = format_command(config.command_template, target.text, config.port)
    except (ClientConfigError, HopError, OSError, ValueError) as exc:
        print(f"chhoyhopper-client: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    status = subprocess.call(argv)
    if status != 0 and config.try_adjacent:
        try:
            fallback = resolve_adjacent_target(config, clock, resolver)
            argv = format_command(config.command_template, fallback.text, config.port)
        except (ClientConfigError, HopError, OSError, ValueError) as exc:
            print(f"chhoyhopper-client: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        status = subprocess.call(argv)
    return status


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chhoyhopper-client",
        description="Compute the service's current hop address; print it or "
        "launch a native client against it (placeholders: %h address, %p port, "
        "%% literal percent).",
    )
    parser.add_argument("--host", required=True, help="service DNS name or prefix")
    parser.add_argument("--key-file", required=True, help="file holding the secret")
    parser.add_argument("--salt", default="", help="per-deployment salt string")
    parser.add_argument("--port", type=int, help="port substituted for %%p")
    mode = parser.add_mutually_exclusive_group()
    mode.add_argument("--print", dest="print_mode", action="store_true",
                      help="write the address to stdout (default)")
    mode.add_argument("--exec", dest="template", nargs=argparse.REMAINDER,
                      help="command template to launch; consumes remaining args")
    parser.add_argument("--try-adjacent", action="store_true",
                        help="on nonzero exit, retry once with the adjacent-minute "
                        "address (exec mode only)")
    parser.add_argument("--resolver-map", help="file of 'name ipv6' lines instead "
                        "of DNS (deterministic testing)")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    resolver = None
    try:
        if args.resolver_map:
            resolver = load_resolver_map(args.resolver_map)
        config = ClientConfig(
            host=args.host,
            key_file=Path(args.key_file),
            salt=args.salt,
            mode="exec" if args.template is not None else "print",
            command_template=args.template or [],
            port=args.port,
            try_adjacent=args.try_adjacent,
        )
    except (ClientConfigError, OSError, ValueError) as exc:
        print(f"chhoyhopper-client: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(config, resolver=resolver)


if __name__ == "__main__":
    sys.exit(main())
