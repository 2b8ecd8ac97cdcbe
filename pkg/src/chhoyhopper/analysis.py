"""Closed-form discovery-risk and collision-risk calculators.

Collisions among k servers hopping independently in a space of N = 2^b
addresses follow the birthday bound 1 - exp(-k(k-1)/2N) per hop interval.
Discovery risk is plain scan-rate arithmetic over the same space.
"""

from __future__ import annotations

import argparse
import math
import sys

SECONDS_PER_YEAR = 365.25 * 86400
DEFAULT_SPACE_BITS = 64
DEFAULT_HOP_PERIOD_SECONDS = 60.0


class InfiniteHorizon(Exception):
    """A single server can never collide with itself."""


def _check_space_bits(space_bits: int) -> None:
    if not 1 <= space_bits <= 64:
        raise ValueError(f"space_bits must be in 1..64, got {space_bits}")


def collision_probability(k: int, space_bits: int = DEFAULT_SPACE_BITS) -> float:
    """Probability that any two of k servers share an address in one interval.

    Evaluated as -expm1(-k(k-1)/2N): the exponent is ~1e-8 even for a
    million servers in 2^64, where the naive 1 - e^x loses all precision.
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    _check_space_bits(space_bits)
    pairs = k * (k - 1) // 2  # exact in int
    exponent = pairs / (1 << space_bits)
    return -math.expm1(-exponent)


def expected_years_to_collision(
    k: int,
    space_bits: int = DEFAULT_SPACE_BITS,
    hop_period_seconds: float = DEFAULT_HOP_PERIOD_SECONDS,
) -> float:
    """Mean years until the first same-interval collision among k servers."""
    if hop_period_seconds <= 0:
        raise ValueError("hop_period_seconds must be positive")
    probability = collision_probability(k, space_bits)
    if probability == 0.0:
        raise InfiniteHorizon("one server never collides")
    hops_per_year = SECONDS_PER_YEAR / hop_period_seconds
    return 1.0 / (probability * hops_per_year)


def scan_rate_addresses_per_second(scan_rate_bps: float, probe_bytes: int) -> float:
    """Addresses per second a scanner covers at the given line rate."""
    if scan_rate_bps <= 0:
        raise ValueError("scan_rate_bps must be positive")
    if probe_bytes < 1:
        raise ValueError("probe_bytes must be at least 1")
    return scan_rate_bps / (8.0 * probe_bytes)


def expected_scan_years(
    space_bits: int, addresses_per_second: float, half_space: bool = False
) -> float:
    """Years to cover the hop space at the given rate.

    The default is the full-space figure (space / rate); pass
    half_space=True for the mean time to hit one uniformly placed target,
    which is half that.
    """
    _check_space_bits(space_bits)
    if addresses_per_second <= 0:
        raise ValueError("addresses_per_second must be positive")
    years = (1 << space_bits) / addresses_per_second / SECONDS_PER_YEAR
    return years / 2.0 if half_space else years


# ----------------------------------------------------------------------------
# CLI


def _cmd_collision(args) -> int:
    probability = collision_probability(args.servers, args.space_bits)
    print(f"servers={args.servers}")
    print(f"space_bits={args.space_bits}")
    print(f"hop_period_seconds={args.hop_period:g}")
    print(f"collision_probability={probability:.6e}")
    if probability == 0.0:
        print("expected_years_to_collision=inf")
        print(
            f"A single server hopping in 2^{args.space_bits} addresses "
            "cannot collide with itself."
        )
        return 0
    years = expected_years_to_collision(args.servers, args.space_bits, args.hop_period)
    print(f"collision_odds_one_in={1.0 / probability:.6e}")
    print(f"expected_years_to_collision={years:.6e}")
    print(
        f"With {args.servers} servers hopping in 2^{args.space_bits} addresses, "
        f"any interval collides with odds of about 1 in {1.0 / probability:.3g}; "
        f"expect one roughly every {years:.3g} years."
    )
    return 0


def _cmd_scan(args) -> int:
    rate = scan_rate_addresses_per_second(args.rate_gbps * 1e9, args.probe_bytes)
    years = expected_scan_years(args.space_bits, rate, args.expected_half_space)
    convention = "half-space" if args.expected_half_space else "full-space"
    print(f"scan_rate_gbps={args.rate_gbps:g}")
    print(f"probe_bytes={args.probe_bytes}")
    print(f"space_bits={args.space_bits}")
    print(f"addresses_per_second={rate:.6e}")
    print(f"convention={convention}")
    print(f"expected_scan_years={years:.6e}")
    print(
        f"A scanner with {args.rate_gbps:g} Gb/s of {args.probe_bytes}-byte probes "
        f"covers {rate:.3g} addresses/s; the {convention} time over "
        f"2^{args.space_bits} addresses is about {years:.3g} years."
    )
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chhoyhopper-analyze",
        description="Discovery-risk and collision-risk figures for time-hopping "
        "IPv6 services.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    collision = sub.add_parser("collision", help="birthday-bound collision odds")
    collision.add_argument("--servers", type=int, required=True, metavar="K")
    collision.add_argument("--space-bits", type=int, default=DEFAULT_SPACE_BITS)
    collision.add_argument(
        "--hop-period", type=float, default=DEFAULT_HOP_PERIOD_SECONDS, metavar="S"
    )
    collision.set_defaults(func=_cmd_collision)

    scan = sub.add_parser("scan", help="brute-force scan time over the hop space")
    scan.add_argument("--rate-gbps", type=float, required=True)
    scan.add_argument("--probe-bytes", type=int, required=True, metavar="B")
    scan.add_argument("--space-bits", type=int, default=DEFAULT_SPACE_BITS)
    scan.add_argument(
        "--expected-half-space",
        action="store_true",
        help="report the mean time to hit one target instead of full coverage",
    )
    scan.set_defaults(func=_cmd_scan)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, InfiniteHorizon) as exc:
        print(f"chhoyhopper-analyze: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
