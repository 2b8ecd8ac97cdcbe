import socket

import pytest

from chhoyhopper.core import Salt, SharedSecret, StaticResolver


@pytest.fixture
def ts_secret():
    return SharedSecret(b"test-secret")


@pytest.fixture
def pepper():
    return Salt(b"pepper")


@pytest.fixture
def ks_secret():
    return SharedSecret(b"k")


@pytest.fixture
def s_salt():
    return Salt(b"s")


@pytest.fixture
def svc_resolver():
    return StaticResolver({"svc.example": "2001:db8:1:2::dead:beef"})


def ipv6_loopback_available() -> bool:
    if not socket.has_ipv6:
        return False
    try:
        probe = socket.socket(socket.AF_INET6, socket.SOCK_STREAM)
        probe.bind(("::1", 0))
        probe.close()
        return True
    except OSError:
        return False


requires_ipv6_loopback = pytest.mark.skipif(
    not ipv6_loopback_available(), reason="no IPv6 loopback in this environment"
)
