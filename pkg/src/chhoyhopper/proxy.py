"""Userspace enforcement backend: per-address TCP listeners plus a relay.

Admission is physical: a hop address accepts NEW flows exactly while its
listener socket is open.  Closing the listener refuses new connections at
the OS level but leaves accepted sockets untouched, so established flows
keep relaying across rotations until a peer closes.
"""

from __future__ import annotations

import itertools
import logging
import socket
import threading
import time
from dataclasses import dataclass

from .core import HopAddress
from .server import (
    AddListener,
    EnsureDropDefault,
    InstallDnat,
    RemoveDnat,
    RemoveListener,
    ServerConfig,
)

log = logging.getLogger("chhoyhopper.proxy")

RELAY_BUFSIZE = 65536


@dataclass
class FlowRecord:
    """One relayed connection; outlives the plan that admitted it."""

    flow_id: int
    hop_address: HopAddress
    established_at: float
    bytes_in: int = 0  # external peer -> internal service
    bytes_out: int = 0  # internal service -> external peer
    closed: bool = False
    close_reason: str | None = None


class ListenerFactory:
    """Maps a hop address to a bound, listening TCP socket."""

    def create(self, address: HopAddress, port: int) -> socket.socket:
        raise NotImplementedError

    def release(self, address: HopAddress) -> None:
        """Called once the address has no listener and no live flows left."""


class HopListenerFactory(ListenerFactory):
    """Binds the hop address itself; the /64 must be locally deliverable.

    Deployment routes the hopping prefix to the host (e.g. a local AnyIP
    route); without that, binding a fresh hop address fails.
    """

    def create(self, address: HopAddress, port: int) -> socket.socket:
        sock = socket.socket(socket.AF_INET6, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.setsockopt(socket.IPPROTO_IPV6, socket.IPV6_V6ONLY, 1)
        try:
            sock.bind((address.text, port))
            sock.listen(64)
        except OSError:
            sock.close()
            raise
        return sock


class LoopbackListenerFactory(ListenerFactory):
    """Test factory: one ephemeral ::1 port per hop address.

    Keeps an address->port registry so a test harness can aim a client at
    "the minute-m address"; admission semantics (closed listener means
    connection refused) are the same as with real hop addresses.
    """

    def __init__(self, host: str = "::1"):
        self.host = host
        self.ports: dict[HopAddress, int] = {}
        self.port_history: dict[HopAddress, int] = {}

    def create(self, address: HopAddress, port: int) -> socket.socket:
        sock = socket.socket(socket.AF_INET6, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self.host, 0))
        sock.listen(64)
        bound = sock.getsockname()[1]
        self.ports[address] = bound
        self.port_history[address] = bound
        return sock

    def release(self, address: HopAddress) -> None:
        self.ports.pop(address, None)

    def endpoint(self, address: HopAddress) -> tuple[str, int]:
        """Where a test client connects to reach this hop address (live or stale)."""
        return self.host, self.port_history[address]


@dataclass
class _AddressState:
    listener: socket.socket | None
    thread: threading.Thread | None
    live_flows: int = 0


class ProxyBackend:
    """Applies admission actions and relays admitted flows to the service."""

    def __init__(self, config: ServerConfig, factory: ListenerFactory | None = None):
        self.config = config
        self.factory = factory or HopListenerFactory()
        self._lock = threading.Lock()
        self._addresses: dict[HopAddress, _AddressState] = {}
        self._flows: dict[int, FlowRecord] = {}
        self._flow_ids = itertools.count(1)
        self._flow_sockets: dict[int, tuple[socket.socket, socket.socket]] = {}
        self._handlers: list[threading.Thread] = []
        self._stopping = False
        self.drop_default_applied = False

    # -- state inspection ----------------------------------------------------

    def admitted_addresses(self) -> frozenset[HopAddress]:
        with self._lock:
            return frozenset(
                addr for addr, st in self._addresses.items() if st.listener is not None
            )

    def retained_addresses(self) -> frozenset[HopAddress]:
        """Addresses kept alive only because flows still ride on them."""
        with self._lock:
            return frozenset(
                addr for addr, st in self._addresses.items() if st.listener is None
            )

    def flows(self) -> list[FlowRecord]:
        with self._lock:
            return list(self._flows.values())

    # -- action application ---------------------------------------------------

    def apply(self, actions) -> None:
        """Apply one batch atomically with respect to admission checks."""
        with self._lock:
            for action in actions:
                if isinstance(action, AddListener):
                    self._add_listener(action.address, action.port)
                elif isinstance(action, RemoveListener):
                    self._remove_listener(action.address)
                elif isinstance(action, EnsureDropDefault):
                    # Unbound addresses already refuse connections; nothing to
                    # install, but record the baseline for invariant checks.
                    self.drop_default_applied = True
                elif isinstance(action, (InstallDnat, RemoveDnat)):
                    raise ValueError("NAT actions belong to the netfilter backend")
                else:
                    raise ValueError(f"unknown action: {action!r}")
            self._sweep_locked()

    def _add_listener(self, address: HopAddress, port: int) -> None:
        state = self._addresses.get(address)
        if state is not None and state.listener is not None:
            return  # idempotent replay
        sock = self.factory.create(address, port)
        thread = threading.Thread(
            target=self._accept_loop, args=(sock, address), daemon=True
        )
        if state is None:
            state = _AddressState(listener=sock, thread=thread)
            self._addresses[address] = state
        else:
            state.listener = sock
            state.thread = thread
        thread.start()
        log.info("event=listener_open address=%s port=%d", address, port)

    def _remove_listener(self, address: HopAddress) -> None:
        state = self._addresses.get(address)
        if state is None or state.listener is None:
            return  # idempotent replay
        _close_now(state.listener)
        state.listener = None
        state.thread = None
        log.info(
            "event=listener_close address=%s live_flows=%d", address, state.live_flows
        )

    def collect_drained(self) -> None:
        with self._lock:
            self._sweep_locked()

    def _sweep_locked(self) -> None:
        for address in [
            a
            for a, st in self._addresses.items()
            if st.listener is None and st.live_flows == 0
        ]:
            del self._addresses[address]
            self.factory.release(address)
            log.info("event=address_released address=%s", address)
        # closed records were already logged with their counters; drop them
        for flow_id in [fid for fid, f in self._flows.items() if f.closed]:
            del self._flows[flow_id]

    # -- flow handling ---------------------------------------------------------

    def _accept_loop(self, listener: socket.socket, address: HopAddress) -> None:
        while True:
            try:
                client, peer = listener.accept()
            except OSError:
                return  # listener closed by rotation or shutdown
            handler = threading.Thread(
                target=self._handle_flow, args=(client, peer, address), daemon=True
            )
            with self._lock:
                if self._stopping:
                    client.close()
                    return
                self._handlers.append(handler)
            handler.start()

    def _handle_flow(self, client: socket.socket, peer, address: HopAddress) -> None:
        try:
            upstream = socket.create_connection(
                (self.config.internal_address, self.config.service_port), timeout=10
            )
        except OSError as exc:
            log.warning(
                "event=internal_connect_failed address=%s error=%r", address, exc
            )
            client.close()
            return

        flow = FlowRecord(
            flow_id=next(self._flow_ids),
            hop_address=address,
            established_at=time.time(),
        )
        with self._lock:
            self._flows[flow.flow_id] = flow
            self._flow_sockets[flow.flow_id] = (client, upstream)
            state = self._addresses.get(address)
            if state is not None:
                state.live_flows += 1
        log.info(
            "event=flow_open flow=%d address=%s peer=%s", flow.flow_id, address, peer
        )

        inbound = threading.Thread(
            target=_pump, args=(client, upstream, flow, "bytes_in"), daemon=True
        )
        outbound = threading.Thread(
            target=_pump, args=(upstream, client, flow, "bytes_out"), daemon=True
        )
        inbound.start()
        outbound.start()
        inbound.join()
        outbound.join()

        for sock in (client, upstream):
            try:
                sock.close()
            except OSError:
                pass
        with self._lock:
            flow.closed = True
            flow.close_reason = flow.close_reason or "peer_close"
            self._flow_sockets.pop(flow.flow_id, None)
            state = self._addresses.get(address)
            if state is not None:
                state.live_flows -= 1
        log.info(
            "event=flow_close flow=%d address=%s bytes_in=%d bytes_out=%d reason=%s",
            flow.flow_id,
            address,
            flow.bytes_in,
            flow.bytes_out,
            flow.close_reason,
        )

    # -- lifecycle ---------------------------------------------------------------

    def shutdown(self, drain_timeout: float = 5.0) -> None:
        """Close all listeners, then drain relay handlers."""
        with self._lock:
            self._stopping = True
            for state in self._addresses.values():
                if state.listener is not None:
                    _close_now(state.listener)
                    state.listener = None
            for flow_id, (client, upstream) in list(self._flow_sockets.items()):
                record = self._flows.get(flow_id)
                if record is not None:
                    record.close_reason = "daemon_shutdown"
                for sock in (client, upstream):
                    _close_now(sock)
            handlers = list(self._handlers)
        deadline = time.time() + drain_timeout
        for handler in handlers:
            handler.join(timeout=max(0.0, deadline - time.time()))
        with self._lock:
            self._addresses.clear()


def _close_now(sock: socket.socket) -> None:
    """Shut down before closing: close() alone neither wakes threads blocked
    in accept()/recv() nor stops the kernel finishing handshakes meanwhile."""
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    try:
        sock.close()
    except OSError:
        pass


def _pump(src: socket.socket, dst: socket.socket, flow: FlowRecord, counter: str) -> None:
    """One relay direction; flushes and half-closes the far side on EOF."""
    try:
        while True:
            data = src.recv(RELAY_BUFSIZE)
            if not data:
                break
            dst.sendall(data)
            setattr(flow, counter, getattr(flow, counter) + len(data))
    except OSError:
        flow.close_reason = flow.close_reason or "relay_error"
    finally:
        try:
            dst.shutdown(socket.SHUT_WR)
        except OSError:
            pass
