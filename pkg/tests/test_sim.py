import random

import pytest

from chhoyhopper.core import Salt, SharedSecret
from chhoyhopper.server import ServerConfig, compute_slot_plan
from chhoyhopper.sim import (
    SimClock,
    SimNetwork,
    SimServer,
    main,
    sim_client_connect,
    skew_sweep_report,
)

from oracles import ADDR_K_S, PREFIX_KS

SECRET = SharedSecret(b"k")
SALT = Salt(b"s")


def make_server(network, name="svc"):
    config = ServerConfig(
        service=PREFIX_KS,
        internal_address="::1",
        service_port=22,
        secret=SECRET,
        salt=SALT,
    )
    return SimServer(name, config, network), config


class TestSimClock:
    def test_advances(self):
        clock = SimClock(10)
        clock.advance(5)
        assert clock.now() == 15

    def test_rejects_backwards(self):
        with pytest.raises(ValueError):
            SimClock(10).advance(-1)


class TestSimServerTick:
    def test_rotation_swaps_one_address(self):
        network = SimNetwork()
        server, _ = make_server(network)
        clock = SimClock(70)
        server.tick(clock)
        assert {a.text for a in network.registry} == {ADDR_K_S[1], ADDR_K_S[0]}
        clock.advance(20)
        server.tick(clock)
        assert {a.text for a in network.registry} == {ADDR_K_S[1], ADDR_K_S[2]}

    def test_tick_idempotent_at_same_instant(self):
        network = SimNetwork()
        server, _ = make_server(network)
        clock = SimClock(70)
        server.tick(clock)
        snapshot = dict(network.registry)
        server.tick(clock)
        assert network.registry == snapshot

    def test_shutdown_clears_registry(self):
        network = SimNetwork()
        server, _ = make_server(network)
        clock = SimClock(70)
        server.tick(clock)
        server.shutdown()
        server.tick(clock)
        assert network.registry == {}

    def test_two_servers_do_not_disturb_each_other(self):
        network = SimNetwork()
        server_a, _ = make_server(network, "a")
        config_b = ServerConfig(
            service=PREFIX_KS,
            internal_address="::1",
            service_port=22,
            secret=SharedSecret(b"other"),
            salt=SALT,
        )
        server_b = SimServer("b", config_b, network)
        clock = SimClock(70)
        server_a.tick(clock)
        server_b.tick(clock)
        assert len(network.registry) == 4
        server_b.shutdown()
        server_b.tick(clock)
        assert len(network.addresses_of("a")) == 2
        assert len(network.addresses_of("b")) == 0

    def test_exactly_two_registered_at_every_instant(self):
        network = SimNetwork()
        server, _ = make_server(network)
        clock = SimClock(0)
        for _ in range(600):
            server.tick(clock)
            assert len(network.registry) == 2
            clock.advance(1)


class TestSimClientConnect:
    def test_zero_skew_accepted(self):
        network = SimNetwork()
        server, _ = make_server(network)
        clock = SimClock(3600)
        server.tick(clock)
        assert sim_client_connect(network, clock, SECRET, SALT, PREFIX_KS)

    def test_thirty_second_skew_always_accepted(self):
        network = SimNetwork()
        server, _ = make_server(network)
        clock = SimClock(3600)
        for _ in range(600):
            server.tick(clock)
            for skew in (-30, 30):
                assert sim_client_connect(
                    network, clock, SECRET, SALT, PREFIX_KS, skew_seconds=skew
                ), (clock.now(), skew)
            clock.advance(1)

    def test_two_minute_skew_always_refused(self):
        network = SimNetwork()
        server, _ = make_server(network)
        clock = SimClock(3600)
        for _ in range(600):
            server.tick(clock)
            assert not sim_client_connect(
                network, clock, SECRET, SALT, PREFIX_KS, skew_seconds=-120
            )
            clock.advance(1)

    def test_wrong_secret_refused(self):
        network = SimNetwork()
        server, _ = make_server(network)
        clock = SimClock(3600)
        server.tick(clock)
        rng = random.Random(7)
        for _ in range(200):
            wrong = SharedSecret(rng.randbytes(16))
            assert not sim_client_connect(network, clock, wrong, SALT, PREFIX_KS)

    def test_wrong_salt_refused(self):
        network = SimNetwork()
        server, _ = make_server(network)
        clock = SimClock(3600)
        server.tick(clock)
        assert not sim_client_connect(network, clock, SECRET, Salt(b"wrong"), PREFIX_KS)

    def test_attempts_are_logged(self):
        network = SimNetwork()
        server, _ = make_server(network)
        clock = SimClock(3600)
        server.tick(clock)
        sim_client_connect(network, clock, SECRET, SALT, PREFIX_KS, source="alice")
        assert network.log[-1].source == "alice"
        assert network.log[-1].outcome == "accepted"


class TestSkewSweep:
    def test_guarantee_boundaries(self):
        report = dict(
            skew_sweep_report(
                SECRET, SALT, PREFIX_KS, [-90, -60, -30, 0, 30, 60, 90],
                window_start=3600, window_seconds=600,
            )
        )
        assert report[0] == 1.0
        assert report[30] == 1.0 and report[-30] == 1.0
        assert report[90] == 0.0 and report[-90] == 0.0
        assert 0.0 < report[60] < 1.0 and 0.0 < report[-60] < 1.0

    def test_window_must_cover_two_minutes(self):
        with pytest.raises(ValueError):
            skew_sweep_report(SECRET, SALT, PREFIX_KS, [0], window_seconds=60)

    def test_window_start_guards_negative_epochs(self):
        with pytest.raises(ValueError):
            skew_sweep_report(
                SECRET, SALT, PREFIX_KS, [-120], window_start=60, window_seconds=600
            )


class TestCli:
    def test_sweep_csv(self, capsys):
        status = main(
            ["sweep", "--skew-min", "-2", "--skew-max", "2", "--window", "120"]
        )
        assert status == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "skew_seconds,acceptance_fraction"
        assert lines[1:] == [
            "-2,1.000000",
            "-1,1.000000",
            "0,1.000000",
            "1,1.000000",
            "2,1.000000",
        ]
