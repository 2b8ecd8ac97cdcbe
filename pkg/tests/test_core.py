import ipaddress

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chhoyhopper.core import (
    ActiveMinutes,
    HopAddress,
    NoAaaaRecord,
    Salt,
    ServicePrefix,
    SharedSecret,
    StaticResolver,
    active_minutes,
    current_address,
    derive_suffix,
    hop_address,
    minute_index,
    read_key_file,
    resolve_prefix,
    service_prefix,
)

from oracles import (
    ADDR_K_S,
    ADDR_TS_PEPPER,
    SUFFIX_K_EMPTY_0,
    SUFFIX_K_S,
    SUFFIX_TS_PEPPER,
    reference_active_minutes,
    reference_suffix,
)


class TestMinuteIndex:
    def test_epoch_zero(self):
        assert minute_index(0) == 0

    def test_floor_division(self):
        assert minute_index(119) == 1

    def test_exact_division(self):
        assert minute_index(1_620_000_000) == 27_000_000

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            minute_index(-1)


class TestActiveMinutes:
    def test_first_half_prefers_previous(self):
        assert active_minutes(70) == ActiveMinutes(current=1, adjacent=0)

    def test_second_half_prefers_next(self):
        assert active_minutes(90) == ActiveMinutes(current=1, adjacent=2)

    def test_epoch_edge_clamps_to_one(self):
        assert active_minutes(5) == ActiveMinutes(current=0, adjacent=1)

    def test_matches_reference_rule_exhaustively(self):
        for t in range(0, 121):
            got = active_minutes(t)
            assert got.as_set() == reference_active_minutes(t), f"t={t}"

    def test_pair_always_distinct_and_adjacent(self):
        for t in range(0, 600):
            current, adjacent = active_minutes(t)
            assert current != adjacent
            assert abs(current - adjacent) == 1

    def test_thirty_second_shift_always_overlaps(self):
        # a client up to 30 s off still lands inside the server's pair
        for t in range(30, 630):
            here = active_minutes(t).as_set()
            assert here & active_minutes(t - 30).as_set()
            assert here & active_minutes(t + 30).as_set()


class TestDeriveSuffix:
    def test_deterministic(self, ks_secret, s_salt):
        assert derive_suffix(ks_secret, s_salt, 0) == derive_suffix(ks_secret, s_salt, 0)

    def test_frozen_oracle_value(self, ts_secret, pepper):
        assert derive_suffix(ts_secret, pepper, 27_000_000) == SUFFIX_TS_PEPPER[27_000_000]

    def test_adjacent_minutes_differ(self, ks_secret, s_salt):
        assert derive_suffix(ks_secret, s_salt, 0) == SUFFIX_K_S[0]
        assert derive_suffix(ks_secret, s_salt, 1) == SUFFIX_K_S[1]

    def test_empty_salt(self, ks_secret):
        assert derive_suffix(ks_secret, Salt(b""), 0) == SUFFIX_K_EMPTY_0

    def test_secret_salt_boundary_not_ambiguous(self):
        # NUL framing: ("ab","c") and ("a","bc") must hash differently
        left = derive_suffix(SharedSecret(b"ab"), Salt(b"c"), 7)
        right = derive_suffix(SharedSecret(b"a"), Salt(b"bc"), 7)
        assert left != right

    @given(
        secret=st.binary(min_size=1, max_size=64),
        salt=st.binary(min_size=0, max_size=64),
        minute=st.integers(min_value=0, max_value=2**40),
    )
    @settings(max_examples=300)
    def test_matches_independent_digest(self, secret, salt, minute):
        got = derive_suffix(SharedSecret(secret), Salt(salt), minute)
        assert got == reference_suffix(secret, salt, minute)


class TestSecretAndSaltInvariants:
    def test_empty_secret_rejected(self):
        with pytest.raises(ValueError):
            SharedSecret(b"")

    def test_oversized_secret_rejected(self):
        with pytest.raises(ValueError):
            SharedSecret(b"x" * 1025)

    def test_oversized_salt_rejected(self):
        with pytest.raises(ValueError):
            Salt(b"x" * 1025)

    def test_secret_is_opaque_octets(self):
        # no text normalization: NFC vs NFD forms are distinct secrets
        a = SharedSecret("é".encode("utf-8"))
        b = SharedSecret(b"e\xcc\x81")
        assert derive_suffix(a, Salt(), 0) != derive_suffix(b, Salt(), 0)


class TestHopAddress:
    def test_zero_suffix(self):
        prefix = ServicePrefix.from_address("2001:db8::")
        assert hop_address(prefix, 0).text == "2001:db8::"

    def test_all_ones_suffix(self):
        prefix = ServicePrefix.from_address("2001:db8::")
        addr = hop_address(prefix, 0xFFFF_FFFF_FFFF_FFFF)
        assert addr.text == "2001:db8::ffff:ffff:ffff:ffff"

    def test_source_low_bits_discarded(self):
        prefix = ServicePrefix.from_address("2001:db8::1234:0:0:1")
        assert hop_address(prefix, 1).text == "2001:db8::1"

    def test_suffix_must_fit(self):
        prefix = ServicePrefix.from_address("2001:db8::")
        with pytest.raises(ValueError):
            hop_address(prefix, 1 << 64)

    @given(high=st.integers(0, 2**64 - 1), suffix=st.integers(0, 2**64 - 1))
    @settings(max_examples=200)
    def test_prefix_preserved_suffix_exact(self, high, suffix):
        addr = hop_address(ServicePrefix(high, "x"), suffix)
        assert addr.prefix_high64 == high
        assert addr.suffix == suffix

    def test_canonical_lowercase_compressed(self):
        addr = HopAddress(int(ipaddress.IPv6Address("2001:DB8:0:0:0:0:0:A")))
        assert addr.text == "2001:db8::a"


class TestResolvePrefix:
    def test_static_map_drops_low_bits(self, svc_resolver):
        prefix = resolve_prefix("svc.example", svc_resolver)
        assert prefix.high64 == 0x2001_0DB8_0001_0002
        assert prefix.source_name == "svc.example"

    def test_unknown_name(self, svc_resolver):
        with pytest.raises(NoAaaaRecord):
            resolve_prefix("nope.example", svc_resolver)

    def test_first_of_multiple_records_wins(self):
        resolver = StaticResolver(
            {"multi.example": ["2001:db8:aa::1", "2001:db8:bb::1"]}
        )
        assert resolve_prefix("multi.example", resolver).high64 == 0x2001_0DB8_00AA_0000

    def test_prefix_literal_with_mask(self):
        assert service_prefix("2001:db8:1:2::/64").high64 == 0x2001_0DB8_0001_0002

    def test_non_64_mask_rejected(self):
        with pytest.raises(ValueError):
            service_prefix("2001:db8::/48")


class TestSystemResolver:
    def test_parses_and_dedupes_getaddrinfo(self, monkeypatch):
        import socket

        from chhoyhopper.core import SystemResolver

        def fake_getaddrinfo(name, port, family, type):
            entry = (family, type, 6, "", ("2001:db8:aa::1", 0, 0, 0))
            dupe = (family, type, 6, "", ("2001:db8:aa::1", 0, 0, 0))
            other = (family, type, 6, "", ("2001:db8:bb::1", 0, 0, 0))
            return [entry, dupe, other]

        monkeypatch.setattr(socket, "getaddrinfo", fake_getaddrinfo)
        assert SystemResolver().resolve_aaaa("svc.example") == [
            "2001:db8:aa::1",
            "2001:db8:bb::1",
        ]

    def test_nonexistent_name_raises_no_record(self):
        from chhoyhopper.core import SystemResolver

        # .invalid is reserved: the stub resolver answers NXDOMAIN locally
        with pytest.raises(NoAaaaRecord):
            SystemResolver().resolve_aaaa("no-such-host.invalid")


class TestCurrentAddress:
    def test_composed_oracle(self, ts_secret, pepper, svc_resolver):
        addr = current_address(
            ts_secret, pepper, "svc.example", 1_620_000_000, svc_resolver
        )
        assert addr.text == ADDR_TS_PEPPER[27_000_000]

    def test_constant_within_a_minute(self, ks_secret, s_salt):
        base = current_address(ks_secret, s_salt, "2001:db8::/64", 0)
        assert current_address(ks_secret, s_salt, "2001:db8::/64", 59) == base

    def test_changes_at_minute_boundary(self, ks_secret, s_salt):
        at59 = current_address(ks_secret, s_salt, "2001:db8::/64", 59)
        at60 = current_address(ks_secret, s_salt, "2001:db8::/64", 60)
        assert at59.text == ADDR_K_S[0]
        assert at60.text == ADDR_K_S[1]

    def test_quantized_over_known_minutes(self, ks_secret, s_salt):
        for minute, text in ADDR_K_S.items():
            for offset in (0, 30, 59):
                addr = current_address(
                    ks_secret, s_salt, "2001:db8::/64", 60 * minute + offset
                )
                assert addr.text == text


class TestKeyFile:
    def test_verbatim(self, tmp_path):
        path = tmp_path / "key"
        path.write_bytes(b"raw-secret")
        assert read_key_file(path).data == b"raw-secret"

    def test_single_trailing_newline_stripped(self, tmp_path):
        path = tmp_path / "key"
        path.write_bytes(b"raw-secret\n")
        assert read_key_file(path).data == b"raw-secret"

    def test_crlf_terminator_stripped(self, tmp_path):
        path = tmp_path / "key"
        path.write_bytes(b"raw-secret\r\n")
        assert read_key_file(path).data == b"raw-secret"

    def test_only_one_newline_stripped(self, tmp_path):
        path = tmp_path / "key"
        path.write_bytes(b"raw-secret\n\n")
        assert read_key_file(path).data == b"raw-secret\n"

    def test_interior_bytes_significant(self, tmp_path):
        path = tmp_path / "key"
        path.write_bytes(b"\x00bin\nary\r\n")
        assert read_key_file(path).data == b"\x00bin\nary"

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "key"
        path.write_bytes(b"\n")
        with pytest.raises(ValueError):
            read_key_file(path)
