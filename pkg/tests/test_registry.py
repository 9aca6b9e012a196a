"""Prompt registry: file store, payload format, wire protocol."""

import threading

import numpy as np
import pytest

from clapopt import registry
from clapopt.registry import (NotFoundError, PromptStore, RegistryClient,
                              RegistryRecord, payload_to_record,
                              record_to_payload, serve)
from clapopt.train import HardSceneDirection


def make_record(rng, rid="rb00", m=3, n=2, d=8, direction=False):
    if direction:
        q, _ = np.linalg.qr(rng.normal(size=(d, 2)))
        dstar = HardSceneDirection(q.T, np.sort(np.abs(rng.normal(size=2)))[::-1])
    rec = RegistryRecord(
        roadblock_id=rid,
        prompt_a=rng.normal(size=(m, d)),
        prompt_b=rng.normal(size=(n, d)),
        extract_layer=1,
        d_model=d,
        backbone_checksum="ab12cd",
        direction=dstar if direction else None,
        condition_tags=("rain",) if direction else (),
    )
    return rec


def test_payload_round_trip_bit_exact():
    rng = np.random.default_rng(100)
    rec = make_record(rng)
    payload = record_to_payload(rec)
    back = payload_to_record(payload)
    assert record_to_payload(back) == payload
    np.testing.assert_array_equal(back.prompt_a, rec.prompt_a)
    np.testing.assert_array_equal(back.prompt_b, rec.prompt_b)
    assert back.roadblock_id == rec.roadblock_id
    assert back.backbone_checksum == rec.backbone_checksum


def test_store_put_get(tmp_path):
    rng = np.random.default_rng(101)
    store = PromptStore(str(tmp_path))
    rec = make_record(rng)
    assert store.put(rec) == 1
    got = store.get("rb00")
    assert got.version == 1
    np.testing.assert_array_equal(got.prompt_a, rec.prompt_a)
    np.testing.assert_array_equal(got.prompt_b, rec.prompt_b)


def test_versions_increment_and_are_addressable(tmp_path):
    rng = np.random.default_rng(102)
    store = PromptStore(str(tmp_path))
    first = make_record(rng)
    second = make_record(rng)
    assert store.put(first) == 1
    assert store.put(second) == 2
    # latest wins by default, old versions stay readable
    np.testing.assert_array_equal(store.get("rb00").prompt_a, second.prompt_a)
    np.testing.assert_array_equal(store.get("rb00", version=1).prompt_a,
                                  first.prompt_a)


def test_meta_sidecar_round_trip(tmp_path):
    """Direction matrix, singular values, and tags survive storage."""
    rng = np.random.default_rng(103)
    store = PromptStore(str(tmp_path))
    rec = make_record(rng, direction=True)
    store.put(rec)
    got = store.get("rb00")
    np.testing.assert_array_equal(got.direction.directions, rec.direction.directions)
    np.testing.assert_array_equal(got.direction.singular_values,
                                  rec.direction.singular_values)
    assert got.condition_tags == ("rain",)
    assert got.created_at is not None


def test_store_verbatim_payload_bytes(tmp_path):
    """Payloads are stored as given, not re-serialized."""
    rng = np.random.default_rng(104)
    store = PromptStore(str(tmp_path))
    payload = record_to_payload(make_record(rng))
    # rewrite one value in non-canonical notation; still parses to the
    # same float but would not survive a parse/re-serialize cycle
    lines = payload.decode("ascii").splitlines()
    lines[7] = "5e-1"
    odd = ("\n".join(lines) + "\n").encode("ascii")
    store.put_payload("rb00", odd)
    got, version = store.get_payload("rb00")
    assert version == 1
    assert got == odd


def test_missing_id_and_version_raise(tmp_path):
    store = PromptStore(str(tmp_path))
    with pytest.raises(NotFoundError):
        store.get("nope")
    rng = np.random.default_rng(105)
    store.put(make_record(rng))
    with pytest.raises(NotFoundError):
        store.get("rb00", version=7)


def test_bad_roadblock_id_rejected(tmp_path):
    rng = np.random.default_rng(106)
    with pytest.raises(ValueError):
        make_record(rng, rid="../escape")
    store = PromptStore(str(tmp_path))
    with pytest.raises(ValueError):
        store.get_payload("a/b")


def test_payload_validation():
    rng = np.random.default_rng(107)
    payload = record_to_payload(make_record(rng))
    with pytest.raises(ValueError):
        payload_to_record(b"not-a-header\n" + payload)
    truncated = b"\n".join(payload.splitlines()[:-3]) + b"\n"
    with pytest.raises(ValueError):
        payload_to_record(truncated)


def test_record_validation():
    rng = np.random.default_rng(108)
    with pytest.raises(ValueError):
        RegistryRecord("rb", rng.normal(size=(2, 4)), rng.normal(size=(2, 5)),
                       1, 4, "abc")
    with pytest.raises(ValueError):
        RegistryRecord("rb", rng.normal(size=(2, 4)), rng.normal(size=(2, 4)),
                       1, 4, "NOT HEX")


def test_wire_get_put_round_trip(tmp_path):
    rng = np.random.default_rng(109)
    store = PromptStore(str(tmp_path))
    server = serve(store, port=0)
    host, port = server.endpoint
    try:
        payload = record_to_payload(make_record(rng))
        with RegistryClient(host, port) as client:
            assert client.put(payload) == 1
            assert client.get_payload("rb00") == payload
            assert client.get_payload("rb00", version=1) == payload
            rec = client.get("rb00")
            assert rec.roadblock_id == "rb00"
    finally:
        server.shutdown()
        server.server_close()


def test_wire_not_found_and_bad_request(tmp_path):
    store = PromptStore(str(tmp_path))
    server = serve(store, port=0)
    host, port = server.endpoint
    try:
        with RegistryClient(host, port) as client:
            with pytest.raises(NotFoundError):
                client.get_payload("ghost")
            # malformed verb on the same connection; server answers and
            # keeps serving
            client.sock.sendall(b"FROB x\n")
            assert client.rfile.readline() == b"ERR BAD_REQUEST\n"
            with pytest.raises(NotFoundError):
                client.get_payload("ghost")
    finally:
        server.shutdown()
        server.server_close()


def test_wire_put_assigns_monotonic_versions(tmp_path):
    rng = np.random.default_rng(110)
    store = PromptStore(str(tmp_path))
    server = serve(store, port=0)
    host, port = server.endpoint
    try:
        with RegistryClient(host, port) as client:
            versions = [client.put(make_record(rng)) for _ in range(4)]
        assert versions == [1, 2, 3, 4]
    finally:
        server.shutdown()
        server.server_close()


def test_concurrent_writers_no_torn_reads(tmp_path):
    """Parallel PUTs against one id; every GET sees a complete payload."""
    rng = np.random.default_rng(111)
    store = PromptStore(str(tmp_path))
    server = serve(store, port=0)
    host, port = server.endpoint
    payloads = [record_to_payload(make_record(rng)) for _ in range(6)]
    store.put_payload("rb00", payloads[0])
    errors = []

    def writer(payload):
        try:
            with RegistryClient(host, port) as client:
                client.put(payload)
        except Exception as exc:  # pragma: no cover - failure path
            errors.append(exc)

    def reader():
        try:
            with RegistryClient(host, port) as client:
                for _ in range(20):
                    got = client.get_payload("rb00")
                    assert got in payloads
        except Exception as exc:  # pragma: no cover - failure path
            errors.append(exc)

    threads = [threading.Thread(target=writer, args=(p,)) for p in payloads[1:]]
    threads += [threading.Thread(target=reader) for _ in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    server.shutdown()
    server.server_close()
    assert not errors
    assert store._latest_version("rb00") == 6
    versions = {store.get_payload("rb00", v)[0] for v in range(1, 7)}
    assert versions == set(payloads)


def test_ids_listing(tmp_path):
    rng = np.random.default_rng(112)
    store = PromptStore(str(tmp_path))
    store.put(make_record(rng, rid="zeta"))
    store.put(make_record(rng, rid="alpha"))
    assert store.ids() == ["alpha", "zeta"]


def test_schema_header_present():
    assert registry.PROMPT_SCHEMA.startswith("clap-prompt")
