import socket

import numpy as np
import pytest
from hypothesis import given, strategies as st

from remotemem.errors import TransportError
from remotemem.externram import (
    LocalBackend, MemcachedBackend, MockBackend, MockLatencyConfig, open_backend,
    parse_backend_spec,
)
from remotemem.externram.fakeserver import FakeMemcached
from remotemem.externram.memcached import decode_key, encode_key
from remotemem.page import PAGE_SIZE, PageBuffer, PageKey


def page(v):
    return PageBuffer(bytes([v % 256]) * PAGE_SIZE)


K1, K2, K3 = PageKey(7, 0x2000), PageKey(7, 0x3000), PageKey(8, 0)


@pytest.fixture(scope="module")
def memcached_server():
    with FakeMemcached() as srv:
        yield srv


@pytest.fixture(params=["local", "mock", "memcached"])
def backend(request):
    if request.param == "local":
        b = LocalBackend()
    elif request.param == "mock":
        b = MockBackend(MockLatencyConfig(0, 0))
    else:
        srv = request.getfixturevalue("memcached_server")
        b = MemcachedBackend(*srv.address)
        for k in (K1, K2, K3):
            b.remove(k)
        b.reset_counts()
    yield b
    b.close()


def test_round_trip_and_overwrite(backend):
    backend.write(K1, page(1))
    assert backend.read(K1) == page(1)
    backend.write(K1, page(2))
    assert backend.read(K1) == page(2)


def test_absent_and_remove(backend):
    assert backend.read(K3) is None
    backend.write(K3, page(3))
    backend.remove(K3)
    assert backend.read(K3) is None
    backend.remove(K3)  # idempotent
    backend.write(K3, page(4))
    assert backend.read(K3) == page(4)


def test_multi_write_and_read(backend):
    backend.multi_write([(K1, page(1)), (K2, page(2)), (K3, page(3))])
    assert [backend.read(k) for k in (K1, K2, K3)] == [page(1), page(2), page(3)]
    backend.multi_write([(K1, page(5)), (K1, page(6))])
    assert backend.read(K1) == page(6)
    backend.remove(K2)
    assert backend.multi_read([K1, K2, K1]) == [page(6), None, page(6)]


def test_multi_read_64_equals_singles(backend):
    keys = [PageKey(9, i * PAGE_SIZE) for i in range(64)]
    backend.multi_write([(k, page(i)) for i, k in enumerate(keys) if i % 3])
    assert backend.multi_read(keys) == [backend.read(k) for k in keys]
    for k in keys:
        backend.remove(k)


def test_empty_batches_rejected(backend):
    with pytest.raises(ValueError):
        backend.multi_write([])
    with pytest.raises(ValueError):
        backend.multi_read([])


def test_call_counts(backend):
    backend.multi_write([(K1, page(1)), (K2, page(2))])
    backend.read(K1)
    assert backend.calls["multi_write"] == 1
    assert backend.calls["multi_write_items"] == 2
    assert backend.calls["read"] == 1
    assert backend.calls["write"] == 0


ops = st.lists(st.one_of(
    st.tuples(st.just("w"), st.integers(0, 5), st.integers(0, 255)),
    st.tuples(st.just("r"), st.integers(0, 5)),
    st.tuples(st.just("d"), st.integers(0, 5)),
    st.tuples(st.just("mw"), st.lists(st.tuples(st.integers(0, 5), st.integers(0, 255)), min_size=1, max_size=6)),
    st.tuples(st.just("mr"), st.lists(st.integers(0, 5), min_size=1, max_size=6)),
), max_size=40)


def _check_sequential_equivalence(b, seq):
    keys = [PageKey(11, i * PAGE_SIZE) for i in range(6)]
    for k in keys:
        b.remove(k)
    model = {}
    for op in seq:
        if op[0] == "w":
            b.write(keys[op[1]], page(op[2]))
            model[op[1]] = page(op[2])
        elif op[0] == "r":
            assert b.read(keys[op[1]]) == model.get(op[1])
        elif op[0] == "d":
            b.remove(keys[op[1]])
            model.pop(op[1], None)
        elif op[0] == "mw":
            b.multi_write([(keys[i], page(v)) for i, v in op[1]])
            for i, v in op[1]:
                model[i] = page(v)
        else:
            assert b.multi_read([keys[i] for i in op[1]]) == [model.get(i) for i in op[1]]
    assert b.multi_read(keys) == [model.get(i) for i in range(6)]


@given(ops)
def test_sequential_equivalence_local(seq):
    _check_sequential_equivalence(LocalBackend(), seq)


@given(ops)
def test_sequential_equivalence_mock(seq):
    _check_sequential_equivalence(MockBackend(MockLatencyConfig(0, 0)), seq)


@given(ops)
def test_sequential_equivalence_memcached(memcached_server, seq):
    with MemcachedBackend(*memcached_server.address) as b:
        _check_sequential_equivalence(b, seq)


def test_mock_batch_accounting():
    cfg = MockLatencyConfig(30, 2)
    assert cfg.cost_us(5) == 38
    b = MockBackend(cfg)
    b.multi_write([(PageKey(1, i * PAGE_SIZE), page(i)) for i in range(5)])
    assert b.charged_us == 38
    b2 = MockBackend(cfg)
    for i in range(5):
        b2.write(PageKey(1, i * PAGE_SIZE), page(i))
    assert b2.charged_us == 150


@given(st.integers(1, 200), st.integers(1, 64))
def test_mock_cost_formula(base, n):
    marginal = base // 4
    cfg = MockLatencyConfig(base, marginal)
    assert cfg.cost_us(n) == base + (n - 1) * marginal
    assert cfg.cost_us(n) <= n * base


def test_mock_rejects_marginal_above_base():
    with pytest.raises(ValueError):
        MockLatencyConfig(10, 10)


def test_mock_injected_failure():
    b = MockBackend(MockLatencyConfig(0, 0))
    b.fail_next(1)
    with pytest.raises(TransportError):
        b.write(K1, page(1))
    assert b.read(K1) is None
    b.write(K1, page(1))
    assert b.read(K1) == page(1)


def test_memcached_key_encoding():
    assert encode_key(PageKey(7, 0x2000)) == "7:2000"
    assert decode_key("ff:1000") == PageKey(255, 0x1000)


def test_memcached_refused_port_is_transport_error():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    b = MemcachedBackend("127.0.0.1", port, retries=1, timeout=0.5)
    with pytest.raises(TransportError):
        b.write(K1, page(1))
    with pytest.raises(TransportError):
        b.multi_write([(K1, page(1))])


def test_memcached_batch_retries_the_unacknowledged_suffix(memcached_server):
    with MemcachedBackend(*memcached_server.address) as b:
        batch = [(PageKey(12, i * PAGE_SIZE), page(i)) for i in range(10)]
        memcached_server.drop_connection_after(4)
        b.multi_write(batch)
        assert memcached_server._server.drop_after is None  # the drop did happen
        assert b.multi_read([k for k, _ in batch]) == [v for _, v in batch]
        for k, _ in batch:
            b.remove(k)


def test_memcached_wire_format(memcached_server):
    with MemcachedBackend(*memcached_server.address) as b:
        b.write(PageKey(7, 0x2000), page(9))
        assert "7:2000" in memcached_server.stored_keys()
        b.remove(PageKey(7, 0x2000))
        assert "7:2000" not in memcached_server.stored_keys()


@pytest.mark.parametrize("spec, kind, params", [
    ("local", "local", {}),
    ("mock:30:2", "mock", {"base_us": 30, "marginal_us": 2}),
    ("mock:30", "mock", {"base_us": 30, "marginal_us": 2}),
    ("memcached:localhost:11211", "memcached", {"host": "localhost", "port": 11211}),
])
def test_parse_backend_spec(spec, kind, params):
    assert parse_backend_spec(spec) == (kind, params)


@pytest.mark.parametrize("spec", ["remote", "mock:1:2:3", "memcached:11211", "local:x"])
def test_parse_backend_spec_errors(spec):
    with pytest.raises(ValueError):
        parse_backend_spec(spec)


def test_open_backend():
    assert isinstance(open_backend("mock:30:2"), MockBackend)
