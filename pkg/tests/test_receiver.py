from ipaddress import IPv4Address

import pytest
from hypothesis import given
from hypothesis import strategies as st

from flrudp import receiver
from flrudp.errors import InvalidState, UnknownTotal
from flrudp.model_codec import chunk_model, to_hex
from flrudp.receiver import (
    DeliverModel,
    Evict,
    ReceiverBuffer,
    ReceiverState,
    SessionRouter,
    StartNackTimer,
    StopNackTimer,
)
from flrudp.sender import Emit
from flrudp.wire_format import Frame, FrameKind

CLIENT = IPv4Address("10.1.2.4")
OTHER = IPv4Address("10.1.2.6")
SERVER = IPv4Address("10.1.2.5")
NACK_TIMEOUT = 7_000
DATA = bytes(range(40))


def frames_for(addr=CLIENT, data=DATA, np_total=4):
    cs = chunk_model(data, -(-len(data) // np_total))
    return {x: Frame.data(x, cs.np, addr, to_hex(cs.chunk(x)).encode()) for x in range(1, cs.np + 1)}


def fresh(addr=CLIENT):
    return ReceiverBuffer(addr, SERVER, NACK_TIMEOUT)


def feed(buf, frames, xs, now=0):
    actions = []
    for x in xs:
        buf, acts = receiver.on_frame(buf, frames[x], now)
        actions += acts
    return buf, actions


def nacked(actions):
    return [a.frame.header.x for a in actions if isinstance(a, Emit) and a.frame.kind is FrameKind.NACK]


def test_missing_set_examples():
    f = frames_for()
    assert receiver.missing_set(feed(fresh(), f, [1, 3, 4])[0]) == [2]
    assert receiver.missing_set(feed(fresh(), f, [1, 4])[0]) == [2, 3]
    assert receiver.missing_set(feed(fresh(), f, [1, 2, 3, 4])[0]) == []
    with pytest.raises(UnknownTotal):
        receiver.missing_set(fresh())


def test_gap_detected_on_last_packet_then_recovered():
    f = frames_for()
    buf, actions = feed(fresh(), f, [1, 3])
    assert actions == []
    buf, actions = receiver.on_frame(buf, f[4], now=10)
    assert nacked(actions) == [2]
    assert actions[-1] == StartNackTimer(NACK_TIMEOUT)
    assert buf.state is ReceiverState.RECOVERING
    assert buf.nack_timer_deadline == 10 + NACK_TIMEOUT
    assert all(a.frame.header.addr == SERVER for a in actions if isinstance(a, Emit))

    buf, actions = receiver.on_frame(buf, f[2])
    assert actions[0] == DeliverModel(DATA, CLIENT)
    assert actions[1] == Emit(Frame.complete_ack(SERVER))
    assert actions[2:] == [StopNackTimer(), Evict(CLIENT)]
    assert buf.state is ReceiverState.COMPLETE


def test_resent_last_packet_triggers_batched_nacks():
    f = frames_for()
    buf, _ = feed(fresh(), f, [1])
    buf, actions = receiver.on_frame(buf, f[4])
    assert nacked(actions) == [2, 3]
    # A duplicate of the last packet re-emits the NACKs for what is still missing.
    buf, _ = receiver.on_frame(buf, f[2])
    buf, actions = receiver.on_frame(buf, f[4])
    assert nacked(actions) == [3]


def test_nack_timeout_resends_then_evicts():
    f = frames_for()
    buf, _ = feed(fresh(), f, [1, 3, 4])
    buf, actions = receiver.on_nack_timeout(buf, now=NACK_TIMEOUT)
    assert nacked(actions) == [2]
    assert buf.nack_retries_left == 2
    buf = ReceiverBuffer(CLIENT, SERVER, NACK_TIMEOUT, nack_retries_left=0)
    buf, _ = feed(buf, f, [1, 4])
    _, actions = receiver.on_nack_timeout(buf)
    assert actions == [Evict(CLIENT)]


def test_nack_timeout_while_collecting_is_invalid():
    with pytest.raises(InvalidState):
        receiver.on_nack_timeout(fresh())


def test_invalid_hex_ignored_and_np_mismatch_raises():
    f = frames_for()
    buf, _ = feed(fresh(), f, [1])
    odd = Frame(FrameKind.DATA, f[2].header, b"00")
    assert receiver.on_frame(buf, odd)[0].received[2] == b"\x00"
    with pytest.raises(receiver.TotalMismatch):
        receiver.on_frame(buf, Frame.data(1, 5, CLIENT, b"00"))


def test_router_aborts_on_total_mismatch():
    router = SessionRouter(SERVER, NACK_TIMEOUT)
    f = frames_for()
    router.handle_frame(f[1])
    actions = router.handle_frame(Frame.data(2, 9, CLIENT, b"00"))
    assert Evict(CLIENT) in actions
    assert CLIENT not in router.buffers


def test_router_isolates_clients():
    router = SessionRouter(SERVER, NACK_TIMEOUT)
    fa, fb = frames_for(CLIENT, DATA), frames_for(OTHER, DATA[::-1], np_total=5)
    delivered = {}
    order = [(fa, 1), (fb, 1), (fb, 2), (fa, 2), (fb, 3), (fa, 3), (fa, 4), (fb, 4), (fb, 5)]
    for frames, x in order:
        for a in router.handle_frame(frames[x]):
            if isinstance(a, DeliverModel):
                delivered[a.client] = a.data
    assert delivered == {CLIENT: DATA, OTHER: DATA[::-1]}
    assert router.buffers == {}


def test_router_fresh_buffer_after_evict():
    router = SessionRouter(SERVER, NACK_TIMEOUT)
    f = frames_for(np_total=1)
    router.handle_frame(f[1])
    assert CLIENT not in router.buffers
    g = frames_for(data=b"\x01\x02", np_total=2)
    buf = router.route(g[1])
    assert buf.np == 0 and not buf.received


def test_tombstone_reacks_duplicate_after_completion():
    router = SessionRouter(SERVER, NACK_TIMEOUT, linger=1000)
    f = frames_for()
    for x in (1, 2, 3, 4):
        router.handle_frame(f[x], now=0)
    assert router.handle_frame(f[4], now=10) == [Emit(Frame.complete_ack(SERVER))]
    # Different content is a new transfer; so is anything after the linger window.
    g = frames_for(data=bytes(40))
    assert router.handle_frame(g[4], now=20) != [Emit(Frame.complete_ack(SERVER))]
    router2 = SessionRouter(SERVER, NACK_TIMEOUT, linger=1000)
    for x in (1, 2, 3, 4):
        router2.handle_frame(f[x], now=0)
    assert nacked(router2.handle_frame(f[4], now=5000)) == [1, 2, 3]


@given(st.integers(1, 8).flatmap(
    lambda n: st.tuples(st.just(n), st.lists(st.integers(1, n), max_size=3 * n))))
def test_partition_and_single_delivery(case):
    np_total, arrivals = case
    data = bytes(range(np_total * 3))
    f = frames_for(data=data, np_total=np_total)
    buf = fresh()
    deliveries = 0
    for x in arrivals:
        before = buf
        buf, actions = receiver.on_frame(buf, f[x])
        deliveries += sum(isinstance(a, DeliverModel) for a in actions)
        if before.state is not ReceiverState.COMPLETE:
            missing = receiver.missing_set(buf)
            assert set(missing) | set(buf.received) == set(range(1, np_total + 1))
            assert not set(missing) & set(buf.received)
            assert set(nacked(actions)) <= set(missing)
        # Replaying the same frame changes nothing and never delivers twice.
        again, acts = receiver.on_frame(buf, f[x])
        assert again.received == buf.received
        assert not any(isinstance(a, DeliverModel) for a in acts)
        assert (buf.state is ReceiverState.COMPLETE) == (len(buf.received) == np_total)
    assert deliveries <= 1
    if deliveries:
        assert buf.state is ReceiverState.COMPLETE
