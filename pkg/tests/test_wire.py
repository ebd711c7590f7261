import struct

import dpkt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dnsasset.wire import (
    NOERROR,
    NXDOMAIN,
    REFUSED,
    Direction,
    Envelope,
    EnvelopeError,
    Kind,
    Transport,
    classify_qtype,
    encode_message,
    encode_name,
    message_length,
    parse_message,
    rcode_class,
)
from wire_oracle import reference_decode

ENV = Envelope(ts_us=1, src="10.0.0.1", dst="192.0.2.1", sport=40000, dport=53)


def header(qd=0, an=0, ns=0, ar=0, txid=0x1234, flags=0x0100):
    return struct.pack("!6H", txid, flags, qd, an, ns, ar)


def question(name_bytes, qtype=1):
    return name_bytes + struct.pack("!HH", qtype, 1)


def parse(raw):
    return parse_message(raw, ENV)


def test_well_formed_a_query():
    ev = parse(header(qd=1) + question(encode_name("Example.ORG")))
    assert ev.kind is Kind.QUERY
    assert (ev.txid, ev.qname, ev.qtype, ev.rcode, ev.malformed) == (0x1234, "example.org", 1, None, False)


def test_header_claims_question_but_no_body():
    assert parse(header(qd=1)).malformed


def test_response_rcode_and_kind():
    raw = encode_message(9, "www.example.edu", 1, response=True, rcode=NXDOMAIN)
    ev = parse(raw)
    assert ev.kind is Kind.RESPONSE and ev.rcode == NXDOMAIN and not ev.malformed


def test_compressed_answer_is_well_formed():
    raw = encode_message(9, "www.example.edu", 28, response=True, rcode=NOERROR)
    ev = parse(raw)
    assert not ev.malformed and ev.qtype == 28


def test_self_pointer_is_malformed():
    assert parse(header(qd=1) + question(b"\xc0\x0c")).malformed


def test_two_pointer_cycle_is_malformed():
    # name at 12 points to 14, which points back to 12
    assert parse(header(qd=1) + b"\xc0\x0e\xc0\x0c" + b"\x00\x01\x00\x01").malformed


def _pointer_chain(jumps_in_chain: int) -> bytes:
    """Question name is a pointer into a chain of pointers held in an answer
    record's RDATA, ending at the root label."""
    base = 12 + 2 + 4 + 1 + 10  # header, question pointer, qtype/class, root owner, RR fixed
    chain = b"".join(struct.pack("!H", 0xC000 | (base + 2 * (i + 1))) for i in range(jumps_in_chain)) + b"\x00"
    rr = b"\x00" + struct.pack("!HHIH", 1, 1, 0, len(chain)) + chain
    return header(qd=1, an=1) + struct.pack("!H", 0xC000 | base) + b"\x00\x01\x00\x01" + rr


def test_pointer_budget_boundary():
    assert not parse(_pointer_chain(127)).malformed  # 128 jumps in total
    assert parse(_pointer_chain(128)).malformed  # 129 jumps


@pytest.mark.parametrize("tag", [0x40, 0x80])
def test_reserved_label_types(tag):
    assert parse(header(qd=1) + question(bytes([tag | 3]) + b"abc\x00")).malformed


def test_name_length_limit():
    def name(sizes):
        return b"".join(bytes([n]) + b"a" * n for n in sizes) + b"\x00"

    assert not parse(header(qd=1) + question(name([63, 63, 63, 61]))).malformed  # 255 octets
    assert parse(header(qd=1) + question(name([63, 63, 63, 62]))).malformed  # 256 octets


def test_trailing_bytes_are_malformed():
    assert parse(header(qd=1) + question(encode_name("a.b")) + b"\x00").malformed


def test_truncated_pointer():
    assert parse(header(qd=1) + b"\xc0").malformed


def test_record_count_exceeds_content():
    raw = encode_message(1, "a.example.edu", 1, response=True)
    assert parse(raw[:-1]).malformed
    hdr = bytearray(raw)
    hdr[7] += 1  # one more answer than present
    assert parse(bytes(hdr)).malformed


def test_envelope_errors():
    with pytest.raises(EnvelopeError):
        parse_message(header(), Envelope(0, "10.0.0.1", "10.0.0.2", 1000, 2000))
    with pytest.raises(EnvelopeError):
        parse(b"\x00" * 11)


def test_both_ports_53_accepted():
    env = Envelope(0, "10.0.0.1", "10.0.0.2", 53, 53, Transport.UDP, 4, Direction.OUTBOUND)
    assert not parse_message(header(), env).malformed


def test_classify_qtype():
    any_ = classify_qtype(255)
    assert any_.name == "ANY" and any_.deprecated and not any_.dnssec
    assert classify_qtype(1).name == "A"
    dnskey = classify_qtype(48)
    assert dnskey.name == "DNSKEY" and dnskey.dnssec
    other = classify_qtype(4242)
    assert other.name == "Other" and not other.known
    assert classify_qtype(38).deprecated and classify_qtype(35).deprecated
    with pytest.raises(ValueError):
        classify_qtype(70000)


def test_rcode_class():
    assert rcode_class(None) == "None"
    assert rcode_class(REFUSED) == "Refused"
    assert rcode_class(9) == "Other"


labels = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789-", min_size=1, max_size=20)
names = st.lists(labels, min_size=0, max_size=5).map(".".join)


@settings(max_examples=300, deadline=None)
@given(
    txid=st.integers(0, 0xFFFF),
    name=names,
    qtype=st.sampled_from([1, 2, 5, 12, 15, 16, 28, 33, 255, 48, 4242]),
    response=st.booleans(),
    rcode=st.sampled_from([0, 2, 3, 5]),
)
def test_round_trip_against_oracles(txid, name, qtype, response, rcode):
    raw = encode_message(txid, name, qtype, response, rcode)
    assert len(raw) == message_length(name, qtype, response, rcode)
    ev = parse(raw)
    assert not ev.malformed
    assert (ev.txid, ev.qname, ev.qtype) == (txid, name, qtype)
    assert ev.rcode == (rcode if response else None)
    assert reference_decode(raw) == (name, qtype)
    if response and rcode == NOERROR and qtype != 1:
        return  # dpkt decodes RDATA by type; the encoder's answer is always A-shaped
    msg = dpkt.dns.DNS(raw)
    assert msg.id == txid and msg.qr == int(response)
    assert msg.qd[0].name == name and msg.qd[0].type == qtype
    if response:
        assert msg.rcode == rcode


@settings(max_examples=500, deadline=None)
@given(st.binary(min_size=12, max_size=80))
def test_random_bytes_agree_with_reference(raw):
    ev = parse(raw)
    ref = reference_decode(raw)
    assert ev.malformed == (ref is None)
    if ref is not None:
        assert (ev.qname, ev.qtype) == ref
