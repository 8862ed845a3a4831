import io
import json

from hypothesis import given
from hypothesis import strategies as st

from passvp.sim import Kernel
from passvp.trace import DIRECTIONS, SOURCES, SPACES, TraceRecord, Tracer, read_trace, write_trace

records = st.builds(
    TraceRecord,
    time_ps=st.integers(0, 2**63),
    source=st.sampled_from(SOURCES),
    space=st.sampled_from(SPACES),
    region=st.sampled_from(["cfg", "bar0", "bus", "msix"]),
    address=st.integers(0, 2**64 - 1),
    length=st.integers(0, 4096),
    direction=st.sampled_from(DIRECTIONS),
    data_hex=st.binary(max_size=8).map(bytes.hex),
)


@given(st.lists(records, max_size=20))
def test_jsonl_roundtrip(recs):
    buf = io.StringIO()
    write_trace(recs, buf)
    buf.seek(0)
    assert list(read_trace(buf)) == recs


def test_json_shape():
    rec = TraceRecord(5, "cpu", "mmio", "bar0", 0x1000_0000, 4, "read", "01020304")
    obj = json.loads(rec.to_json())
    assert list(obj) == ["time_ps", "source", "space", "region", "address", "length",
                         "direction", "data_hex"]
    assert obj["address"] == "0000000010000000"


def test_tracer_truncates_data_and_orders():
    k = Kernel()
    tr = Tracer(k)
    tr.emit("device", "bus", "bus", 0x10, 100, "write", bytes(range(100)))
    tr.emit("cpu", "mmio", "bar0", 0x20, 4, "write", b"\x01\x00\x00\x00", at=0)
    assert [r.address for r in tr.records] == [0x20, 0x10]
    assert tr.records[1].data_hex == bytes(range(8)).hex()
    assert tr.records[1].length == 100
    tr.warning("x", "y")
    assert tr.records[-1].space == "warn"
