import numpy as np
import pytest

from lidarcodec import codec as C
from lidarcodec import geometry as G
from lidarcodec.errors import (ConfigMismatchError, CodecError, EmptyFrameError, FormatError,
                               OutOfVolumeError)
from lidarcodec.scanio import synthetic_scan

from helpers import random_cloud, tiny_model

rng = np.random.default_rng(21)
MODEL = tiny_model(3)
INTR = G.synthetic_intrinsics(16)


def roundtrip(points, model=MODEL, intr=None, **kw):
    blob, st = C.encode_frame(points, model, intrinsics=intr, **kw)
    dec = C.decode_frame(blob, model, intr)
    ref = C.quantized_reference(points, kw.get("mode", "cartesian"), kw.get("depth", 12), intr)
    return blob, st, dec, ref


@pytest.mark.parametrize("mode", G.MODES)
@pytest.mark.parametrize("S", [1, 2, 4, 8, 0])
def test_round_trip_modes_and_stages(mode, S):
    pts = synthetic_scan(int(rng.integers(1 << 30)), INTR, azimuth_steps=64)
    _, st, dec, ref = roundtrip(pts, intr=INTR if mode == "cylbeam" else None, mode=mode,
                                depth=10, stages=S, window=64)
    assert np.array_equal(dec.grid, ref)
    assert dec.header.stages == S
    assert dec.stats.backbone_invocations == st.backbone_invocations


def test_stage_count_equal_to_window_length():
    pts = random_cloud(rng, 300)
    _, _, dec, ref = roundtrip(pts, stages=32, window=32, depth=8)
    assert np.array_equal(dec.grid, ref)


def test_post_causal_invocation_invariant():
    pts = random_cloud(rng, 800)
    for S in (1, 3, 0):
        _, st, _, _ = roundtrip(pts, stages=S, window=50, depth=9)
        expect = sum(-(-n // 50) for n in st.level_nodes[2:])
        assert st.backbone_invocations == expect == st.windows


def test_fully_causal_invocations():
    pts = random_cloud(rng, 800)
    _, base, _, _ = roundtrip(pts, stages=1, window=50, depth=9)
    _, fc1, _, _ = roundtrip(pts, stages=1, window=50, depth=9, fully_causal=True)
    assert fc1.backbone_invocations == base.backbone_invocations
    _, fc, dec, ref = roundtrip(pts, stages=3, window=50, depth=9, fully_causal=True)
    assert np.array_equal(dec.grid, ref)
    # every coded level here holds >= 3 nodes, so no stage clamping happens
    assert min(fc.level_nodes[2:]) >= 3
    assert fc.backbone_invocations == 3 * base.backbone_invocations
    assert dec.header.fully_causal


def test_payload_close_to_model_entropy():
    pts = random_cloud(rng, 3000)
    for S in (1, 4):
        _, st, _, _ = roundtrip(pts, stages=S, window=128, depth=12)
        assert 8 * st.payload_bytes <= st.ideal_bits + 32
        assert st.ideal_bits <= 8 * st.payload_bytes
        assert abs(sum(st.level_bits) - st.ideal_bits) < 1e-6
        assert st.bpp == 8 * st.payload_bytes / len(pts)


def test_without_model_uses_flat_tables():
    pts = random_cloud(rng, 200)
    _, st, dec, ref = roundtrip(pts, model=None, depth=8)
    assert np.array_equal(dec.grid, ref) and st.backbone_invocations == 0


def test_no_direct_levels():
    pts = random_cloud(rng, 200)
    _, st, dec, ref = roundtrip(pts, depth=8, direct_levels=0, window=16)
    assert np.array_equal(dec.grid, ref)
    assert st.backbone_invocations == sum(-(-n // 16) for n in st.level_nodes)


def test_duplicates_and_point_count():
    pts = random_cloud(rng, 100)
    pts = np.vstack([pts, pts])
    _, st, dec, ref = roundtrip(pts, depth=10)
    assert st.point_count == 200 and st.duplicates == 100 and len(dec.grid) == 100


def test_decoded_points_within_quantization_error():
    pts = synthetic_scan(4, INTR, azimuth_steps=64)
    blob, st = C.encode_frame(pts, MODEL, mode="spherical", depth=14)
    dec = C.decode_frame(blob, MODEL)
    assert np.array_equal(dec.grid, C.quantized_reference(pts, "spherical", 14))
    assert np.max(np.abs(dec.points - pts).min(axis=0)) < 0.1


def test_header_fields_round_trip():
    q = G.QuantizationParams(9, (0.5, 1.0, 2.0), (-3.0, 0.0, 1.5))
    h = C.Header(depth=9, stages=0, window=77, mode="spherical", quant=q, point_count=123,
                 leaf_count=120, model_digest=2**63 + 5, direct_levels=3)
    h2, payload = C.Header.unpack(C.pack_stream(h, b"abc"))
    assert h2 == h and payload == b"abc"


def test_errors():
    with pytest.raises(EmptyFrameError):
        C.encode_frame(np.zeros((0, 3)), MODEL)
    with pytest.raises(FormatError):
        C.encode_frame(random_cloud(rng, 10), MODEL, mode="cylbeam")
    q = G.QuantizationParams(8, (0.01,) * 3, (0.0,) * 3)
    with pytest.raises(OutOfVolumeError):
        C.encode_frame(random_cloud(rng, 10), MODEL, depth=8, quant=q)


def test_digest_and_intrinsics_mismatch():
    pts = synthetic_scan(1, INTR, azimuth_steps=32)
    blob, _ = C.encode_frame(pts, MODEL, mode="cylbeam", intrinsics=INTR, depth=9)
    with pytest.raises(ConfigMismatchError):
        C.decode_frame(blob, tiny_model(4), INTR)
    with pytest.raises(ConfigMismatchError):
        C.decode_frame(blob, MODEL, G.synthetic_intrinsics(16, offset=0.1))
    with pytest.raises(FormatError):
        C.decode_frame(blob, MODEL, None)


def test_tampering_never_crashes():
    pts = random_cloud(rng, 400)
    blob, _ = C.encode_frame(pts, MODEL, depth=10, stages=2, window=64)
    ref = C.quantized_reference(pts, "cartesian", 10)
    for k in rng.choice(len(blob), 40, replace=False):
        bad = bytearray(blob)
        bad[k] ^= 1 << int(rng.integers(8))
        try:
            out = C.decode_frame(bytes(bad), MODEL)
        except CodecError:
            continue
        assert not np.array_equal(out.grid, ref) or bytes(bad) == blob
    with pytest.raises(FormatError):
        C.decode_frame(blob[:-5], MODEL)


def test_payload_corruption_behind_valid_checksum():
    """A forged checksum reaches the decoder; it must fail cleanly."""
    pts = random_cloud(rng, 400)
    blob, _ = C.encode_frame(pts, MODEL, depth=10, window=64)
    hdr, payload = C.Header.unpack(blob)
    ref = C.quantized_reference(pts, "cartesian", 10)
    for k in range(0, len(payload), max(1, len(payload) // 25)):
        bad = bytearray(payload)
        bad[k] ^= 0x5A
        try:
            out = C.decode_frame(C.pack_stream(hdr, bytes(bad)), MODEL)
        except CodecError:
            continue
        assert not np.array_equal(out.grid, ref)


def test_encoder_and_decoder_are_deterministic():
    pts = random_cloud(rng, 500)
    a, _ = C.encode_frame(pts, MODEL, depth=10, stages=4, window=64)
    b, _ = C.encode_frame(pts, MODEL, depth=10, stages=4, window=64)
    assert a == b
