import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canlm.calibration import CalibrationTable, FeatureCalibration
from canlm.errors import HashMismatchError, StructureError
from canlm.kernels import _numpy_ref, backend_name
from canlm.schema import CONTINUOUS, ENUMERATED, FeatureSpec, SignalSchema
from canlm.tokenizer import (
    bin_midpoint,
    build_plan,
    detokenize,
    dump_tokens_text,
    encode_blocks,
    read_token_file,
    tokenize_corpus,
    tokenize_trip,
    tokenize_value,
    tokenize_window,
    write_token_file,
)
from canlm.trips import ERROR, MISSING_VALUE, OUTLIER, frames_to_trip
from canlm.vocab import NEW_CAR_ID, NEW_TRIP_ID, PAD_ID, TS_ID, build_vocabulary


@pytest.fixture(scope="module")
def speed_setup():
    schema = SignalSchema(
        features=(
            FeatureSpec(name="speed", kind=CONTINUOUS, position=0, unit="km/h", static_min=0.0, static_max=250.0),
            FeatureSpec(name="gear", kind=ENUMERATED, position=1, states=("P", "R", "N", "D")),
        ),
        frame_rate_hz=1.0,
        window_seconds=2,
    )
    calib = CalibrationTable(
        schema_hash=schema.schema_hash,
        thresholds=((0.1, 128), (float("inf"), 16)),
        trim_fraction=0.005,
        per_feature={"speed": FeatureCalibration("speed", 0.0, 100.0, 0.5, 0.005, 128)},
    )
    vocab = build_vocabulary(schema, calib)
    return schema, calib, vocab


class TestTokenizeValue:
    def test_midscale_bin(self, speed_setup):
        schema, calib, vocab = speed_setup
        spec, fc = schema.by_name["speed"], calib.per_feature["speed"]
        assert tokenize_value(spec, 50.0, fc, vocab) == "speed:bin:64"

    def test_upper_edge_goes_to_last_bin(self, speed_setup):
        schema, calib, vocab = speed_setup
        spec, fc = schema.by_name["speed"], calib.per_feature["speed"]
        assert tokenize_value(spec, 100.0, fc, vocab) == "speed:bin:127"

    def test_outside_static_range_is_outlier(self, speed_setup):
        schema, calib, vocab = speed_setup
        spec, fc = schema.by_name["speed"], calib.per_feature["speed"]
        assert tokenize_value(spec, 260.0, fc, vocab) == "speed:<OUTLIER>"

    def test_inside_static_outside_empirical_clamps(self, speed_setup):
        schema, calib, vocab = speed_setup
        spec, fc = schema.by_name["speed"], calib.per_feature["speed"]
        assert tokenize_value(spec, 180.0, fc, vocab) == "speed:bin:127"
        assert tokenize_value(spec, -0.0, fc, vocab) == "speed:bin:0"

    def test_enumerated_state(self, speed_setup):
        schema, _, vocab = speed_setup
        spec = schema.by_name["gear"]
        assert tokenize_value(spec, "R", None, vocab) == "gear:st:R"

    def test_sentinel_totality(self, speed_setup):
        schema, calib, vocab = speed_setup
        spec, fc = schema.by_name["speed"], calib.per_feature["speed"]
        assert tokenize_value(spec, ERROR, fc, vocab) == "speed:<ERROR>"
        assert tokenize_value(spec, MISSING_VALUE, fc, vocab) == "speed:<NULL>"
        assert tokenize_value(spec, float("nan"), fc, vocab) == "speed:<NULL>"
        gear = schema.by_name["gear"]
        assert tokenize_value(gear, "Z", None, vocab) == "gear:<ERROR>"
        assert tokenize_value(gear, MISSING_VALUE, None, vocab) == "gear:<NULL>"

    def test_boundary_enumeration_oracle(self, speed_setup):
        # every bin edge: floor with upper-edge clamp, enumerated exhaustively
        schema, calib, vocab = speed_setup
        spec, fc = schema.by_name["speed"], calib.per_feature["speed"]
        width = (fc.emp_max - fc.emp_min) / fc.bin_count
        for b in range(fc.bin_count):
            edge = fc.emp_min + b * width
            assert tokenize_value(spec, edge, fc, vocab) == f"speed:bin:{b}"
            inside = edge + width * 0.5
            assert tokenize_value(spec, inside, fc, vocab) == f"speed:bin:{b}"

    @given(x=st.floats(0.0, 100.0))
    def test_round_trip_within_half_bin(self, speed_setup, x):
        schema, calib, vocab = speed_setup
        spec, fc = schema.by_name["speed"], calib.per_feature["speed"]
        tok = tokenize_value(spec, x, fc, vocab)
        b = int(tok.rsplit(":", 1)[1])
        width = (fc.emp_max - fc.emp_min) / fc.bin_count
        assert abs(bin_midpoint(fc, b) - x) <= width / 2 * (1 + 1e-12)

    @given(xs=st.lists(st.floats(0.0, 100.0), min_size=2, max_size=20))
    def test_monotone_in_raw_value(self, speed_setup, xs):
        schema, calib, vocab = speed_setup
        spec, fc = schema.by_name["speed"], calib.per_feature["speed"]
        bins = [int(tokenize_value(spec, x, fc, vocab).rsplit(":", 1)[1]) for x in sorted(xs)]
        assert bins == sorted(bins)


def window_frames(small_assets, trip_idx=0, start=0):
    schema = small_assets["schema"]
    trip = small_assets["corpus"][trip_idx]
    return trip.frames(schema, start, schema.frames_per_window)


class TestTokenizeWindow:
    def test_reference_window_structure(self, small_assets):
        schema, vocab, calib = small_assets["schema"], small_assets["vocab"], small_assets["calib"]
        seq = tokenize_window(window_frames(small_assets), None, schema, vocab, calib)
        assert seq.ids.shape == (450,)
        assert [i for i in range(450) if seq.ids[i] == TS_ID] == list(range(0, 450, 45))

    def test_new_context_meta_tokens(self, small_assets):
        schema, vocab, calib = small_assets["schema"], small_assets["vocab"], small_assets["calib"]
        seq = tokenize_window(window_frames(small_assets), None, schema, vocab, calib)
        sym = schema.symbolic_features()
        cols = [1 + f.position for f in sym]
        assert seq.ids[cols[0]] == NEW_CAR_ID
        assert seq.ids[cols[1]] == NEW_TRIP_ID
        # all later blocks hold <PAD> at the identifier slots
        blocks = seq.ids.reshape(10, 45)
        assert (blocks[1:, cols] == PAD_ID).all()

    def test_continuing_context_all_pad(self, small_assets):
        schema, vocab, calib = small_assets["schema"], small_assets["vocab"], small_assets["calib"]
        trip = small_assets["corpus"][0]
        seq = tokenize_window(window_frames(small_assets), (trip.vehicle_id, trip.trip_id), schema, vocab, calib)
        blocks = seq.ids.reshape(10, 45)
        cols = [1 + f.position for f in schema.symbolic_features()]
        assert (blocks[:, cols] == PAD_ID).all()

    def test_same_vehicle_new_trip(self, small_assets):
        schema, vocab, calib = small_assets["schema"], small_assets["vocab"], small_assets["calib"]
        trip = small_assets["corpus"][0]
        seq = tokenize_window(window_frames(small_assets), (trip.vehicle_id, "other-trip"), schema, vocab, calib)
        cols = [1 + f.position for f in schema.symbolic_features()]
        assert seq.ids[cols[0]] == PAD_ID
        assert seq.ids[cols[1]] == NEW_TRIP_ID

    def test_wrong_frame_count(self, small_assets):
        schema, vocab, calib = small_assets["schema"], small_assets["vocab"], small_assets["calib"]
        with pytest.raises(StructureError, match="exactly"):
            tokenize_window(window_frames(small_assets)[:7], None, schema, vocab, calib)

    def test_out_of_order_timestamps(self, small_assets):
        schema, vocab, calib = small_assets["schema"], small_assets["vocab"], small_assets["calib"]
        frames = window_frames(small_assets)
        frames[3].timestamp = frames[2].timestamp - 1.0
        with pytest.raises(StructureError, match="frame rate"):
            tokenize_window(frames, None, schema, vocab, calib)

    def test_stale_vocab_rejected(self, small_assets, speed_setup):
        toy_vocab = speed_setup[2]
        with pytest.raises(HashMismatchError):
            tokenize_window(
                window_frames(small_assets), None, small_assets["schema"], toy_vocab, small_assets["calib"]
            )


class TestDetokenize:
    def test_round_trip_continuous_within_half_bin(self, small_assets):
        schema, vocab, calib = small_assets["schema"], small_assets["vocab"], small_assets["calib"]
        frames = window_frames(small_assets, trip_idx=2)
        seq = tokenize_window(frames, None, schema, vocab, calib)
        back = detokenize(seq, schema, vocab, calib)
        for orig, rec in zip(frames, back):
            for spec in schema.continuous_features():
                x = orig.values[spec.name]
                y = rec.values[spec.name]
                if not isinstance(x, float):
                    continue
                fc = calib.per_feature[spec.name]
                if fc.emp_min <= x <= fc.emp_max:
                    width = (fc.emp_max - fc.emp_min) / fc.bin_count
                    assert abs(y - x) <= width / 2 * (1 + 1e-9)

    def test_enumerated_round_trip_exact(self, small_assets):
        schema, vocab, calib = small_assets["schema"], small_assets["vocab"], small_assets["calib"]
        frames = window_frames(small_assets, trip_idx=1)
        back = detokenize(tokenize_window(frames, None, schema, vocab, calib), schema, vocab, calib)
        for orig, rec in zip(frames, back):
            for spec in schema.enumerated_features():
                x = orig.values[spec.name]
                if isinstance(x, str):
                    assert rec.values[spec.name] == x
                else:
                    assert rec.values[spec.name] in (ERROR, MISSING_VALUE)

    def test_midpoint_value(self):
        fc = FeatureCalibration("speed", 0.0, 100.0, 0.5, 0.005, 128)
        assert bin_midpoint(fc, 64) == pytest.approx(50.390625)

    def test_structural_error_position(self, small_assets):
        schema, vocab, calib = small_assets["schema"], small_assets["vocab"], small_assets["calib"]
        seq = tokenize_window(window_frames(small_assets), None, schema, vocab, calib)
        seq.ids[47] = TS_ID  # block 1, speed slot: timestamp marker is foreign there
        with pytest.raises(StructureError, match="position 47"):
            detokenize(seq, schema, vocab, calib)

    def test_outlier_maps_to_marker(self, small_assets):
        schema, vocab, calib = small_assets["schema"], small_assets["vocab"], small_assets["calib"]
        frames = window_frames(small_assets)
        frames[0].values["speed_kmh"] = 260.0  # outside static range
        seq = tokenize_window(frames, None, schema, vocab, calib)
        back = detokenize(seq, schema, vocab, calib)
        assert back[0].values["speed_kmh"] is OUTLIER


class TestTripAndFiles:
    def test_tokenize_trip_shape(self, small_assets):
        schema, vocab, calib = small_assets["schema"], small_assets["vocab"], small_assets["calib"]
        trip = small_assets["corpus"][0]
        tt = tokenize_trip(trip, schema, vocab, calib)
        assert tt.ids.shape == (trip.n_frames // 10, 450)
        assert (tt.ids[:, 0] == TS_ID).all()

    def test_corpus_context_chaining(self, small_assets):
        schema, vocab, calib = small_assets["schema"], small_assets["vocab"], small_assets["calib"]
        trips = [t for t in small_assets["corpus"] if t.vehicle_id == "V0000"][:2]
        tts = tokenize_corpus(trips, schema, vocab, calib)
        cols = [1 + f.position for f in schema.symbolic_features()]
        first, second = tts[0].ids[0], tts[1].ids[0]
        assert first[cols[0]] == NEW_CAR_ID and first[cols[1]] == NEW_TRIP_ID
        assert second[cols[0]] == PAD_ID and second[cols[1]] == NEW_TRIP_ID

    def test_token_file_round_trip(self, small_assets, tmp_path):
        schema, vocab, calib = small_assets["schema"], small_assets["vocab"], small_assets["calib"]
        tt = tokenize_trip(small_assets["corpus"][3], schema, vocab, calib)
        path = tmp_path / "t.tok"
        write_token_file(tt, path)
        back = read_token_file(path)
        assert (back.ids == tt.ids).all()
        assert back.vehicle_id == tt.vehicle_id and back.vocab_hash == tt.vocab_hash
        assert (back.window_starts == tt.window_starts).all()

    def test_token_file_write_deterministic(self, small_assets, tmp_path):
        schema, vocab, calib = small_assets["schema"], small_assets["vocab"], small_assets["calib"]
        tt = tokenize_trip(small_assets["corpus"][3], schema, vocab, calib)
        a, b = tmp_path / "a.tok", tmp_path / "b.tok"
        write_token_file(tt, a)
        write_token_file(tt, b)
        assert a.read_bytes() == b.read_bytes()

    def test_text_dump(self, small_assets, tmp_path):
        schema, vocab, calib = small_assets["schema"], small_assets["vocab"], small_assets["calib"]
        tt = tokenize_trip(small_assets["corpus"][0], schema, vocab, calib)
        path = tmp_path / "dump.txt"
        dump_tokens_text(tt, vocab, path, schema.block_length)
        lines = path.read_text().splitlines()
        body = [l for l in lines if l and not l.startswith("#")]
        assert body[0].startswith("<TS> ")
        assert len(body[0].split()) == 45


class TestKernelEquivalence:
    def test_backends_agree(self, small_assets):
        if backend_name() != "compiled":
            pytest.skip("compiled kernel not built")
        schema, vocab, calib = small_assets["schema"], small_assets["vocab"], small_assets["calib"]
        plan = build_plan(schema, vocab, calib)
        import canlm.kernels as K

        for trip in small_assets["corpus"][:4]:
            compiled = encode_blocks(trip, plan)
            original = K.fill_token_ids
            K.fill_token_ids = _numpy_ref.fill_token_ids
            try:
                fallback = encode_blocks(trip, plan)
            finally:
                K.fill_token_ids = original
            assert (compiled == fallback).all()

    def test_backends_agree_on_adversarial_cells(self, speed_setup):
        if backend_name() != "compiled":
            pytest.skip("compiled kernel not built")
        schema, calib, vocab = speed_setup
        plan = build_plan(schema, vocab, calib)
        import canlm.kernels as K
        from canlm.trips import empty_trip

        trip = empty_trip(schema, "v", "t", 0.0, 8)
        trip.cont["speed"][:] = [0.0, 100.0, 100.0000001, -0.001, 260.0, float("nan"), 50.0, 99.999999]
        trip.flags["speed"][:] = [0, 0, 0, 0, 0, 0, 1, 2]
        trip.enum["gear"][:] = [0, 1, 2, 3, 9, -1, 0, 0]
        trip.flags["gear"][:] = [0, 0, 0, 0, 0, 0, 1, 2]
        compiled = encode_blocks(trip, plan)
        original = K.fill_token_ids
        K.fill_token_ids = _numpy_ref.fill_token_ids
        try:
            fallback = encode_blocks(trip, plan)
        finally:
            K.fill_token_ids = original
        assert (compiled == fallback).all()
