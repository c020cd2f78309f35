import numpy as np
import pytest

from canlm.errors import SchemaError, StructureError
from canlm.trips import (
    ERROR,
    ERRVAL,
    MISSING,
    MISSING_VALUE,
    frames_to_trip,
    read_corpus,
    read_trip,
    trip_filename,
    write_corpus,
    write_trip,
)


class TestTripFiles:
    def test_round_trip(self, small_assets, tmp_path):
        schema = small_assets["schema"]
        trip = small_assets["corpus"][0]
        path = tmp_path / trip_filename(trip.vehicle_id, trip.trip_id)
        write_trip(trip, schema, path)
        back = read_trip(path, schema)
        assert back.vehicle_id == trip.vehicle_id and back.trip_id == trip.trip_id
        assert back.n_frames == trip.n_frames
        for name in trip.cont:
            valid = trip.flags[name] == 0
            assert (back.flags[name] == trip.flags[name]).all()
            assert (back.cont[name][valid] == trip.cont[name][valid]).all()
        for name in trip.enum:
            valid = trip.flags[name] == 0
            assert (back.enum[name][valid] == trip.enum[name][valid]).all()

    def test_write_read_corpus(self, small_assets, tmp_path):
        schema = small_assets["schema"]
        trips = small_assets["corpus"][:4]
        names = write_corpus(trips, schema, tmp_path / "trips")
        assert len(names) == 4
        back = read_corpus(tmp_path / "trips", schema)
        assert sorted(t.key for t in back) == sorted(t.key for t in trips)

    def test_header_binding_enforced(self, small_assets, tmp_path):
        schema = small_assets["schema"]
        trip = small_assets["corpus"][0]
        path = tmp_path / "t.csv"
        write_trip(trip, schema, path)
        text = path.read_text()
        broken = text.replace("speed_kmh", "velocity", 1)
        path.write_text(broken)
        with pytest.raises(SchemaError, match="header"):
            read_trip(path, schema)

    def test_error_and_missing_markers(self, small_assets, tmp_path):
        schema = small_assets["schema"]
        trip = small_assets["corpus"][0]
        trip_copy_flags = trip.flags["speed_kmh"].copy()
        trip.flags["speed_kmh"][0] = ERRVAL
        trip.flags["speed_kmh"][1] = MISSING
        path = tmp_path / "t.csv"
        write_trip(trip, schema, path)
        back = read_trip(path, schema)
        assert back.flags["speed_kmh"][0] == ERRVAL
        assert back.flags["speed_kmh"][1] == MISSING
        trip.flags["speed_kmh"][:] = trip_copy_flags


class TestFramesView:
    def test_frames_round_trip(self, small_assets):
        schema = small_assets["schema"]
        trip = small_assets["corpus"][1]
        frames = trip.frames(schema, 0, 20)
        back = frames_to_trip(frames, schema)
        for name in trip.cont:
            valid = trip.flags[name][:20] == 0
            assert np.allclose(back.cont[name][valid], trip.cont[name][:20][valid])
        for name in trip.flags:
            assert (back.flags[name] == trip.flags[name][:20]).all()

    def test_markers_in_values(self, small_assets):
        schema = small_assets["schema"]
        trip = small_assets["corpus"][1]
        name = "speed_kmh"
        old = trip.flags[name][:2].copy()
        trip.flags[name][0] = ERRVAL
        trip.flags[name][1] = MISSING
        frames = trip.frames(schema, 0, 2)
        assert frames[0].values[name] is ERROR
        assert frames[1].values[name] is MISSING_VALUE
        trip.flags[name][:2] = old

    def test_range_validation(self, small_assets):
        trip = small_assets["corpus"][0]
        with pytest.raises(StructureError):
            trip.frames(small_assets["schema"], trip.n_frames - 2, 5)

    def test_mixed_identifiers_rejected(self, small_assets):
        schema = small_assets["schema"]
        frames = small_assets["corpus"][0].frames(schema, 0, 4)
        frames[2].vehicle_id = "SOMEONE_ELSE"
        with pytest.raises(StructureError, match="mixed"):
            frames_to_trip(frames, schema)
