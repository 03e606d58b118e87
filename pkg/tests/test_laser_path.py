import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import FIXTURES
from growfem.laser_path import (CLIParseError, Hatch, Layer, LaserPath, Polyline,
                                alternating_hatches, discretize, parse_cli, read_cli,
                                relocation_time, serialize)

VALID = sorted((FIXTURES / "cli" / "valid").glob("*.cli"))
MALFORMED = sorted((FIXTURES / "cli" / "malformed").glob("*.cli"))
EXPECTED_LINES = json.loads((FIXTURES / "cli" / "malformed" / "expected_lines.json").read_text())


def structure(path):
    return [(l.height, [(pl.points_, pl.direction) for pl in l.polylines],
             [(h.begin, h.end) for h in l.hatches]) for l in path.layers]


class TestParse:
    def test_one_hatch(self):
        path = read_cli(FIXTURES / "cli" / "valid" / "single_hatch.cli")
        assert len(path.layers) == 1
        assert path.layers[0].hatches == [Hatch((0, 0), (0.96, 0))]

    def test_hatches_before_layer(self):
        text = "$$HEADERSTART\n$$UNITS/1\n$$HEADEREND\n$$GEOMETRYSTART\n$$HATCHES/1,1,0,0,1,0\n"
        with pytest.raises(CLIParseError, match="line 5: \\$\\$HATCHES before any \\$\\$LAYER"):
            parse_cli(text)

    def test_units_scale(self):
        path = read_cli(FIXTURES / "cli" / "valid" / "units_scaled.cli")
        assert [l.height for l in path.layers] == pytest.approx([0.06, 0.12])
        assert path.layers[0].hatches[0].end == pytest.approx((0.96, 0.0))
        assert path.layers[1].polylines[0].length == pytest.approx(0.96)

    def test_ignored_directives_warn(self, caplog):
        with caplog.at_level("WARNING"):
            path = read_cli(FIXTURES / "cli" / "valid" / "ignored_directives.cli")
        assert len(path.layers) == 1
        assert any("DATE" in r.message for r in caplog.records)

    @pytest.mark.parametrize("path", VALID, ids=lambda p: p.stem)
    def test_valid_corpus_round_trip(self, path):
        parsed = read_cli(path)
        assert parsed.layers
        text = serialize(parsed)
        again = parse_cli(text)
        assert structure(again) == structure(parsed)
        assert serialize(again) == text

    @pytest.mark.parametrize("path", MALFORMED, ids=lambda p: p.stem)
    def test_malformed_corpus(self, path):
        with pytest.raises(CLIParseError) as err:
            read_cli(path)
        assert err.value.line == EXPECTED_LINES[path.name]
        assert str(err.value).startswith(f"line {err.value.line}: ")

    def test_corpus_size(self):
        assert len(VALID) >= 10 and len(MALFORMED) >= 10

    def test_eight_layer_generator_round_trip(self):
        path = alternating_hatches(8, 0.06, (0, 0), 3.84, 0.48)
        assert len(path.layers) == 8
        dirs = [np.subtract(l.hatches[0].end, l.hatches[0].begin) for l in path.layers]
        assert all(d[1] == 0 for d in dirs[::2]) and all(d[0] == 0 for d in dirs[1::2])
        assert parse_cli(serialize(path)) == path

    def test_heights_must_increase(self):
        with pytest.raises(ValueError):
            LaserPath(1.0, [Layer(0.2), Layer(0.1)])

    def test_stats(self):
        stats = read_cli(FIXTURES / "cli" / "valid" / "mixed_layers.cli").stats()
        assert stats["layers"] == 3
        assert stats["hatches"] == 3 and stats["polylines"] == 3

    @given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50),
                              st.floats(-50, 50), st.floats(-50, 50)), min_size=1, max_size=5),
           st.integers(1, 4))
    def test_round_trip_property(self, segs, nlayers):
        hatches = [Hatch(s[:2], s[2:]) for s in segs if s[:2] != s[2:]]
        if not hatches:
            return
        path = LaserPath(1.0, [Layer(0.1 * (k + 1), [], hatches) for k in range(nlayers)])
        text = serialize(path)
        assert parse_cli(text) == path
        assert serialize(parse_cli(text)) == text


class TestDiscretize:
    def test_single_hatch_time_step(self):
        d = discretize(Hatch((0, 0), (0.96, 0)), 0.96, 100.0)
        assert len(d) == 1
        assert d.dt[0] == pytest.approx(9.6e-3, rel=1e-12)

    def test_remainder(self):
        d = discretize(Hatch((0, 0), (2.0, 0)), 0.96, 100.0)
        assert d.lengths == pytest.approx([0.96, 0.96, 0.08])

    def test_collinear_polyline(self):
        pl = Polyline(((0, 0), (1.5, 0), (3.0, 0)))
        d = discretize(pl, 1.0, 10.0)
        assert d.lengths.sum() == pytest.approx(3.0)
        assert np.allclose(d.p1[:-1], d.p0[1:])

    def test_errors(self):
        with pytest.raises(ValueError):
            discretize(Hatch((0, 0), (1, 0)), 0.0, 1.0)
        with pytest.raises(ValueError):
            discretize(Hatch((0, 0), (1, 0)), 1.0, -1.0)
        with pytest.raises(ValueError):
            Hatch((1, 1), (1, 1))
        with pytest.raises(ValueError):
            Polyline(((0, 0), (0, 0)))

    @given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=2, max_size=6),
           st.floats(0.05, 3.0), st.floats(1.0, 500.0))
    def test_additivity(self, pts, dx, v):
        if any(math.dist(a, b) < 1e-6 for a, b in zip(pts, pts[1:])):
            return
        pl = Polyline(tuple(pts))
        d = discretize(pl, dx, v)
        assert d.lengths.sum() == pytest.approx(pl.length, rel=1e-12)
        assert np.all(d.lengths <= dx * (1 + 1e-12))
        assert d.scanning_time() == pytest.approx(pl.length / v, rel=1e-12)
        assert np.allclose(d.dt, d.lengths / v)


class TestRelocation:
    def test_coincident(self):
        assert relocation_time((1, 2), (1, 2), 200.0) == 0.0

    def test_quotient(self):
        assert relocation_time((0, 0), (4, 0), 200.0) == pytest.approx(0.02)

    def test_bad_speed(self):
        with pytest.raises(ValueError):
            relocation_time((0, 0), (1, 0), 0.0)
