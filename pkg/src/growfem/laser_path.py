"""
Common Layer Interface (ASCII) slice files and their discretisation into
laser moves.

Only the part of the format needed for scan paths is understood::

    $$HEADERSTART
    $$ASCII
    $$UNITS/0.005
    $$HEADEREND
    $$GEOMETRYSTART
    $$LAYER/12.0
    $$POLYLINE/1,0,3,x1,y1,x2,y2,x3,y3
    $$HATCHES/1,2,xs1,ys1,xe1,ye1,xs2,ys2,xe2,ye2
    $$GEOMETRYEND

Coordinates and heights are multiplied by the units value to get mm.
Bookkeeping directives such as ``$$DATE`` or ``$$LABEL`` are skipped with
a warning; anything else is an error.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

IGNORED = {"DATE", "VERSION", "LABEL", "DIMENSION", "ALIGN", "USERDATA"}
ACCEPTED = {"LAYERS", "ASCII"}


class CLIParseError(ValueError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


@dataclass(frozen=True)
class Hatch:
    begin: tuple
    end: tuple

    def __post_init__(self):
        object.__setattr__(self, "begin", tuple(map(float, self.begin)))
        object.__setattr__(self, "end", tuple(map(float, self.end)))
        if self.begin == self.end:
            raise ValueError("hatch begin and end coincide")

    @property
    def points(self):
        return np.array([self.begin, self.end], float)

    @property
    def length(self):
        return math.dist(self.begin, self.end)


@dataclass(frozen=True)
class Polyline:
    points_: tuple
    direction: int = 2

    def __post_init__(self):
        pts = tuple(tuple(map(float, p)) for p in self.points_)
        if len(pts) < 2:
            raise ValueError("a polyline needs at least two points")
        if any(a == b for a, b in zip(pts, pts[1:])):
            raise ValueError("consecutive polyline points coincide")
        object.__setattr__(self, "points_", pts)

    @property
    def points(self):
        return np.array(self.points_, float)

    @property
    def length(self):
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


@dataclass
class Layer:
    height: float
    polylines: list = field(default_factory=list)
    hatches: list = field(default_factory=list)

    def entities(self):
        """Polylines first, then hatches, in file order."""
        return [*self.polylines, *self.hatches]


@dataclass
class LaserPath:
    units: float = 1.0
    layers: list = field(default_factory=list)

    def __post_init__(self):
        h = [l.height for l in self.layers]
        if any(b <= a for a, b in zip(h, h[1:])):
            raise ValueError("layer heights must increase strictly")

    def __eq__(self, other):
        if not isinstance(other, LaserPath) or len(self.layers) != len(other.layers):
            return False
        return all(a.height == b.height and a.polylines == b.polylines and a.hatches == b.hatches
                   for a, b in zip(self.layers, other.layers))

    def stats(self) -> dict:
        return {
            "layers": len(self.layers),
            "polylines": sum(len(l.polylines) for l in self.layers),
            "hatches": sum(len(l.hatches) for l in self.layers),
            "scan_length_mm": sum(e.length for l in self.layers for e in l.entities()),
            "min_height_mm": self.layers[0].height if self.layers else None,
            "max_height_mm": self.layers[-1].height if self.layers else None,
        }


_COMMENT = re.compile(r"//.*?(//|$)")


def _numbers(text, line):
    try:
        return [float(t) for t in text.split(",") if t.strip() != ""]
    except ValueError:
        raise CLIParseError(line, f"non-numeric parameter in {text!r}") from None


def parse_cli(text: str) -> LaserPath:
    """Parse ASCII CLI text; errors carry the 1-based line number."""
    units = 1.0
    section = None
    layers = []
    seen_header = False
    no = 0
    for no, raw in enumerate(text.splitlines(), start=1):
        line = _COMMENT.sub("", raw).strip()
        if not line:
            continue
        if not line.startswith("$$"):
            raise CLIParseError(no, f"expected a directive, got {line[:30]!r}")
        name, _, args = line[2:].partition("/")
        name = name.strip().upper()
        if name == "HEADERSTART":
            if section is not None:
                raise CLIParseError(no, "header must come first")
            section, seen_header = "header", True
        elif name == "HEADEREND":
            if section != "header":
                raise CLIParseError(no, "$$HEADEREND without $$HEADERSTART")
            section = "between"
        elif name == "GEOMETRYSTART":
            if section not in (None, "between"):
                raise CLIParseError(no, "misplaced $$GEOMETRYSTART")
            section = "geometry"
        elif name == "GEOMETRYEND":
            if section != "geometry":
                raise CLIParseError(no, "$$GEOMETRYEND outside the geometry section")
            section = "done"
        elif name == "BINARY":
            raise CLIParseError(no, "binary CLI files are not supported")
        elif name == "UNITS":
            if section != "header":
                raise CLIParseError(no, "$$UNITS outside the header")
            vals = _numbers(args, no)
            if len(vals) != 1 or vals[0] <= 0:
                raise CLIParseError(no, "$$UNITS needs one positive value")
            units = vals[0]
        elif name in ACCEPTED:
            pass
        elif name in IGNORED:
            logger.warning("line %d: ignoring $$%s", no, name)
        elif name == "LAYER":
            if section != "geometry":
                raise CLIParseError(no, "$$LAYER outside the geometry section")
            vals = _numbers(args, no)
            if len(vals) != 1:
                raise CLIParseError(no, "$$LAYER takes exactly one height")
            z = vals[0] * units
            if layers and z <= layers[-1].height:
                raise CLIParseError(no, f"layer height {z} does not increase")
            layers.append(Layer(z))
        elif name in ("POLYLINE", "HATCHES"):
            if section != "geometry" or not layers:
                raise CLIParseError(no, f"$${name} before any $$LAYER")
            vals = _numbers(args, no)
            head = 3 if name == "POLYLINE" else 2
            if len(vals) < head:
                raise CLIParseError(no, f"$${name} is missing its header fields")
            n = vals[head - 1]
            if n != int(n) or n < 1:
                raise CLIParseError(no, f"invalid count {n}")
            n = int(n)
            per = 2 if name == "POLYLINE" else 4
            coords = vals[head:]
            if len(coords) != per * n:
                raise CLIParseError(no, f"$${name} announces {n} items but holds "
                                        f"{len(coords)} coordinates")
            c = np.asarray(coords).reshape(n, per) * units
            try:
                if name == "POLYLINE":
                    layers[-1].polylines.append(Polyline(tuple(map(tuple, c)), int(vals[1])))
                else:
                    layers[-1].hatches.extend(Hatch((r[0], r[1]), (r[2], r[3])) for r in c)
            except ValueError as exc:
                raise CLIParseError(no, str(exc)) from None
        else:
            raise CLIParseError(no, f"unknown directive $${name}")
    if seen_header and section == "header":
        raise CLIParseError(no, "unterminated header")
    if section == "geometry":
        logger.warning("missing $$GEOMETRYEND")
    return LaserPath(units, layers)


def read_cli(path) -> LaserPath:
    with open(path, encoding="ascii") as fh:
        return parse_cli(fh.read())


def serialize(path: LaserPath) -> str:
    """Canonical ASCII text in mm (units 1); floats are written exactly."""
    out = ["$$HEADERSTART", "$$ASCII", "$$UNITS/1.0", f"$$LAYERS/{len(path.layers)}",
           "$$HEADEREND", "$$GEOMETRYSTART"]
    for layer in path.layers:
        out.append(f"$$LAYER/{float(layer.height)!r}")
        for i, pl in enumerate(layer.polylines, start=1):
            xs = ",".join(f"{v!r}" for p in pl.points_ for v in p)
            out.append(f"$$POLYLINE/{i},{pl.direction},{len(pl.points_)},{xs}")
        if layer.hatches:
            xs = ",".join(f"{float(v)!r}" for h in layer.hatches for v in (*h.begin, *h.end))
            out.append(f"$$HATCHES/1,{len(layer.hatches)},{xs}")
    out.append("$$GEOMETRYEND")
    return "\n".join(out) + "\n"


@dataclass
class DiscretePath:
    """Subsegments of one entity: ``p0``/``p1`` (n, 2) in mm and ``dt`` (n,) in s."""

    step_length: float
    scanning_speed: float
    relocation_speed: float
    p0: np.ndarray
    p1: np.ndarray
    dt: np.ndarray

    def __len__(self):
        return len(self.dt)

    @property
    def lengths(self):
        return np.linalg.norm(self.p1 - self.p0, axis=1)

    def scanning_time(self):
        return float(self.dt.sum())

    def __iter__(self):
        return iter(zip(self.p0, self.p1, self.dt))


def discretize(entity, step_length, scanning_speed, relocation_speed=1.0) -> DiscretePath:
    """Cut each straight piece of ``entity`` into ``step_length`` pieces.

    All pieces have length ``step_length`` except a shorter final one per
    straight piece; each piece takes ``length / scanning_speed`` seconds.
    """
    if step_length <= 0 or scanning_speed <= 0 or relocation_speed <= 0:
        raise ValueError("step length and speeds must be positive")
    pts = entity.points
    a, b = pts[:-1], pts[1:]
    seg = np.linalg.norm(b - a, axis=1)
    if np.any(seg == 0) or seg.sum() == 0:
        raise ValueError("zero-length entity")
    p0, p1 = [], []
    for s, e, L in zip(a, b, seg):
        n = max(1, math.ceil(L / step_length * (1 - 1e-12)))
        d = (e - s) / L
        cuts = np.minimum(np.arange(n + 1) * step_length, L)
        cuts[-1] = L
        q = s + cuts[:, None] * d
        q[-1] = e
        p0.append(q[:-1])
        p1.append(q[1:])
    p0, p1 = np.concatenate(p0), np.concatenate(p1)
    dt = np.linalg.norm(p1 - p0, axis=1) / scanning_speed
    return DiscretePath(float(step_length), float(scanning_speed), float(relocation_speed),
                        p0, p1, dt)


def relocation_time(end, next_begin, relocation_speed) -> float:
    if relocation_speed <= 0:
        raise ValueError("relocation speed must be positive")
    return math.dist(tuple(end), tuple(next_begin)) / relocation_speed


def alternating_hatches(n_layers, thickness, origin, extent, spacing, first_height=None):
    """Square hatch pattern whose direction alternates between x and y per layer.

    Hatch lines are placed at the centres of ``spacing``-wide tracks that
    tile ``extent`` (mm), starting from ``origin`` (x, y).
    """
    x0, y0 = map(float, origin)
    n_tracks = int(round(extent / spacing))
    centres = (np.arange(n_tracks) + 0.5) * spacing
    z0 = thickness if first_height is None else first_height
    layers = []
    for k in range(n_layers):
        hatches = []
        for i, c in enumerate(centres):
            lo, hi = (0.0, extent) if i % 2 == 0 else (extent, 0.0)
            if k % 2 == 0:
                hatches.append(Hatch((x0 + lo, y0 + c), (x0 + hi, y0 + c)))
            else:
                hatches.append(Hatch((x0 + c, y0 + lo), (x0 + c, y0 + hi)))
        layers.append(Layer(z0 + k * thickness, [], hatches))
    return LaserPath(1.0, layers)
