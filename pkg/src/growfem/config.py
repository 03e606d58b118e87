"""
Run configuration: a text file of ``section.key = value`` lines.

Blank lines and ``#`` comments are ignored.  Every key must be known, and
values are converted to the type of the default below.  Lengths are in
mm, times in s, powers in W, temperatures in degrees Celsius, film
coefficients in W/(mm^2 K).
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "mesh": {
        "root_origin": (0.0, 0.0, 0.0),
        "root_size": 32.0,
        "max_level": 6,
        "min_level": 2,
        "search_min_level": 2,
        "geometry": "box",
        "wiggle_amplitude": 3.84,
    },
    "process": {
        "power": 400.0,
        "absorption": 1.0,
        "scan_speed": 100.0,
        "relocation_speed": 200.0,
        "deposition_rate": 10.0,
        "recoat_time": 10.0,
        "layer_thickness": 0.5,
        "step_length": 0.96,
        "laser_width": 0.48,
        "hav_xy_scale": 1.0,
    },
    "material": {
        "table": "ti6al4v",
        "rho": 4.42e-6,
        "c": 546.0,
        "k": 0.007,
    },
    "bc": {
        "h_free": 5.0e-5,
        "u_free": 35.0,
        "h_powder": 5.0e-5,
        "u_powder": 35.0,
        "h_platform": 5.0e-5,
        "u_platform": 35.0,
    },
    "initial": {
        "temperature": 90.0,
    },
    "partition": {
        "parts": 1,
        "w_active": 1,
        "w_inactive": 1,
        "transport": "serial",
    },
    "run": {
        "mode": "layer",
        "layers": 4,
        "substrate_height": 0.0,
        "substrate_level": -1,
        "footprint": (),
    },
    "path": {
        "cli_file": "",
    },
    "solver": {
        "tol": 1e-8,
        "max_iters": 0,
    },
    "output": {
        "directory": "growfem-out",
        "vtk_every": 0,
    },
}


@dataclass
class PipelineConfig:
    values: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    base_dir: Path = Path(".")

    def __getitem__(self, section):
        return self.values[section]

    def set(self, dotted, value):
        section, key = _split(dotted)
        self.values[section][key] = _convert(dotted, DEFAULTS[section][key], value)

    def validate(self):
        m = self["mesh"]
        if not 0 <= m["min_level"] <= m["search_min_level"] <= m["max_level"] <= 19:
            raise ConfigError("need 0 <= min_level <= search_min_level <= max_level <= 19")
        if m["geometry"] not in ("box", "identity", "wiggle"):
            raise ConfigError(f"unknown mesh.geometry {m['geometry']!r}")
        if self["run"]["mode"] not in ("layer", "path"):
            raise ConfigError("run.mode must be 'layer' or 'path'")
        if self["run"]["mode"] == "path" and not self["path"]["cli_file"]:
            raise ConfigError("path mode needs path.cli_file")
        if self["partition"]["parts"] < 1:
            raise ConfigError("partition.parts must be positive")
        if self["partition"]["transport"] not in ("serial", "threaded"):
            raise ConfigError("partition.transport must be 'serial' or 'threaded'")
        if self["partition"]["w_active"] < 1 or self["partition"]["w_inactive"] < 0:
            raise ConfigError("weights must satisfy w_active >= 1, w_inactive >= 0")
        p = self["process"]
        for key in ("power", "scan_speed", "relocation_speed", "deposition_rate",
                    "layer_thickness", "step_length", "laser_width"):
            if p[key] <= 0:
                raise ConfigError(f"process.{key} must be positive")
        if not 0 < p["absorption"] <= 1:
            raise ConfigError("process.absorption must lie in (0, 1]")
        if p["hav_xy_scale"] < 1:
            raise ConfigError("process.hav_xy_scale must be >= 1")
        if p["recoat_time"] < 0:
            raise ConfigError("process.recoat_time must be non-negative")
        if any(self["bc"][k] < 0 for k in ("h_free", "h_powder", "h_platform")):
            raise ConfigError("film coefficients must be non-negative")
        fp = self["run"]["footprint"]
        if fp and len(fp) != 4:
            raise ConfigError("run.footprint takes x0,y0,x1,y1")
        if len(self["mesh"]["root_origin"]) != 3:
            raise ConfigError("mesh.root_origin takes three values")
        return self

    def resolve(self, relative: str) -> Path:
        p = Path(relative)
        return p if p.is_absolute() else self.base_dir / p


def _split(dotted):
    section, _, key = dotted.partition(".")
    if section not in DEFAULTS or key not in DEFAULTS[section]:
        raise ConfigError(f"unknown key {dotted!r}")
    return section, key


def _convert(dotted, default, text):
    if not isinstance(text, str):
        return text
    text = text.strip()
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for {dotted}: {text!r}") from None
    return text


def parse_config(text: str, base_dir=".") -> PipelineConfig:
    cfg = PipelineConfig(base_dir=Path(base_dir))
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            cfg.set(key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {no}: {exc}") from None
    return cfg.validate()


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_config(text, path.parent)
