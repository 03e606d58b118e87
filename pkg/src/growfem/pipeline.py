"""
Printing simulations driven by a :class:`~growfem.config.PipelineConfig`.

Two strategies are available.  ``layer`` mode deposits a whole layer per
printing step and lets it cool for the recoat time.  ``path`` mode follows
the laser along the hatches and polylines of a CLI file, one HAV per
subsegment, with cooling steps for laser relocation and recoating.

All per-part work goes through a transport object, so every message that
a distributed run would send is accounted for.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .birth import ACTIVE, GAS, all_inactive, exchange_ghost_status, is_active
from .collision import Cuboid, build_hav, overlaps_search_volume, transform_to_hav
from .config import ConfigError, PipelineConfig
from .fe_space import build_dof_map, increment, project_on_transform
from .geometry import BoxMap, make_map
from .laser_path import discretize, read_cli, relocation_time
from .octree import OctreeMesh
from .partition import (WeightFunction, compute_weights, ghost_layer, imbalance_stats,
                        part_loads, partition_by_weight, redistribute, split)
from .solver import DistributedMatrix, jacobi_pcg
from .thermal import (BoundarySpec, LossRegion, MaterialTable, UniformSource, assemble_step,
                      ti6al4v)
from .transport import SerialTransport, ThreadedTransport
from .vtk import write_vtk

logger = logging.getLogger(__name__)

PHASES = ("triangulation", "activation", "assembly", "solver")
QUANTITIES = ("cells", "weighted_cells", "active_cells", "dofs")
VERTICAL_CLEARANCE = 1e-6


class NumericalFailure(RuntimeError):
    pass


class PhaseTimers:
    """Cumulative wall time of the four pipeline phases."""

    def __init__(self):
        self.seconds = dict.fromkeys(PHASES, 0.0)

    @contextmanager
    def phase(self, name):
        if name not in self.seconds:
            raise KeyError(f"unknown phase {name!r}")
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] += time.perf_counter() - t0


@dataclass
class StepRecord:
    step: int
    kind: str          # "print" or "cool"
    layer: int
    entity: int
    subsegment: int
    t: float
    dt: float
    cells: int
    active_cells: int
    dofs: int
    iterations: int
    residual: float
    transform_passes: int


@dataclass
class RunResult:
    steps: list
    timers: dict
    loads: dict
    mesh: OctreeMesh
    status: np.ndarray
    dofmap: object
    U: np.ndarray
    search_boxes: list = field(default_factory=list)
    exchanges: dict = field(default_factory=dict)
    peak_cells: int = 0

    @property
    def n_steps(self):
        return len(self.steps)

    def imbalance(self):
        return imbalance_stats({q: np.array(self.loads[q]) for q in QUANTITIES})


class Simulation:
    """State and stepping shared by both run modes."""

    def __init__(self, config: PipelineConfig, transport=None, out_dir=None, vtk_every=None):
        self.cfg = config
        m, p = config["mesh"], config["process"]
        self.max_level, self.min_level = m["max_level"], m["min_level"]
        self.search_min_level = m["search_min_level"]
        size = float(m["root_size"])
        origin = tuple(m["root_origin"])
        if m["geometry"] == "wiggle":
            self.geometry = make_map("wiggle", origin, (size,) * 3, amplitude=m["wiggle_amplitude"])
        else:
            self.geometry = BoxMap(origin, (size,) * 3)
        self.root_size = size
        self.origin = np.asarray(origin, float)
        self.mesh = OctreeMesh.uniform(self.min_level, self.min_level, self.max_level, self.geometry)
        self.status = all_inactive(len(self.mesh), GAS)
        part = config["partition"]
        self.num_parts = int(part["parts"])
        self.w = WeightFunction(int(part["w_active"]), int(part["w_inactive"]))
        if transport is None:
            transport = ThreadedTransport() if part["transport"] == "threaded" else SerialTransport()
        self.transport = transport
        self.partition = partition_by_weight(compute_weights(self.mesh, self.status, self.w),
                                             self.num_parts)
        self.dofmap = build_dof_map(self.mesh, self.status)
        self.U = np.zeros(0)
        self.t = 0.0
        self.u0 = float(config["initial"]["temperature"])
        self.material = self._material()
        bc = config["bc"]
        self.bc = BoundarySpec(LossRegion(bc["h_free"], bc["u_free"]),
                               LossRegion(bc["h_powder"], bc["u_powder"]),
                               LossRegion(bc["h_platform"], bc["u_platform"]))
        self.tol = float(config["solver"]["tol"])
        self.max_iters = int(config["solver"]["max_iters"]) or None
        self.timers = PhaseTimers()
        self.steps = []
        self.loads = {q: [] for q in QUANTITIES}
        self.search_boxes = []
        self.out_dir = Path(out_dir) if out_dir else None
        self.vtk_every = int(config["output"]["vtk_every"] if vtk_every is None else vtk_every)
        self.peak_cells = len(self.mesh)
        self._box = None
        self._passes = 0

    def _material(self):
        mat = self.cfg["material"]
        if mat["table"] == "ti6al4v":
            return ti6al4v()
        if mat["table"] == "constant":
            return MaterialTable.constant(mat["rho"], mat["c"], mat["k"])
        return MaterialTable.from_csv(self.cfg.resolve(mat["table"]))

    # -- mesh update -------------------------------------------------------
    def _ranges(self, mesh):
        if self.partition.num_leaves != len(mesh):
            return None
        return [self.partition.range(p) for p in range(self.partition.num_parts)]

    def _anticipated_weights(self, mesh, status):
        hit = overlaps_search_volume(mesh, self._box)
        future = status.copy()
        future[hit] = ACTIVE
        return compute_weights(mesh, future, self.w)

    def _on_transform(self, old_mesh, old_status, new_mesh, new_status, origin):
        new_dm = build_dof_map(new_mesh, new_status)
        if self.dofmap.n_dofs:
            self.U = project_on_transform(self.dofmap, self.U, new_dm)
        else:
            self.U = np.zeros(new_dm.n_dofs)
        self.dofmap = new_dm
        followed = self.partition.follow(origin)
        new_part = partition_by_weight(self._anticipated_weights(new_mesh, new_status),
                                       self.num_parts)
        blocks = redistribute(new_mesh, followed, new_part, new_status, self.transport)
        if not np.array_equal(np.concatenate(blocks), new_status):
            raise NumericalFailure("status migration lost data")
        self.partition = new_part
        self.peak_cells = max(self.peak_cells, len(new_mesh))

    def update_domain(self, box, max_level=None, search_min_level=None):
        """Transform onto ``box``, activate it and extend the temperature field.

        Returns ``(affected, activated)`` leaf indices of the final mesh.
        """
        max_level = self.max_level if max_level is None else max_level
        smin = self.search_min_level if search_min_level is None else search_min_level
        smin = min(smin, max_level)
        self._box = box.cuboid(VERTICAL_CLEARANCE) if hasattr(box, "cuboid") else box
        self.search_boxes.append(self._box)
        with self.timers.phase("triangulation"):
            res = transform_to_hav(self.mesh, self.status, self._box, max_level, self.min_level,
                                   smin, on_transform=self._on_transform, ranges=self._ranges,
                                   vertical_clearance=0.0)
            self._passes = res.passes
            self.mesh = OctreeMesh(res.mesh.levels, res.mesh.anchors, self.min_level,
                                   self.max_level, self.geometry)
        with self.timers.phase("activation"):
            self.status = res.status
            weights = compute_weights(self.mesh, self.status, self.w)
            target = partition_by_weight(weights, self.num_parts)
            if target != self.partition:
                redistribute(self.mesh, self.partition, target, self.status, self.transport)
                self.partition = target
            ghosts = [ghost_layer(self.mesh, self.partition, p) for p in range(self.num_parts)]
            vals = exchange_ghost_status(split(self.status, self.partition), self.partition,
                                         ghosts, self.transport)
            for (idx, _), v in zip(ghosts, vals):
                if not np.array_equal(self.status[idx], v):
                    raise NumericalFailure("ghost status exchange is inconsistent")
            new_dm = build_dof_map(self.mesh, self.status)
            self.U = increment(self.dofmap, self.U, new_dm, self.u0)
            self.dofmap = new_dm
        return res.affected, res.activated

    # -- time steps ------------------------------------------------------------
    def solve(self, dt, source, kind, layer=-1, entity=-1, subsegment=-1):
        t_new = self.t + dt
        report = None
        if self.dofmap.n_dofs:
            with self.timers.phase("assembly"):
                system = assemble_step(self.dofmap, self.U, dt, self.material, self.bc, source,
                                       t_new, self.partition, self.transport)
                D = DistributedMatrix(system.matrix, system.row_bounds, self.transport)
            with self.timers.phase("solver"):
                U, report = jacobi_pcg(D, system.rhs, x0=self.U, tol=self.tol,
                                       max_iters=self.max_iters)
            if not report.converged or not np.all(np.isfinite(U)):
                raise NumericalFailure(
                    f"solver failed at layer {layer}, entity {entity}, subsegment {subsegment}: "
                    f"{report}")
            self.U = U
        self.t = t_new
        self._record(kind, dt, layer, entity, subsegment, report)

    def _record(self, kind, dt, layer, entity, subsegment, report):
        active = is_active(self.status)
        weights = compute_weights(self.mesh, self.status, self.w)
        owners = self.dofmap.owners(self.partition) if self.dofmap.n_dofs else np.zeros(0, int)
        self.loads["cells"].append(self.partition.counts().astype(float))
        self.loads["weighted_cells"].append(part_loads(weights, self.partition))
        self.loads["active_cells"].append(part_loads(active, self.partition))
        self.loads["dofs"].append(np.bincount(owners, minlength=self.num_parts).astype(float))
        rec = StepRecord(len(self.steps), kind, layer, entity, subsegment, self.t, dt,
                         len(self.mesh), int(active.sum()), self.dofmap.n_dofs,
                         report.iterations if report else 0,
                         report.residual if report else 0.0, self._passes)
        self.steps.append(rec)
        self._passes = 0
        if self.out_dir and self.vtk_every and rec.step % self.vtk_every == 0:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            write_vtk(self.out_dir / f"step_{rec.step:05d}.vtk", self.mesh, self.status,
                      self.dofmap, self.U)

    # -- helpers ---------------------------------------------------------------
    def footprint(self):
        fp = self.cfg["run"]["footprint"]
        if fp:
            return np.array(fp[:2]), np.array(fp[2:])
        if not isinstance(self.geometry, BoxMap):
            raise ConfigError("run.footprint is required for curved geometries")
        return self.origin[:2], self.origin[:2] + self.root_size

    def slab(self, z0, z1):
        lo, hi = self.footprint()
        eps = 1e-9 * self.root_size
        dz = VERTICAL_CLEARANCE * (z1 - z0)
        return Cuboid.from_bounds([lo[0] + eps, lo[1] + eps, z0 + dz],
                                  [hi[0] - eps, hi[1] - eps, z1 - dz])

    def build_substrate(self):
        H = float(self.cfg["run"]["substrate_height"])
        if H <= 0:
            return
        level = self.cfg["run"]["substrate_level"]
        level = self.search_min_level if level < 0 else level
        self.update_domain(self.slab(self.origin[2], self.origin[2] + H), max_level=level,
                           search_min_level=min(level, self.search_min_level))
        self.U = np.full(self.dofmap.n_dofs, self.u0)

    def volume(self, cells):
        from .thermal import _geometry
        geo = _geometry(self.dofmap)
        pos = np.full(len(self.mesh), -1, np.int64)
        pos[self.dofmap.active] = np.arange(len(self.dofmap.active))
        return float(geo.volume[pos[np.asarray(cells, np.int64)]].sum())

    def result(self):
        return RunResult(self.steps, dict(self.timers.seconds), self.loads, self.mesh,
                         self.status, self.dofmap, self.U, self.search_boxes,
                         dict(self.transport.counts), self.peak_cells)


def run_layer_by_layer(config: PipelineConfig, transport=None, out_dir=None,
                       vtk_every=None) -> RunResult:
    """Remesh, repartition, activate, print and cool one whole layer at a time."""
    sim = Simulation(config, transport, out_dir, vtk_every)
    sim.build_substrate()
    p = config["process"]
    thickness = float(p["layer_thickness"])
    z_base = sim.origin[2] + float(config["run"]["substrate_height"])
    top = sim.origin[2] + sim.root_size
    for j in range(int(config["run"]["layers"])):
        z1 = z_base + (j + 1) * thickness
        if z1 > top * (1 + 1e-12):
            raise ConfigError(f"layer {j} ends at z={z1} above the root box")
        try:
            affected, activated = sim.update_domain(sim.slab(z1 - thickness, z1))
            V = sim.volume(activated if len(activated) else affected)
            dt_print = V / float(p["deposition_rate"])
            source = UniformSource(float(p["absorption"]), float(p["power"]), affected)
            sim.solve(dt_print, source, "print", layer=j)
            sim.solve(float(p["recoat_time"]), None, "cool", layer=j)
        except (ConfigError, NumericalFailure):
            raise
        except ArithmeticError as exc:
            raise NumericalFailure(f"layer {j}: {exc}") from exc
    return sim.result()


def run_path_tracking(config: PipelineConfig, transport=None, out_dir=None,
                      vtk_every=None, path=None) -> RunResult:
    """Follow the laser path: one HAV and one printing step per subsegment."""
    sim = Simulation(config, transport, out_dir, vtk_every)
    sim.build_substrate()
    p = config["process"]
    if path is None:
        path = read_cli(config.resolve(config["path"]["cli_file"]))
    dx, v_scan, v_rel = float(p["step_length"]), float(p["scan_speed"]), float(p["relocation_speed"])
    for j, layer in enumerate(path.layers):
        last_end = None
        for e, entity in enumerate(layer.entities()):
            pts = entity.points
            if last_end is not None:
                t_rel = relocation_time(last_end, pts[0], v_rel)
                if t_rel > 0:
                    sim.solve(t_rel, None, "cool", layer=j, entity=e)
            dpath = discretize(entity, dx, v_scan, v_rel)
            for s, (p0, p1, dt) in enumerate(dpath):
                hav = build_hav((*p0, layer.height), (*p1, layer.height), float(p["laser_width"]),
                                float(p["layer_thickness"]), float(p["hav_xy_scale"]))
                try:
                    affected, _ = sim.update_domain(hav)
                    source = UniformSource(float(p["absorption"]), float(p["power"]), affected)
                    sim.solve(float(dt), source, "print", layer=j, entity=e, subsegment=s)
                except NumericalFailure:
                    raise
                except ArithmeticError as exc:
                    raise NumericalFailure(f"layer {j}, entity {e}, subsegment {s}: {exc}") from exc
            last_end = pts[-1]
        sim.solve(float(p["recoat_time"]), None, "cool", layer=j)
    return sim.result()


def run(config: PipelineConfig, **kw) -> RunResult:
    if config["run"]["mode"] == "layer":
        return run_layer_by_layer(config, **kw)
    return run_path_tracking(config, **kw)


def report(result: RunResult, out_dir) -> dict:
    """Write ``steps.csv``, ``imbalance.csv`` and ``summary.json`` into ``out_dir``.

    ``steps.csv`` has one row per time step with the fields of
    :class:`StepRecord`; ``imbalance.csv`` lists mean, sigma and cv of the
    per-part cells, weighted cells, active cells and DOFs at every step;
    ``summary.json`` holds the phase timers, step count, time averages of
    cv and the exchange counts per message tag.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    names = list(StepRecord.__dataclass_fields__)
    writer = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
    writer.writeheader()
    for rec in result.steps:
        writer.writerow(asdict(rec))
    (out / "steps.csv").write_text(buf.getvalue())
    summary = {
        "time_steps": result.n_steps,
        "phases": result.timers,
        "final_cells": len(result.mesh),
        "peak_cells": result.peak_cells,
        "final_active_cells": int(is_active(result.status).sum()),
        "final_dofs": result.dofmap.n_dofs,
        "exchanges": result.exchanges,
    }
    if result.steps:
        imb = result.imbalance()
        (out / "imbalance.csv").write_text(imb.to_csv())
        summary["cv_time_mean"] = imb.cv_time_mean
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary
