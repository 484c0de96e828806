"""Random contact scenarios and dataset generation.

A scenario is one or two contact patches on the free top surface of the
body, each loaded along a direction drawn from a downward cone and a
ramp-and-hold magnitude schedule, optionally retracted again before the
sequence ends (press-and-release).  Sequences are integrated with the
explicit solver and sampled at a fixed interval; the recorded frames are
(applied force field, displacement field) pairs, both float32.

Determinism: sequence ``i`` of a dataset is produced from the seed
stream ``SeedSequence([master_seed, i, retry])``, so results depend only
on the seed and the configuration - never on the number of worker
processes or the order tasks complete in.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence as SequenceT

import numpy as np

from .. import store
from ..meshkit import GridMesh, MeshError
from .material import ElementInversionError, Material
from .solver import BodyState, ExplicitSolver, SolverError, stable_timestep

DATASET_SCHEMA = "vsdt.dataset/1"


class DatasetError(RuntimeError):
    """Scenario sampling or dataset IO failed."""


@dataclass(frozen=True)
class ScenarioConfig:
    """Knobs for random scenario sampling and integration."""

    min_contacts: int = 1
    max_contacts: int = 2
    max_patch_nodes: int = 4
    cone_half_angle_deg: float = 30.0
    min_force: float = 3.0e-4  # N, total per contact
    max_force: float = 9.0e-4
    ramp_fraction_range: tuple[float, float] = (0.15, 0.45)
    release_fraction_range: tuple[float, float] | None = None
    duration: float = 1.0  # s
    sample_interval: float = 0.05  # s
    damping: float = 5.0  # 1/s mass-proportional coefficient
    safety: float = 0.5  # explicit stability safety factor
    max_retries: int = 8

    def __post_init__(self):
        if not 1 <= self.min_contacts <= self.max_contacts:
            raise DatasetError(
                f"contact count range ({self.min_contacts}, {self.max_contacts}) invalid"
            )
        if self.max_patch_nodes < 1:
            raise DatasetError("max_patch_nodes must be >= 1")
        if not 0.0 <= self.cone_half_angle_deg < 90.0:
            raise DatasetError("cone half-angle must be in [0, 90)")
        if self.min_force < 0.0 or self.max_force < self.min_force:
            raise DatasetError("force range invalid")
        lo, hi = self.ramp_fraction_range
        if not 0.0 < lo <= hi <= 1.0:
            raise DatasetError("ramp fraction range must satisfy 0 < lo <= hi <= 1")
        if self.release_fraction_range is not None:
            rlo, rhi = self.release_fraction_range
            if not 0.0 < rlo <= rhi <= 1.0:
                raise DatasetError(
                    "release fraction range must satisfy 0 < lo <= hi <= 1"
                )
        if self.duration <= 0.0 or self.sample_interval <= 0.0:
            raise DatasetError("duration and sample_interval must be positive")
        if self.sample_interval > self.duration:
            raise DatasetError("sample_interval exceeds duration")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration / self.sample_interval)) + 1

    def to_dict(self) -> dict:
        return {
            "min_contacts": self.min_contacts,
            "max_contacts": self.max_contacts,
            "max_patch_nodes": self.max_patch_nodes,
            "cone_half_angle_deg": self.cone_half_angle_deg,
            "min_force": self.min_force,
            "max_force": self.max_force,
            "ramp_fraction_range": list(self.ramp_fraction_range),
            "release_fraction_range": (
                None
                if self.release_fraction_range is None
                else list(self.release_fraction_range)
            ),
            "duration": self.duration,
            "sample_interval": self.sample_interval,
            "damping": self.damping,
            "safety": self.safety,
            "max_retries": self.max_retries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        kwargs = dict(d)
        if "ramp_fraction_range" in kwargs:
            kwargs["ramp_fraction_range"] = tuple(kwargs["ramp_fraction_range"])
        if kwargs.get("release_fraction_range") is not None:
            kwargs["release_fraction_range"] = tuple(kwargs["release_fraction_range"])
        return cls(**kwargs)


@dataclass(frozen=True)
class Contact:
    """One loaded patch: flat node ids, unit direction, schedule params.

    The load ramps to ``magnitude`` over ``ramp_time``, holds, and - when
    ``release_time`` is set - retracts to zero at the same rate from that
    instant on.
    """

    nodes: tuple[int, ...]
    direction: tuple[float, float, float]  # unit vector
    magnitude: float  # N, total across the patch
    ramp_time: float  # s
    release_time: float | None = None  # s, start of retraction

    def force_at(self, t: float) -> float:
        t = max(t, 0.0)
        rise = 1.0 if self.ramp_time <= 0.0 else min(t / self.ramp_time, 1.0)
        if self.release_time is None:
            return self.magnitude * rise
        if self.ramp_time <= 0.0:
            fall = 1.0 if t <= self.release_time else 0.0
        else:
            fall = 1.0 - (t - self.release_time) / self.ramp_time
            fall = min(max(fall, 0.0), 1.0)
        return self.magnitude * min(rise, fall)


@dataclass(frozen=True)
class Scenario:
    contacts: tuple[Contact, ...]
    duration: float
    sample_interval: float

    def force_field(self, mesh: GridMesh, t: float) -> np.ndarray:
        """Dense (n_nodes, 3) force field at time t."""
        f = np.zeros((mesh.node_count, 3), dtype=np.float64)
        for c in self.contacts:
            per_node = c.force_at(t) / len(c.nodes)
            vec = np.asarray(c.direction) * per_node
            f[list(c.nodes)] += vec
        return f


def _top_surface_nodes(mesh: GridMesh) -> np.ndarray:
    """Flat ids of loadable nodes: free-surface nodes on the top plane."""
    surf = mesh.free_surface_mask()
    top = np.zeros(mesh.dims, dtype=bool)
    top[:, :, mesh.dims[2] - 1] = True
    flat = np.nonzero((surf & top).reshape(-1))[0]
    if len(flat) == 0:
        raise DatasetError("mesh has no loadable free nodes on its top plane")
    return flat


def _grow_patch(
    mesh: GridMesh, seed_node: int, size: int, allowed: set[int], rng: np.random.Generator
) -> tuple[int, ...]:
    """Breadth-first patch of up to ``size`` nodes on the top plane."""
    nx, ny, nz = mesh.dims
    patch = [seed_node]
    frontier = [seed_node]
    taken = {seed_node}
    while len(patch) < size and frontier:
        nxt: list[int] = []
        for node in frontier:
            i, rem = divmod(node, ny * nz)
            jj, k = divmod(rem, nz)
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ii, jn = i + di, jj + dj
                if not (0 <= ii < nx and 0 <= jn < ny):
                    continue
                cand = (ii * ny + jn) * nz + k
                if cand in allowed and cand not in taken:
                    nxt.append(cand)
        rng.shuffle(nxt)
        for cand in nxt:
            if len(patch) >= size:
                break
            if cand not in taken:
                taken.add(cand)
                patch.append(cand)
        frontier = nxt
    return tuple(sorted(patch))


def _sample_direction(rng: np.random.Generator, half_angle_deg: float) -> tuple:
    """Uniform direction in the downward cone of the given half-angle."""
    cos_max = math.cos(math.radians(half_angle_deg))
    cos_phi = rng.uniform(cos_max, 1.0)
    sin_phi = math.sqrt(max(1.0 - cos_phi * cos_phi, 0.0))
    psi = rng.uniform(0.0, 2.0 * math.pi)
    return (sin_phi * math.cos(psi), sin_phi * math.sin(psi), -cos_phi)


def sample_scenario(
    mesh: GridMesh, config: ScenarioConfig, rng: np.random.Generator
) -> Scenario:
    """Draw a random scenario consistent with the configuration."""
    loadable = _top_surface_nodes(mesh)
    allowed = set(int(n) for n in loadable)
    n_contacts = int(rng.integers(config.min_contacts, config.max_contacts + 1))
    contacts: list[Contact] = []
    used: set[int] = set()
    for _ in range(n_contacts):
        nodes: tuple[int, ...] = ()
        for _attempt in range(10):
            seed_node = int(rng.choice(loadable))
            size = int(rng.integers(1, config.max_patch_nodes + 1))
            cand = _grow_patch(mesh, seed_node, size, allowed, rng)
            if not used.intersection(cand):
                nodes = cand
                break
        if not nodes:
            continue  # crowded top plane: fall back to fewer contacts
        used.update(nodes)
        release = None
        if config.release_fraction_range is not None:
            release = float(
                rng.uniform(*config.release_fraction_range) * config.duration
            )
        contacts.append(
            Contact(
                nodes=nodes,
                direction=_sample_direction(rng, config.cone_half_angle_deg),
                magnitude=float(rng.uniform(config.min_force, config.max_force)),
                ramp_time=float(
                    rng.uniform(*config.ramp_fraction_range) * config.duration
                ),
                release_time=release,
            )
        )
    if not contacts:
        raise DatasetError("could not place any contact patch")
    return Scenario(
        contacts=tuple(contacts),
        duration=config.duration,
        sample_interval=config.sample_interval,
    )


@dataclass
class Sequence:
    """One simulated loading sequence, frames equally spaced in time."""

    forces: np.ndarray  # (T, nx, ny, nz, 3) float32, N
    displacements: np.ndarray  # (T, nx, ny, nz, 3) float32, mm
    times: np.ndarray  # (T,) float32, s

    def __post_init__(self):
        if self.forces.shape != self.displacements.shape:
            raise DatasetError("force/displacement frame shapes differ")
        if len(self.times) != len(self.forces):
            raise DatasetError("times length does not match frame count")

    @property
    def n_frames(self) -> int:
        return len(self.times)


def simulate_scenario(
    mesh: GridMesh,
    material: Material,
    scenario: Scenario,
    damping: float = 5.0,
    safety: float = 0.5,
    progress: Callable[[int, int], None] | None = None,
) -> Sequence:
    """Integrate one scenario and sample frames at its interval."""
    solver = ExplicitSolver(mesh, material, damping=damping)
    dt_cap = stable_timestep(mesh, material, safety=safety)
    si = scenario.sample_interval
    n_sub = max(1, math.ceil(si / dt_cap))
    dt = si / n_sub
    n_frames = int(round(scenario.duration / si)) + 1

    dims = mesh.dims + (3,)
    forces = np.zeros((n_frames,) + dims, dtype=np.float32)
    disps = np.zeros((n_frames,) + dims, dtype=np.float32)
    times = np.zeros(n_frames, dtype=np.float32)

    state = BodyState.zeros(mesh, material)
    force_at = lambda t: scenario.force_field(mesh, t)  # noqa: E731

    for frame in range(n_frames):
        t_frame = frame * si
        forces[frame] = force_at(t_frame).reshape(dims).astype(np.float32)
        disps[frame] = state.u.astype(np.float32)
        times[frame] = t_frame
        if progress is not None:
            progress(frame, n_frames)
        if frame == n_frames - 1:
            break
        for sub in range(n_sub):
            state = solver.step(state, force_at(state.time), dt)
    return Sequence(forces=forces, displacements=disps, times=times)


@dataclass
class SequenceDataset:
    """Simulated sequences plus everything needed to reproduce them."""

    sequences: list[Sequence]
    mesh: GridMesh
    material: Material
    config: ScenarioConfig
    seed: int

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def n_frames(self) -> int:
        return self.sequences[0].n_frames if self.sequences else 0

    # -- persistence ---------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "schema": DATASET_SCHEMA,
            "mesh": {
                "dims": list(self.mesh.dims),
                "spacing": list(self.mesh.spacing),
                "offset": list(self.mesh.offset),
            },
            "material": self.material.to_dict(),
            "config": self.config.to_dict(),
            "seed": int(self.seed),
            "n_sequences": len(self.sequences),
        }
        entries: dict[str, np.ndarray] = {
            "mesh/occupancy": self.mesh.occupancy.astype(np.int8),
            "mesh/dirichlet": self.mesh.dirichlet.astype(np.int8),
        }
        for i, seq in enumerate(self.sequences):
            entries[f"seq{i:05d}/force"] = seq.forces
            entries[f"seq{i:05d}/disp"] = seq.displacements
            entries[f"seq{i:05d}/times"] = seq.times
        store.write_container(path, meta, entries)

    @classmethod
    def load(cls, path) -> "SequenceDataset":
        meta, entries = store.read_container(path)
        schema = meta.get("schema")
        if schema != DATASET_SCHEMA:
            raise DatasetError(
                f"{path}: schema tag {schema!r} is not {DATASET_SCHEMA!r}; "
                f"this container is not a sequence dataset"
            )
        mesh = GridMesh(
            dims=tuple(meta["mesh"]["dims"]),
            spacing=tuple(meta["mesh"]["spacing"]),
            occupancy=entries["mesh/occupancy"].astype(bool),
            dirichlet=entries["mesh/dirichlet"].astype(bool),
            offset=tuple(meta["mesh"]["offset"]),
        )
        material = Material.from_dict(meta["material"])
        config = ScenarioConfig.from_dict(meta["config"])
        seqs = []
        for i in range(int(meta["n_sequences"])):
            seqs.append(
                Sequence(
                    forces=entries[f"seq{i:05d}/force"],
                    displacements=entries[f"seq{i:05d}/disp"],
                    times=entries[f"seq{i:05d}/times"],
                )
            )
        return cls(
            sequences=seqs,
            mesh=mesh,
            material=material,
            config=config,
            seed=int(meta["seed"]),
        )


def _make_sequence(
    mesh: GridMesh, material: Material, config: ScenarioConfig, master_seed: int, index: int
) -> Sequence:
    """Simulate sequence ``index``, resampling on solver failure."""
    for retry in range(config.max_retries + 1):
        rng = np.random.default_rng(np.random.SeedSequence([master_seed, index, retry]))
        scenario = sample_scenario(mesh, config, rng)
        try:
            return simulate_scenario(
                mesh,
                material,
                scenario,
                damping=config.damping,
                safety=config.safety,
            )
        except (SolverError, ElementInversionError):
            continue
    raise DatasetError(
        f"sequence {index}: solver rejected {config.max_retries + 1} scenarios in a row; "
        f"lower the force range or raise damping"
    )


def _worker(args) -> tuple[int, Sequence]:
    mesh_meta, material_d, config_d, master_seed, index = args
    mesh = GridMesh(
        dims=tuple(mesh_meta["dims"]),
        spacing=tuple(mesh_meta["spacing"]),
        occupancy=np.asarray(mesh_meta["occupancy"], dtype=bool),
        dirichlet=np.asarray(mesh_meta["dirichlet"], dtype=bool),
        offset=tuple(mesh_meta["offset"]),
    )
    material = Material.from_dict(material_d)
    config = ScenarioConfig.from_dict(config_d)
    return index, _make_sequence(mesh, material, config, master_seed, index)


def generate_dataset(
    mesh: GridMesh,
    material: Material,
    n_sequences: int,
    rng_seed: int,
    config: ScenarioConfig | None = None,
    workers: int = 1,
) -> SequenceDataset:
    """Simulate ``n_sequences`` random scenarios deterministically.

    ``workers > 1`` distributes sequences over processes; the result is
    bit-identical to the single-process run.
    """
    if n_sequences < 1:
        raise DatasetError("n_sequences must be >= 1")
    config = config if config is not None else ScenarioConfig()

    if workers <= 1 or n_sequences == 1:
        seqs = [
            _make_sequence(mesh, material, config, rng_seed, i)
            for i in range(n_sequences)
        ]
    else:
        mesh_meta = {
            "dims": mesh.dims,
            "spacing": mesh.spacing,
            "offset": mesh.offset,
            "occupancy": mesh.occupancy.tolist(),
            "dirichlet": mesh.dirichlet.tolist(),
        }
        tasks = [
            (mesh_meta, material.to_dict(), config.to_dict(), rng_seed, i)
            for i in range(n_sequences)
        ]
        results: dict[int, Sequence] = {}
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for index, seq in pool.map(_worker, tasks):
                results[index] = seq
        seqs = [results[i] for i in range(n_sequences)]

    return SequenceDataset(
        sequences=seqs, mesh=mesh, material=material, config=config, seed=rng_seed
    )


__all__ = [
    "Contact",
    "DATASET_SCHEMA",
    "DatasetError",
    "SequenceDataset",
    "Scenario",
    "ScenarioConfig",
    "Sequence",
    "sample_scenario",
    "simulate_scenario",
    "generate_dataset",
]
