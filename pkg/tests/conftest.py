"""Shared fixtures: small meshes and datasets sized for fast tests.

The simulated fixtures run the real solver on tiny grids so anything
that needs physically consistent force/displacement pairs gets them in
well under a second per sequence.  Heavier, acceptance-scale resources
are built (and cached) inside test_acceptance.py only.
"""

import numpy as np
import pytest

from vsdt.femsim import (
    Material,
    ScenarioConfig,
    Sequence,
    SequenceDataset,
    generate_dataset,
)
from vsdt.meshkit import build_box_mesh


@pytest.fixture(scope="session")
def small_mesh():
    return build_box_mesh((4, 4, 3), spacing=1.0)


@pytest.fixture(scope="session")
def tissue():
    return Material.default_tissue(tau_scale=0.01)


@pytest.fixture(scope="session")
def sim_dataset(small_mesh, tissue):
    """Three short simulated sequences on the small mesh."""
    config = ScenarioConfig(duration=0.5, sample_interval=0.05)
    return generate_dataset(small_mesh, tissue, 3, rng_seed=42, config=config)


@pytest.fixture(scope="session")
def synth_dataset(small_mesh, tissue):
    """Cheap smooth fields shaped like a dataset; no solver involved.

    Displacements are a fixed linear response to the forces plus a small
    decaying transient, which is enough structure for training-loop and
    metric tests without paying for simulation.
    """
    rng = np.random.default_rng(9)
    dims = small_mesh.dims + (3,)
    n_frames = 11
    mix = rng.normal(0.0, 0.5, (3, 3))
    seqs = []
    for _ in range(6):
        forces = np.zeros((n_frames,) + dims, dtype=np.float32)
        node = (rng.integers(1, 3), rng.integers(1, 3), small_mesh.dims[2] - 1)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        ramp = np.minimum(np.arange(n_frames) / 4.0, 1.0)
        for t in range(n_frames):
            forces[t][node] = 2e-3 * ramp[t] * direction
        disps = np.einsum("t...i,ij->t...j", forces, mix).astype(np.float32)
        disps += 0.05 * disps * np.exp(-np.arange(n_frames) / 3.0)[:, None, None, None, None]
        times = (0.05 * np.arange(n_frames)).astype(np.float32)
        seqs.append(Sequence(forces=forces, displacements=disps, times=times))
    return SequenceDataset(
        sequences=seqs,
        mesh=small_mesh,
        material=tissue,
        config=ScenarioConfig(duration=0.5, sample_interval=0.05),
        seed=9,
    )
