"""Scenario sampling and dataset generation tests."""

import math

import numpy as np
import pytest

from vsdt import store
from vsdt.femsim import (
    Contact,
    DatasetError,
    Material,
    ScenarioConfig,
    SequenceDataset,
    generate_dataset,
    sample_scenario,
    simulate_scenario,
)
from vsdt.meshkit import build_box_mesh


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        {"min_contacts": 0},
        {"min_contacts": 3, "max_contacts": 2},
        {"max_patch_nodes": 0},
        {"cone_half_angle_deg": 90.0},
        {"cone_half_angle_deg": -5.0},
        {"min_force": -1e-4},
        {"min_force": 2e-4, "max_force": 1e-4},
        {"ramp_fraction_range": (0.0, 0.5)},
        {"ramp_fraction_range": (0.6, 0.4)},
        {"release_fraction_range": (0.0, 0.5)},
        {"release_fraction_range": (0.9, 0.6)},
        {"release_fraction_range": (0.5, 1.2)},
        {"duration": 0.0},
        {"sample_interval": 0.0},
        {"duration": 0.1, "sample_interval": 0.2},
    ],
)
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(DatasetError):
        ScenarioConfig(**kwargs)


def test_config_frame_count_and_roundtrip():
    cfg = ScenarioConfig(duration=1.0, sample_interval=0.05)
    assert cfg.n_frames == 21
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg


def test_config_roundtrip_with_release():
    cfg = ScenarioConfig(release_fraction_range=(0.5, 0.75))
    assert cfg.to_dict()["release_fraction_range"] == [0.5, 0.75]
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg


# ----------------------------------------------------------------------
# contact schedule
# ----------------------------------------------------------------------


def test_force_ramps_then_holds():
    c = Contact(nodes=(3,), direction=(0.0, 0.0, -1.0), magnitude=2e-4, ramp_time=0.4)
    assert c.force_at(0.0) == 0.0
    assert c.force_at(-1.0) == 0.0
    assert c.force_at(0.2) == pytest.approx(1e-4)
    assert c.force_at(0.4) == pytest.approx(2e-4)
    assert c.force_at(5.0) == pytest.approx(2e-4)


def test_zero_ramp_is_a_step():
    c = Contact(nodes=(0,), direction=(0.0, 0.0, -1.0), magnitude=5e-4, ramp_time=0.0)
    assert c.force_at(0.0) == 5e-4


def test_release_retracts_at_ramp_rate():
    c = Contact(
        nodes=(3,),
        direction=(0.0, 0.0, -1.0),
        magnitude=2e-4,
        ramp_time=0.2,
        release_time=0.6,
    )
    assert c.force_at(0.2) == pytest.approx(2e-4)  # fully pressed
    assert c.force_at(0.6) == pytest.approx(2e-4)  # retraction starts here
    assert c.force_at(0.7) == pytest.approx(1e-4)  # halfway back down
    assert c.force_at(0.8) == 0.0
    assert c.force_at(3.0) == 0.0


def test_early_release_caps_the_peak():
    # retraction beginning mid-ramp: the envelope is min(rise, fall)
    c = Contact(
        nodes=(0,),
        direction=(0.0, 0.0, -1.0),
        magnitude=1e-3,
        ramp_time=0.4,
        release_time=0.2,
    )
    assert c.force_at(0.2) == pytest.approx(5e-4)
    assert c.force_at(0.3) == pytest.approx(7.5e-4)
    assert c.force_at(0.6) == 0.0


def test_step_contact_release_is_a_step_down():
    c = Contact(
        nodes=(0,),
        direction=(0.0, 0.0, -1.0),
        magnitude=5e-4,
        ramp_time=0.0,
        release_time=0.5,
    )
    assert c.force_at(0.5) == 5e-4
    assert c.force_at(0.51) == 0.0


# ----------------------------------------------------------------------
# scenario sampling
# ----------------------------------------------------------------------


def test_sampled_scenarios_respect_config(small_mesh):
    cfg = ScenarioConfig(min_contacts=1, max_contacts=2, max_patch_nodes=3)
    top_plane = small_mesh.dims[2] - 1
    surf = small_mesh.free_surface_mask().reshape(-1)
    for seed in range(12):
        sc = sample_scenario(small_mesh, cfg, np.random.default_rng(seed))
        assert 1 <= len(sc.contacts) <= 2
        seen: set[int] = set()
        for c in sc.contacts:
            assert 1 <= len(c.nodes) <= 3
            assert not seen.intersection(c.nodes)  # patches never overlap
            seen.update(c.nodes)
            for node in c.nodes:
                assert surf[node]
                assert node % small_mesh.dims[2] == top_plane
            d = np.asarray(c.direction)
            assert np.linalg.norm(d) == pytest.approx(1.0)
            assert d[2] <= -math.cos(math.radians(cfg.cone_half_angle_deg)) + 1e-12
            assert cfg.min_force <= c.magnitude <= cfg.max_force
            lo, hi = cfg.ramp_fraction_range
            assert lo * cfg.duration <= c.ramp_time <= hi * cfg.duration


def test_sampling_is_deterministic(small_mesh):
    cfg = ScenarioConfig()
    a = sample_scenario(small_mesh, cfg, np.random.default_rng(99))
    b = sample_scenario(small_mesh, cfg, np.random.default_rng(99))
    assert a == b


def test_sampled_release_times_respect_config(small_mesh):
    held = ScenarioConfig()
    poked = ScenarioConfig(release_fraction_range=(0.5, 0.75))
    for seed in range(8):
        for c in sample_scenario(small_mesh, held, np.random.default_rng(seed)).contacts:
            assert c.release_time is None
        for c in sample_scenario(small_mesh, poked, np.random.default_rng(seed)).contacts:
            assert 0.5 * poked.duration <= c.release_time <= 0.75 * poked.duration


def test_force_field_totals(small_mesh):
    sc = sample_scenario(small_mesh, ScenarioConfig(), np.random.default_rng(3))
    t = 0.7 * sc.duration
    f = sc.force_field(small_mesh, t)
    assert f.shape == (small_mesh.node_count, 3)
    expected = sum(
        c.force_at(t) * np.asarray(c.direction) for c in sc.contacts
    )
    np.testing.assert_allclose(f.sum(axis=0), expected, rtol=1e-12)
    loaded = sorted(n for c in sc.contacts for n in c.nodes)
    unloaded = np.ones(small_mesh.node_count, dtype=bool)
    unloaded[loaded] = False
    assert np.abs(f[unloaded]).max() == 0.0


# ----------------------------------------------------------------------
# simulation
# ----------------------------------------------------------------------


def test_simulated_sequence_layout(small_mesh, tissue):
    cfg = ScenarioConfig(duration=0.2, sample_interval=0.05)
    sc = sample_scenario(small_mesh, cfg, np.random.default_rng(0))
    calls = []
    seq = simulate_scenario(
        small_mesh, tissue, sc, progress=lambda i, n: calls.append((i, n))
    )
    shape = (cfg.n_frames,) + small_mesh.dims + (3,)
    assert seq.forces.shape == shape
    assert seq.displacements.shape == shape
    assert seq.forces.dtype == np.float32
    assert seq.displacements.dtype == np.float32
    assert seq.n_frames == cfg.n_frames
    assert len(calls) == cfg.n_frames

    np.testing.assert_allclose(seq.times, 0.05 * np.arange(cfg.n_frames), atol=1e-7)
    assert np.abs(seq.displacements[0]).max() == 0.0  # starts at rest
    assert np.abs(seq.displacements[-1]).max() > 0.0  # and actually deforms
    for frame in (0, 2, cfg.n_frames - 1):
        want = sc.force_field(small_mesh, frame * 0.05).reshape(
            small_mesh.dims + (3,)
        )
        np.testing.assert_allclose(seq.forces[frame], want.astype(np.float32))


def test_released_sequence_keeps_recovering(small_mesh, tissue):
    """After retraction the force frames are zero but the body is not."""
    cfg = ScenarioConfig(
        duration=0.6,
        sample_interval=0.05,
        ramp_fraction_range=(0.15, 0.2),
        release_fraction_range=(0.4, 0.4),
        min_force=1e-4,
        max_force=2e-4,
    )
    sc = sample_scenario(small_mesh, cfg, np.random.default_rng(2))
    seq = simulate_scenario(small_mesh, tissue, sc)
    assert np.abs(seq.forces[-1]).max() == 0.0
    assert np.abs(seq.displacements[-1]).max() > 0.0


def test_sequence_shape_validation():
    with pytest.raises(DatasetError):
        from vsdt.femsim import Sequence

        Sequence(
            forces=np.zeros((2, 3, 3, 3, 3), np.float32),
            displacements=np.zeros((3, 3, 3, 3, 3), np.float32),
            times=np.zeros(2, np.float32),
        )


# ----------------------------------------------------------------------
# dataset generation
# ----------------------------------------------------------------------


def test_generation_depends_only_on_seed(small_mesh, tissue):
    cfg = ScenarioConfig(duration=0.15, sample_interval=0.05)
    a = generate_dataset(small_mesh, tissue, 2, rng_seed=5, config=cfg)
    b = generate_dataset(small_mesh, tissue, 2, rng_seed=5, config=cfg)
    c = generate_dataset(small_mesh, tissue, 2, rng_seed=6, config=cfg)
    for sa, sb in zip(a.sequences, b.sequences):
        assert np.array_equal(sa.forces, sb.forces)
        assert np.array_equal(sa.displacements, sb.displacements)
    assert not np.array_equal(a.sequences[0].forces, c.sequences[0].forces)


def test_worker_count_does_not_change_results(small_mesh, tissue):
    cfg = ScenarioConfig(duration=0.15, sample_interval=0.05)
    serial = generate_dataset(small_mesh, tissue, 2, rng_seed=8, config=cfg)
    parallel = generate_dataset(
        small_mesh, tissue, 2, rng_seed=8, config=cfg, workers=2
    )
    for sa, sb in zip(serial.sequences, parallel.sequences):
        assert np.array_equal(sa.forces, sb.forces)
        assert np.array_equal(sa.displacements, sb.displacements)


def test_generation_rejects_empty_request(small_mesh, tissue):
    with pytest.raises(DatasetError):
        generate_dataset(small_mesh, tissue, 0, rng_seed=0)


def test_hopeless_force_range_reports_retries(tissue):
    mesh = build_box_mesh((3, 3, 3), spacing=1.0)
    cfg = ScenarioConfig(
        min_force=5.0,
        max_force=9.0,  # newtons: absurd for this material, always inverts
        duration=0.1,
        sample_interval=0.05,
        max_retries=1,
    )
    with pytest.raises(DatasetError, match="rejected"):
        generate_dataset(mesh, tissue, 1, rng_seed=0, config=cfg)


# ----------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------


def test_dataset_roundtrip(sim_dataset, tmp_path):
    path = tmp_path / "ds.vsdt"
    sim_dataset.save(path)
    back = SequenceDataset.load(path)
    assert len(back) == len(sim_dataset)
    assert back.seed == sim_dataset.seed
    assert back.config == sim_dataset.config
    assert back.material == sim_dataset.material
    assert back.mesh.dims == sim_dataset.mesh.dims
    assert np.array_equal(back.mesh.occupancy, sim_dataset.mesh.occupancy)
    assert np.array_equal(back.mesh.dirichlet, sim_dataset.mesh.dirichlet)
    for sa, sb in zip(sim_dataset.sequences, back.sequences):
        assert np.array_equal(sa.forces, sb.forces)
        assert np.array_equal(sa.displacements, sb.displacements)
        assert np.array_equal(sa.times, sb.times)


def test_load_rejects_foreign_container(tmp_path):
    path = tmp_path / "other.vsdt"
    store.write_container(path, {"schema": "somebody.else/3"}, {})
    with pytest.raises(DatasetError, match="schema"):
        SequenceDataset.load(path)
