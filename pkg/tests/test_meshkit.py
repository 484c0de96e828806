import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vsdt import tensorad as ta
from vsdt.meshkit import (
    DepthLayer,
    Field3,
    GridMesh,
    MeshError,
    as_field_array,
    build_box_mesh,
    deformed_volumes,
    depth_layers,
    total_volume,
)


# ----------------------------------------------------------------------
# construction
# ----------------------------------------------------------------------


def test_dims_must_have_two_planes():
    with pytest.raises(MeshError):
        GridMesh((1, 4, 4))


def test_spacing_must_be_positive():
    with pytest.raises(MeshError):
        GridMesh((3, 3, 3), spacing=(1.0, 0.0, 1.0))


def test_scalar_spacing_broadcasts():
    mesh = GridMesh((3, 3, 3), spacing=2.0)
    assert mesh.spacing == (2.0, 2.0, 2.0)


def test_occupancy_shape_checked():
    with pytest.raises(MeshError):
        GridMesh((3, 3, 3), occupancy=np.ones((3, 3, 2), dtype=bool))


def test_box_mesh_fixed_patterns():
    m = build_box_mesh((4, 4, 3), fixed="sides+bottom")
    assert m.dirichlet[:, :, 0].all()
    assert m.dirichlet[0].all() and m.dirichlet[-1].all()
    assert not m.dirichlet[1:-1, 1:-1, -1].any()

    b = build_box_mesh((4, 4, 3), fixed="bottom")
    assert b.dirichlet[:, :, 0].all()
    assert not b.dirichlet[:, :, 1:].any()

    f = build_box_mesh((4, 4, 3), fixed="none")
    assert not f.dirichlet.any()

    with pytest.raises(MeshError):
        build_box_mesh((4, 4, 3), fixed="top")


def test_rest_volume_of_unit_box():
    mesh = build_box_mesh((4, 5, 3), spacing=(1.0, 2.0, 0.5))
    # (4-1)*1 x (5-1)*2 x (3-1)*0.5 = 3 * 8 * 1
    assert mesh.rest_volume == pytest.approx(24.0, rel=1e-12)


def test_cell_count():
    mesh = build_box_mesh((4, 5, 3))
    assert mesh.n_cells == 3 * 4 * 2


def test_free_surface_excludes_fixed_nodes(small_mesh):
    surf = small_mesh.free_surface_mask()
    assert not (surf & small_mesh.dirichlet).any()
    # the whole top face of the tray mesh is exposed and free
    assert surf[1:-1, 1:-1, -1].all()
    # interior nodes are not on the surface
    assert not surf[1:-1, 1:-1, 1:-1][:, :, :-1].any()


def test_tet_schemes_cover_each_cell():
    mesh = build_box_mesh((3, 3, 3))
    for scheme in ("main", "mirror"):
        tets = mesh.tet_nodes(scheme)
        assert tets.shape == (mesh.n_cells, 6, 4)
    with pytest.raises(MeshError):
        mesh.tet_nodes("fancy")


def test_tet_schemes_agree_on_rest_volume():
    mesh = build_box_mesh((4, 3, 5), spacing=(0.7, 1.3, 0.4))
    zero = np.zeros(mesh.dims + (3,))
    v_main = total_volume(mesh, zero, scheme="main")
    v_mirror = total_volume(mesh, zero, scheme="mirror")
    assert v_main == pytest.approx(v_mirror, rel=1e-12)
    assert v_main == pytest.approx(mesh.rest_volume, rel=1e-12)


# ----------------------------------------------------------------------
# volume
# ----------------------------------------------------------------------


def _random_field(mesh, rng, amp=0.05):
    return rng.normal(0.0, amp, mesh.dims + (3,))


def test_volume_batch_and_single_agree(small_mesh):
    rng = np.random.default_rng(0)
    u = _random_field(small_mesh, rng)
    batch = deformed_volumes(small_mesh, np.stack([u, 2 * u]))
    assert batch.shape == (2,)
    assert total_volume(small_mesh, u) == pytest.approx(batch[0], rel=1e-14)


def test_volume_rejects_wrong_shape(small_mesh):
    with pytest.raises(MeshError):
        total_volume(small_mesh, np.zeros((2, 2, 2, 3)))
    with pytest.raises(MeshError):
        deformed_volumes(small_mesh, np.zeros((1, 2, 2, 2, 3)))


@settings(max_examples=25, deadline=None)
@given(
    tx=st.floats(-7.0, 7.0),
    ty=st.floats(-7.0, 7.0),
    tz=st.floats(-7.0, 7.0),
    seed=st.integers(0, 2**31 - 1),
)
def test_volume_invariant_under_translation(tx, ty, tz, seed):
    mesh = build_box_mesh((4, 4, 3))
    rng = np.random.default_rng(seed)
    u = _random_field(mesh, rng)
    v0 = total_volume(mesh, u)
    shifted = u + np.array([tx, ty, tz])
    v1 = total_volume(mesh, shifted)
    assert abs(v1 - v0) <= 1e-9 * v0


@settings(max_examples=25, deadline=None)
@given(s=st.floats(0.3, 2.5), seed=st.integers(0, 2**31 - 1))
def test_volume_scales_cubically(s, seed):
    mesh = build_box_mesh((4, 4, 3))
    rng = np.random.default_rng(seed)
    u = _random_field(mesh, rng)
    pos = mesh.rest_positions + u
    scaled_u = s * pos - mesh.rest_positions
    v = total_volume(mesh, u)
    v_scaled = total_volume(mesh, scaled_u)
    assert abs(v_scaled - s**3 * v) <= 1e-9 * s**3 * v


def test_partial_inversion_reads_as_shrinkage():
    """Folding a corner node into its cell must not inflate the total."""
    mesh = build_box_mesh((3, 3, 3), fixed="none")
    u = np.zeros(mesh.dims + (3,))
    # fold the corner past the cell midpoint: some tets invert, and their
    # signed content subtracts instead of phantom-adding
    u[0, 0, 0] = (1.5, 1.5, 1.5)
    assert total_volume(mesh, u) < mesh.rest_volume


def test_volume_gradient_matches_finite_differences(small_mesh):
    rng = np.random.default_rng(3)
    u = _random_field(small_mesh, rng)
    err = ta.check_gradients(
        lambda t: total_volume(small_mesh, t), [u], tol=1e-4
    )
    assert err < 1e-4


def test_volume_tensor_matches_plain(small_mesh):
    rng = np.random.default_rng(4)
    u = _random_field(small_mesh, rng)
    plain = total_volume(small_mesh, u)
    taped = total_volume(small_mesh, ta.Tensor(u))
    assert float(taped.data) == pytest.approx(plain, rel=1e-12)


# ----------------------------------------------------------------------
# depth layers
# ----------------------------------------------------------------------


def test_depth_layers_cover_active_nodes_once(small_mesh):
    layers = depth_layers(small_mesh)
    assert isinstance(layers[0], DepthLayer)
    assert layers[0].normalized_depth == 0.0  # top first
    assert layers[-1].normalized_depth == 1.0
    all_nodes = np.concatenate([lay.node_indices for lay in layers])
    assert len(all_nodes) == len(set(all_nodes.tolist()))
    assert len(all_nodes) == int(small_mesh.occupancy.sum())


def test_depth_layers_monotonic():
    mesh = build_box_mesh((3, 3, 5))
    depths = [lay.normalized_depth for lay in depth_layers(mesh)]
    assert depths == sorted(depths)
    assert len(depths) == 5


# ----------------------------------------------------------------------
# fields
# ----------------------------------------------------------------------


def test_field3_zeroes_inactive_slots():
    occ = np.ones((3, 3, 3), dtype=bool)
    occ[0, 0, 2] = False
    mesh = GridMesh((3, 3, 3), occupancy=occ)
    values = np.ones(mesh.dims + (3,))
    f = Field3(mesh, values)
    assert f.values[0, 0, 2].sum() == 0.0
    assert f.values[1, 1, 1].sum() == 3.0


def test_field3_array_protocol(small_mesh):
    f = Field3.zeros(small_mesh)
    arr = np.asarray(f)
    assert arr.shape == small_mesh.dims + (3,)
    assert f.magnitudes().shape == small_mesh.dims


def test_as_field_array_rejects_foreign_mesh(small_mesh):
    other = build_box_mesh((4, 4, 3))
    f = Field3.zeros(other)
    with pytest.raises(MeshError):
        as_field_array(small_mesh, f)


def test_as_field_array_validates_shape(small_mesh):
    with pytest.raises(MeshError):
        as_field_array(small_mesh, np.zeros((2, 2, 2, 3)))
    out = as_field_array(small_mesh, np.zeros(small_mesh.dims + (3,)))
    assert out.shape == small_mesh.dims + (3,)
