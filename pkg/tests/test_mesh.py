import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elastid.errors import OutOfDomainError, SchemaError, ValidationError
from elastid.mesh import (
    BoundaryTag,
    DomainSpec,
    build_mesh,
    load_mesh,
    locate_point,
    outward_normal,
    outward_normals,
    save_mesh,
    vertical_section,
)


@pytest.fixture(scope="module")
def default_mesh():
    return build_mesh(DomainSpec())


def test_unit_square_counts():
    m = build_mesh(DomainSpec(1.0, 1.0, 0.5))
    assert m.n_vertices == 9
    assert m.n_triangles == 8


def test_triangle_count_formula():
    m = build_mesh(DomainSpec(2.0, 1.0, 0.25))
    assert m.n_triangles == 2 * (2 / 0.25) * (1 / 0.25) == 64


@pytest.mark.parametrize("spec", [DomainSpec(), DomainSpec(1, 1, 0.5), DomainSpec(3.0, 0.7, 0.13)])
def test_areas_partition_domain(spec):
    m = build_mesh(spec)
    areas = m.signed_areas()
    assert np.all(areas > 0)
    assert abs(areas.sum() - spec.length * spec.height) <= 1e-12 * spec.length * spec.height
    assert m.h <= 1.5 * spec.mesh_size_h


@pytest.mark.parametrize("kw", [dict(length=0), dict(height=-1), dict(mesh_size_h=0), dict(mesh_size_h=1.0)])
def test_degenerate_spec(kw):
    with pytest.raises(ValidationError):
        DomainSpec(**kw)


def test_watertight_and_tags(default_mesh):
    m = default_mesh
    local = np.array([[0, 1], [1, 2], [2, 0]])
    keys = np.sort(m.triangles[:, local].reshape(-1, 2), axis=1)
    _, counts = np.unique(keys, axis=0, return_counts=True)
    assert set(counts.tolist()) <= {1, 2}
    assert (counts == 1).sum() == len(m.edges)
    # boundary perimeter is covered exactly once by the three tags
    lengths = m.edge_lengths()
    by_tag = {t: lengths[m.edges_with_tag(t)].sum() for t in BoundaryTag}
    assert by_tag[BoundaryTag.LEFT] == pytest.approx(1.0)
    assert by_tag[BoundaryTag.RIGHT] == pytest.approx(1.0)
    assert by_tag[BoundaryTag.TOP_BOTTOM] == pytest.approx(4.0)
    mid = m.vertices[m.edges].mean(axis=1)
    for k, tag in enumerate(m.edge_tags):
        x, y = mid[k]
        expect = BoundaryTag.LEFT if x == 0 else BoundaryTag.RIGHT if x == 2 else BoundaryTag.TOP_BOTTOM
        assert tag is expect
        owners = np.flatnonzero(np.any(m.triangles == m.edges[k, 0], axis=1)
                                & np.any(m.triangles == m.edges[k, 1], axis=1))
        assert owners.tolist() == [m.edge_triangles[k]]


def test_normals(default_mesh):
    m = default_mesh
    n = outward_normals(m)
    assert np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-14)
    mid = m.vertices[m.edges].mean(axis=1)
    c = m.centroids()[m.edge_triangles]
    assert np.all(np.einsum("ij,ij->i", n, c - mid) < 0)
    mid_y = mid[:, 1]
    top = int(np.flatnonzero(np.isclose(mid_y, 1.0))[0])
    left = int(m.edges_with_tag("left")[0])
    assert np.allclose(outward_normal(m, top), (0, 1))
    assert np.allclose(outward_normal(m, left), (-1, 0))
    with pytest.raises(IndexError):
        outward_normal(m, len(m.edges))


def test_locate_vertex_and_centroid(default_mesh):
    m = default_mesh
    k, bary = locate_point(m, m.vertices[37])
    assert sorted(bary.tolist()) == [0.0, 0.0, 1.0]
    assert m.triangles[k][int(np.argmax(bary))] == 37
    c = m.centroids()[123]
    k, bary = locate_point(m, c)
    assert k == 123
    assert np.allclose(bary, 1 / 3, atol=1e-14)
    for bad in [(-0.1, 0.5), (2.0001, 0.5), (1.0, 1.5)]:
        with pytest.raises(OutOfDomainError):
            locate_point(m, bad)


def test_locate_edge_tie_break_lowest_index(default_mesh):
    m = default_mesh
    # midpoint of an interior vertical grid line segment is shared by two triangles
    x = (0.5, 0.55)
    k, _ = locate_point(m, x)
    lam_all = [i for i in range(m.n_triangles)
               if np.all(np.linalg.solve(np.vstack([m.vertices[m.triangles[i]].T, np.ones(3)]),
                                         np.array([*x, 1.0])) >= -1e-12)]
    assert len(lam_all) >= 2 and k == min(lam_all)


def test_locate_round_trip_random(default_mesh):
    m = default_mesh
    rng = np.random.default_rng(1)
    pts = rng.random((1000, 2)) * (2.0, 1.0)
    for x in pts:
        k, bary = locate_point(m, x)
        assert np.all(bary >= 0) and abs(bary.sum() - 1) < 1e-14
        assert np.allclose(bary @ m.vertices[m.triangles[k]], x, atol=1e-12, rtol=0)


def _brute_force_section(m, x):
    """Intersect x = const with every triangle independently."""
    pieces = []
    for k, tri in enumerate(m.vertices[m.triangles]):
        ys = []
        for a in range(3):
            (x0, y0), (x1, y1) = tri[a], tri[(a + 1) % 3]
            if x0 == x1:
                if x0 == x:
                    ys += [y0, y1]
            elif min(x0, x1) <= x <= max(x0, x1):
                ys.append(y0 + (x - x0) / (x1 - x0) * (y1 - y0))
        if ys and max(ys) - min(ys) > 1e-12:
            pieces.append((min(ys), max(ys)))
    return pieces


def test_vertical_section_rectangle(default_mesh):
    sec = vertical_section(default_mesh, 0.77)
    assert (sec.y_a, sec.y_b) == (0.0, 1.0)
    assert abs(sum(hi - lo for _, lo, hi in sec.segments) - 1.0) < 1e-12


def test_vertical_section_on_mesh_line(default_mesh):
    m = default_mesh
    sec = vertical_section(m, 0.6)
    brute = _brute_force_section(m, 0.6)
    union = sorted(set((round(lo, 12), round(hi, 12)) for lo, hi in brute))
    # the line runs along element edges: segments coincide with the edge pieces
    got = [(round(lo, 12), round(hi, 12)) for _, lo, hi in sec.segments]
    assert got == union
    assert got[0][0] == 0.0 and got[-1][1] == 1.0
    for k, lo, hi in sec.segments:
        assert k == min(i for i, pc in enumerate(_brute_force_tri(m, 0.6)) if pc == (round(lo, 12), round(hi, 12)))


def _brute_force_tri(m, x):
    out = []
    for k in range(m.n_triangles):
        sub = _brute_force_section(type(m)(m.vertices, m.triangles[k : k + 1], np.zeros((0, 2)), np.zeros(0), ()), x)
        out.append((round(sub[0][0], 12), round(sub[0][1], 12)) if sub else None)
    return out


@settings(max_examples=100, deadline=None)
@given(st.floats(min_value=1e-6, max_value=2 - 1e-6))
def test_section_partition_property(x):
    m = build_mesh(DomainSpec())
    sec = vertical_section(m, x)
    total = sum(hi - lo for _, lo, hi in sec.segments)
    assert abs(total - (sec.y_b - sec.y_a)) < 1e-12
    for (_, _, hi), (_, lo, _) in zip(sec.segments[:-1], sec.segments[1:]):
        assert abs(hi - lo) < 1e-12
    for k, lo, hi in sec.segments:
        for y in (lo, hi, 0.5 * (lo + hi)):
            bary = np.linalg.solve(np.vstack([m.vertices[m.triangles[k]].T, np.ones(3)]), np.array([x, y, 1.0]))
            assert np.all(bary >= -1e-9)


@pytest.mark.parametrize("x", [0.0, 2.0, -1.0, 3.0])
def test_section_outside(default_mesh, x):
    with pytest.raises(OutOfDomainError):
        vertical_section(default_mesh, x)


def test_mesh_file_round_trip(default_mesh, tmp_path):
    path = tmp_path / "mesh.txt"
    save_mesh(default_mesh, path)
    assert path.read_text().splitlines()[0] == "vertices 231 triangles 400 boundary 60"
    back = load_mesh(path)
    assert np.array_equal(back.vertices, default_mesh.vertices)
    assert np.array_equal(back.triangles, default_mesh.triangles)
    assert np.array_equal(back.edges, default_mesh.edges)
    assert back.edge_tags == default_mesh.edge_tags


@pytest.mark.parametrize("text", ["", "vertices x\n", "vertices 1 triangles 0 boundary 0\n", "nodes 0 a 0 b 0\n"])
def test_mesh_file_corrupt(tmp_path, text):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(SchemaError):
        load_mesh(path)
