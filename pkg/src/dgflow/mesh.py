"""2D conforming meshes with oriented face topology.

Supported mesh families: structured axis-aligned quadrilaterals, structured
crossed triangles (each cell split into 4 about its centroid), and imported
unstructured meshes (native ASCII format or a Gmsh v2.2 ASCII subset).

Every face stores a single unit normal, directed from its plus-element to its
minus-element (outward on the boundary).  Per-element outward normals are
obtained by a sign flip, which makes any per-face flux antisymmetric by
construction.  Interior edges tagged as barriers are duplicated into a pair of
boundary faces so that no-flow conditions decouple the two sides.
"""

from __future__ import annotations

import numpy as np

INTERIOR_TAG = "interior"

#: interior-edge tags that trigger face duplication on import
BARRIER_TAGS = frozenset({"barrier", "barrier-noflow", "noflow-barrier"})


class MeshFormatError(ValueError):
    """Malformed mesh file (carries a line number when available)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MeshTopologyError(ValueError):
    """Non-conforming or otherwise invalid mesh topology."""


class Mesh:
    """Immutable 2D mesh of triangles and axis-aligned quadrilaterals.

    Attributes:
        verts: (Nv, 2) vertex coordinates in meters.
        elem_verts: (Ne, 4) vertex ids, -1 padded; counterclockwise.
        elem_nv: (Ne,) number of vertices per element (3 or 4).
        centroids: (Ne, 2), areas: (Ne,).
        face_verts: (Nf, 2) endpoint vertex ids.
        face_eplus / face_eminus: incident elements; eminus == -1 on boundary.
        face_normals: (Nf, 2) unit normals from E+ to E- (outward on boundary).
        face_lengths, face_midpoints: per-face geometry.
        face_tag: (Nf,) index into `tag_names`; 0 is the interior tag.
        elem_faces: (Ne, 4) face ids per element, -1 padded.
        elem_face_sign: (Ne, 4) +1 where the element is E+, -1 where E-.
        patch_ptr / patch_elems: CSR layout of vertex -> incident element ids.
    """

    def __init__(self, verts, elements, edge_tags=None, default_boundary_tag="untagged"):
        """Build topology from vertices and element connectivity.

        edge_tags maps a frozenset/tuple of two vertex ids to a tag string.
        Interior edges may only carry barrier tags (they get duplicated);
        anything else on an interior edge is a topology error.
        """
        self.verts = np.asarray(verts, dtype=float)
        if self.verts.ndim != 2 or self.verts.shape[1] != 2:
            raise ValueError("verts must be (Nv, 2)")
        nv_total = len(self.verts)

        elems = []
        for k, e in enumerate(elements):
            e = [int(v) for v in e]
            if len(e) not in (3, 4):
                raise MeshTopologyError(f"element {k}: needs 3 or 4 vertices, got {len(e)}")
            if len(set(e)) != len(e):
                raise MeshTopologyError(f"element {k}: repeated vertex")
            if min(e) < 0 or max(e) >= nv_total:
                raise MeshTopologyError(f"element {k}: vertex id out of range")
            elems.append(e)
        if not elems:
            raise MeshTopologyError("mesh has no elements")

        seen = {}
        for k, e in enumerate(elems):
            key = frozenset(e)
            if key in seen:
                raise MeshTopologyError(f"duplicate element: {seen[key]} and {k}")
            seen[key] = k

        ne = len(elems)
        self.elem_nv = np.array([len(e) for e in elems], dtype=np.int64)
        self.elem_verts = np.full((ne, 4), -1, dtype=np.int64)
        for k, e in enumerate(elems):
            area2 = _signed_area2(self.verts[e])
            if abs(area2) < 1e-300:
                raise MeshTopologyError(f"element {k}: degenerate (zero area)")
            if area2 < 0:
                e = e[::-1]
            self.elem_verts[k, : len(e)] = e

        self.centroids = np.zeros((ne, 2))
        self.areas = np.zeros(ne)
        for k in range(ne):
            ev = self.elem_verts[k, : self.elem_nv[k]]
            c, a = _polygon_centroid_area(self.verts[ev])
            self.centroids[k] = c
            self.areas[k] = a

        edge_tags = dict(edge_tags or {})
        edge_tags = {frozenset(k): v for k, v in edge_tags.items()}

        self._build_faces(elems, edge_tags, default_boundary_tag)
        self._build_patches()
        self._validate_conformity()
        self._freeze()

    # ------------------------------------------------------------------
    def _build_faces(self, elems, edge_tags, default_boundary_tag):
        ne = len(elems)
        edge_use = {}  # frozenset(v0,v1) -> list of (elem, local_edge)
        for k, e in enumerate(elems):
            n = len(e)
            verts_ccw = list(self.elem_verts[k, :n])
            for le in range(n):
                key = frozenset((verts_ccw[le], verts_ccw[(le + 1) % n]))
                edge_use.setdefault(key, []).append((k, le))

        for key, uses in edge_use.items():
            if len(uses) > 2:
                raise MeshTopologyError(f"edge {sorted(key)} shared by {len(uses)} elements")

        tag_names = [INTERIOR_TAG]
        tag_index = {INTERIOR_TAG: 0}

        def tag_id(name):
            if name not in tag_index:
                tag_index[name] = len(tag_names)
                tag_names.append(name)
            return tag_index[name]

        fv, fep, fem, ftag = [], [], [], []
        # deterministic face ordering: sweep elements, then local edges
        emitted = set()
        for k in range(ne):
            n = self.elem_nv[k]
            verts_ccw = list(self.elem_verts[k, :n])
            for le in range(n):
                a, b = verts_ccw[le], verts_ccw[(le + 1) % n]
                key = frozenset((a, b))
                if key in emitted:
                    continue
                emitted.add(key)
                uses = edge_use[key]
                tag = edge_tags.get(key)
                if len(uses) == 2:
                    if tag is None:
                        fv.append((a, b))
                        fep.append(uses[0][0])
                        fem.append(uses[1][0])
                        ftag.append(0)
                    elif tag in BARRIER_TAGS:
                        # duplicate: one boundary face per side
                        for (elem, lidx) in uses:
                            nn = self.elem_nv[elem]
                            vc = list(self.elem_verts[elem, :nn])
                            aa, bb = vc[lidx], vc[(lidx + 1) % nn]
                            fv.append((aa, bb))
                            fep.append(elem)
                            fem.append(-1)
                            ftag.append(tag_id(tag))
                    else:
                        raise MeshTopologyError(
                            f"interior edge {sorted(key)} tagged '{tag}' (only barrier tags may sit on interior edges)"
                        )
                else:
                    (elem, lidx) = uses[0]
                    fv.append((a, b))
                    fep.append(elem)
                    fem.append(-1)
                    ftag.append(tag_id(tag if tag is not None else default_boundary_tag))

        nf = len(fv)
        self.face_verts = np.array(fv, dtype=np.int64).reshape(nf, 2)
        self.face_eplus = np.array(fep, dtype=np.int64)
        self.face_eminus = np.array(fem, dtype=np.int64)
        self.face_tag = np.array(ftag, dtype=np.int64)
        self.tag_names = tuple(tag_names)

        p0 = self.verts[self.face_verts[:, 0]]
        p1 = self.verts[self.face_verts[:, 1]]
        d = p1 - p0
        self.face_lengths = np.hypot(d[:, 0], d[:, 1])
        self.face_midpoints = 0.5 * (p0 + p1)
        # face vertex order follows the CCW traversal of E+, so the outward
        # normal of E+ is the tangent rotated by -90 degrees
        self.face_normals = np.column_stack((d[:, 1], -d[:, 0])) / self.face_lengths[:, None]

        self.elem_faces = np.full((len(elems), 4), -1, dtype=np.int64)
        self.elem_face_sign = np.zeros((len(elems), 4))
        slot = np.zeros(len(elems), dtype=np.int64)
        for f in range(nf):
            ep, em = self.face_eplus[f], self.face_eminus[f]
            self.elem_faces[ep, slot[ep]] = f
            self.elem_face_sign[ep, slot[ep]] = 1.0
            slot[ep] += 1
            if em >= 0:
                self.elem_faces[em, slot[em]] = f
                self.elem_face_sign[em, slot[em]] = -1.0
                slot[em] += 1
        if not np.array_equal(slot, self.elem_nv):
            raise MeshTopologyError("face/element incidence mismatch")

    def _build_patches(self):
        counts = np.zeros(len(self.verts), dtype=np.int64)
        for k in range(self.n_elements):
            for v in self.elem_verts[k, : self.elem_nv[k]]:
                counts[v] += 1
        self.patch_ptr = np.zeros(len(self.verts) + 1, dtype=np.int64)
        np.cumsum(counts, out=self.patch_ptr[1:])
        self.patch_elems = np.zeros(self.patch_ptr[-1], dtype=np.int64)
        fill = self.patch_ptr[:-1].copy()
        for k in range(self.n_elements):
            for v in self.elem_verts[k, : self.elem_nv[k]]:
                self.patch_elems[fill[v]] = k
                fill[v] += 1

    def _validate_conformity(self):
        # hanging node: a vertex that lies strictly inside a boundary-side edge
        bidx = np.where(self.face_eminus < 0)[0]
        if len(bidx) == 0:
            return
        used = np.zeros(len(self.verts), dtype=bool)
        for k in range(self.n_elements):
            used[self.elem_verts[k, : self.elem_nv[k]]] = True
        pts = self.verts[used]
        ids = np.where(used)[0]
        for f in bidx:
            a, b = self.face_verts[f]
            p0, p1 = self.verts[a], self.verts[b]
            d = p1 - p0
            L2 = d @ d
            t = ((pts - p0) @ d) / L2
            off = pts - (p0 + np.clip(t, 0, 1)[:, None] * d)
            dist = np.hypot(off[:, 0], off[:, 1])
            inside = (t > 1e-9) & (t < 1 - 1e-9) & (dist < 1e-9 * np.sqrt(L2))
            inside &= (ids != a) & (ids != b)
            if np.any(inside):
                v = ids[np.argmax(inside)]
                raise MeshTopologyError(
                    f"hanging node: vertex {v} lies inside edge ({a},{b})"
                )

    def _freeze(self):
        for arr in (
            self.verts, self.elem_verts, self.elem_nv, self.centroids, self.areas,
            self.face_verts, self.face_eplus, self.face_eminus, self.face_tag,
            self.face_lengths, self.face_midpoints, self.face_normals,
            self.elem_faces, self.elem_face_sign, self.patch_ptr, self.patch_elems,
        ):
            arr.setflags(write=False)

    # ------------------------------------------------------------------
    @property
    def n_elements(self):
        return len(self.elem_nv)

    @property
    def n_faces(self):
        return len(self.face_eplus)

    @property
    def n_vertices(self):
        return len(self.verts)

    @property
    def interior_faces(self):
        return np.where(self.face_eminus >= 0)[0]

    @property
    def boundary_faces(self):
        return np.where(self.face_eminus < 0)[0]

    def faces_with_tag(self, name):
        if name not in self.tag_names:
            return np.array([], dtype=np.int64)
        return np.where(self.face_tag == self.tag_names.index(name))[0]

    def face_tag_name(self, f):
        return self.tag_names[self.face_tag[f]]

    def vertex_patch(self, v):
        """Element ids incident to vertex v."""
        return self.patch_elems[self.patch_ptr[v]: self.patch_ptr[v + 1]]

    def element_vertices(self, e):
        return self.elem_verts[e, : self.elem_nv[e]]

    def outward_normal(self, e, f):
        """Outward unit normal of element e on its face f."""
        sl = np.where(self.elem_faces[e] == f)[0]
        if len(sl) == 0:
            raise ValueError(f"face {f} not on element {e}")
        return self.face_normals[f] * self.elem_face_sign[e, sl[0]]

    def locate(self, points, tol=1e-10):
        """Element id containing each point (ties resolved to the lowest id).

        Brute force over elements; meant for profile extraction, not inner
        loops.  Returns -1 for points outside the mesh.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.full(len(points), -1, dtype=np.int64)
        for k in range(self.n_elements):
            todo = out < 0
            if not np.any(todo):
                break
            ev = self.element_vertices(k)
            poly = self.verts[ev]
            inside = _points_in_convex_polygon(points[todo], poly, tol)
            idx = np.where(todo)[0][inside]
            out[idx] = k
        return out


# ----------------------------------------------------------------------
# geometry helpers

def _signed_area2(poly):
    x, y = poly[:, 0], poly[:, 1]
    return float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _polygon_centroid_area(poly):
    x, y = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = 0.5 * cross.sum()
    cx = ((x + xn) * cross).sum() / (6 * a)
    cy = ((y + yn) * cross).sum() / (6 * a)
    return np.array((cx, cy)), a


def _points_in_convex_polygon(points, poly, tol):
    inside = np.ones(len(points), dtype=bool)
    n = len(poly)
    scale = max(np.ptp(poly[:, 0]), np.ptp(poly[:, 1]))
    for i in range(n):
        p0, p1 = poly[i], poly[(i + 1) % n]
        d = p1 - p0
        cross = d[0] * (points[:, 1] - p0[1]) - d[1] * (points[:, 0] - p0[0])
        inside &= cross >= -tol * scale * np.hypot(*d)
    return inside


# ----------------------------------------------------------------------
# structured builders

def _check_grid_args(nx, ny, bounds):
    if nx < 1 or ny < 1:
        raise ValueError(f"grid must have at least one cell per axis, got {nx}x{ny}")
    x0, y0, x1, y1 = map(float, bounds)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate bounds {bounds}")
    return x0, y0, x1, y1


def _side_tags(nx, ny, x0, y0, x1, y1, vert_id):
    tags = {}
    for i in range(nx):
        tags[frozenset((vert_id(i, 0), vert_id(i + 1, 0)))] = "bottom"
        tags[frozenset((vert_id(i, ny), vert_id(i + 1, ny)))] = "top"
    for j in range(ny):
        tags[frozenset((vert_id(0, j), vert_id(0, j + 1)))] = "left"
        tags[frozenset((vert_id(nx, j), vert_id(nx, j + 1)))] = "right"
    return tags


def build_structured_quad(nx, ny, bounds):
    """Uniform axis-aligned quadrilateral mesh on the rectangle `bounds`.

    bounds = (xmin, ymin, xmax, ymax).  Boundary faces are tagged
    left/right/bottom/top.
    """
    x0, y0, x1, y1 = _check_grid_args(nx, ny, bounds)
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack((xx.ravel(), yy.ravel()))

    def vid(i, j):
        return i * (ny + 1) + j

    elems = []
    for i in range(nx):
        for j in range(ny):
            elems.append((vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)))
    tags = _side_tags(nx, ny, x0, y0, x1, y1, vid)
    return Mesh(verts, elems, edge_tags=tags)


def build_crossed_triangles(nx, ny, bounds):
    """Crossed triangular mesh: each cell split into 4 about its centroid."""
    x0, y0, x1, y1 = _check_grid_args(nx, ny, bounds)
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    grid = np.column_stack((xx.ravel(), yy.ravel()))

    def vid(i, j):
        return i * (ny + 1) + j

    centers = []
    cid = {}
    base = len(grid)
    for i in range(nx):
        for j in range(ny):
            cid[(i, j)] = base + len(centers)
            centers.append((0.5 * (xs[i] + xs[i + 1]), 0.5 * (ys[j] + ys[j + 1])))
    verts = np.vstack((grid, np.array(centers)))

    elems = []
    for i in range(nx):
        for j in range(ny):
            c = cid[(i, j)]
            v00, v10 = vid(i, j), vid(i + 1, j)
            v11, v01 = vid(i + 1, j + 1), vid(i, j + 1)
            elems.append((v00, v10, c))  # bottom
            elems.append((v10, v11, c))  # right
            elems.append((v11, v01, c))  # top
            elems.append((v01, v00, c))  # left
    tags = _side_tags(nx, ny, x0, y0, x1, y1, vid)
    return Mesh(verts, elems, edge_tags=tags)


def build_structured_triangles(nx, ny, bounds):
    """Diagonal-split triangular mesh: each cell split into 2 (left diagonal)."""
    x0, y0, x1, y1 = _check_grid_args(nx, ny, bounds)
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack((xx.ravel(), yy.ravel()))

    def vid(i, j):
        return i * (ny + 1) + j

    elems = []
    for i in range(nx):
        for j in range(ny):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v11, v01 = vid(i + 1, j + 1), vid(i, j + 1)
            elems.append((v00, v10, v11))
            elems.append((v00, v11, v01))
    tags = _side_tags(nx, ny, x0, y0, x1, y1, vid)
    return Mesh(verts, elems, edge_tags=tags)


# ----------------------------------------------------------------------
# readers / writers

def import_mesh(text):
    """Parse a mesh from text: native ASCII format or Gmsh v2.2 ASCII subset."""
    stripped = text.lstrip()
    if stripped.startswith("$MeshFormat"):
        return _parse_gmsh22(text)
    if stripped.startswith("nodes"):
        return _parse_native(text)
    raise MeshFormatError("unrecognized mesh format (expected 'nodes ...' or '$MeshFormat')", line=1)


def _parse_native(text):
    lines = text.splitlines()
    idx = 0

    def next_line():
        nonlocal idx
        while idx < len(lines):
            ln = lines[idx].strip()
            idx += 1
            if ln and not ln.startswith("#"):
                return ln, idx
        return None, idx

    header, hline = next_line()
    if header is None:
        raise MeshFormatError("empty mesh file", line=1)
    parts = header.split()
    if len(parts) != 6 or parts[0] != "nodes" or parts[2] != "elements" or parts[4] != "faces_tagged":
        raise MeshFormatError("header must be 'nodes N elements M faces_tagged K'", line=hline)
    try:
        n_nodes, n_elems, n_tagged = int(parts[1]), int(parts[3]), int(parts[5])
    except ValueError:
        raise MeshFormatError("non-integer counts in header", line=hline) from None

    verts = np.zeros((n_nodes, 2))
    for k in range(n_nodes):
        ln, lno = next_line()
        if ln is None:
            raise MeshFormatError(f"expected {n_nodes} node lines, file ended at {k}", line=len(lines))
        p = ln.split()
        if len(p) != 2:
            raise MeshFormatError(f"node line needs 'x y', got {ln!r}", line=lno)
        try:
            verts[k] = (float(p[0]), float(p[1]))
        except ValueError:
            raise MeshFormatError(f"bad coordinate in {ln!r}", line=lno) from None

    elems = []
    for k in range(n_elems):
        ln, lno = next_line()
        if ln is None:
            raise MeshFormatError(f"expected {n_elems} element lines, file ended at {k}", line=len(lines))
        p = ln.split()
        kind = p[0]
        want = {"tri": 3, "quad": 4}.get(kind)
        if want is None:
            raise MeshFormatError(f"element type must be tri or quad, got {kind!r}", line=lno)
        if len(p) != want + 1:
            raise MeshFormatError(f"{kind} element needs {want} vertex ids", line=lno)
        try:
            elems.append(tuple(int(v) for v in p[1:]))
        except ValueError:
            raise MeshFormatError(f"bad vertex id in {ln!r}", line=lno) from None

    tags = {}
    for k in range(n_tagged):
        ln, lno = next_line()
        if ln is None:
            raise MeshFormatError(f"expected {n_tagged} tagged-face lines, file ended at {k}", line=len(lines))
        p = ln.split()
        if len(p) != 3:
            raise MeshFormatError("tagged face line needs 'v_a v_b tag'", line=lno)
        try:
            a, b = int(p[0]), int(p[1])
        except ValueError:
            raise MeshFormatError(f"bad vertex id in {ln!r}", line=lno) from None
        tags[frozenset((a, b))] = p[2]

    return Mesh(verts, elems, edge_tags=tags)


def _parse_gmsh22(text):
    lines = text.splitlines()
    sections = {}
    i = 0
    while i < len(lines):
        ln = lines[i].strip()
        if ln.startswith("$") and not ln.startswith("$End"):
            name = ln[1:]
            j = i + 1
            body = []
            while j < len(lines) and not lines[j].strip().startswith("$End"):
                body.append((lines[j].strip(), j + 1))
                j += 1
            if j >= len(lines):
                raise MeshFormatError(f"unterminated section ${name}", line=i + 1)
            sections[name] = body
            i = j + 1
        else:
            i += 1

    if "MeshFormat" not in sections or not sections["MeshFormat"]:
        raise MeshFormatError("missing $MeshFormat", line=1)
    ver = sections["MeshFormat"][0][0].split()[0]
    if not ver.startswith("2."):
        raise MeshFormatError(f"only Gmsh v2.x ASCII supported, got {ver}", line=sections["MeshFormat"][0][1])

    names = {}
    for ln, lno in sections.get("PhysicalNames", [])[1:]:
        p = ln.split()
        if len(p) >= 3:
            names[int(p[1])] = p[2].strip('"')

    if "Nodes" not in sections:
        raise MeshFormatError("missing $Nodes")
    body = sections["Nodes"]
    n_nodes = int(body[0][0])
    id_map = {}
    verts = np.zeros((n_nodes, 2))
    for k, (ln, lno) in enumerate(body[1: 1 + n_nodes]):
        p = ln.split()
        if len(p) < 3:
            raise MeshFormatError(f"node line needs 'id x y z', got {ln!r}", line=lno)
        id_map[int(p[0])] = k
        verts[k] = (float(p[1]), float(p[2]))

    if "Elements" not in sections:
        raise MeshFormatError("missing $Elements")
    body = sections["Elements"]
    n_entries = int(body[0][0])
    elems, tags = [], {}
    for ln, lno in body[1: 1 + n_entries]:
        p = [int(v) for v in ln.split()]
        etype, ntags = p[1], p[2]
        phys = p[3] if ntags >= 1 else 0
        nodes = p[3 + ntags:]
        if etype == 1:  # 2-node line: boundary tag
            a, b = id_map[nodes[0]], id_map[nodes[1]]
            tags[frozenset((a, b))] = names.get(phys, str(phys))
        elif etype == 2:
            elems.append(tuple(id_map[n] for n in nodes[:3]))
        elif etype == 3:
            elems.append(tuple(id_map[n] for n in nodes[:4]))
        elif etype == 15:  # point elements: ignore
            continue
        else:
            raise MeshFormatError(f"unsupported gmsh element type {etype}", line=lno)

    return Mesh(verts, elems, edge_tags=tags)


def native_mesh_text(mesh_or_parts, edge_tags=None):
    """Serialize (verts, elems) or a Mesh into the native ASCII format."""
    if isinstance(mesh_or_parts, Mesh):
        m = mesh_or_parts
        verts = np.asarray(m.verts)
        elems = [list(m.element_vertices(k)) for k in range(m.n_elements)]
        if edge_tags is None:
            edge_tags = {}
            for f in m.boundary_faces:
                a, b = m.face_verts[f]
                edge_tags[frozenset((int(a), int(b)))] = m.face_tag_name(f)
    else:
        verts, elems = mesh_or_parts
        verts = np.asarray(verts, dtype=float)
        edge_tags = {frozenset(k): v for k, v in (edge_tags or {}).items()}

    out = [f"nodes {len(verts)} elements {len(elems)} faces_tagged {len(edge_tags)}"]
    for x, y in verts:
        out.append(f"{x!r} {y!r}")
    for e in elems:
        kind = "tri" if len(e) == 3 else "quad"
        out.append(kind + " " + " ".join(str(int(v)) for v in e))
    for key in sorted(edge_tags, key=sorted):
        a, b = sorted(key)
        out.append(f"{a} {b} {edge_tags[key]}")
    return "\n".join(out) + "\n"


def crossed_mesh_with_barrier(nx, ny, bounds, segment, tag="barrier"):
    """Crossed-triangle mesh text with interior edges on `segment` tagged.

    segment = (x0, y0, x1, y1) must lie along grid edges; the tagged edges are
    duplicated into no-flow boundary faces when the text is imported.
    """
    base = build_crossed_triangles(nx, ny, bounds)
    p0 = np.array(segment[:2], dtype=float)
    p1 = np.array(segment[2:], dtype=float)
    d = p1 - p0
    L = np.hypot(*d)
    if L <= 0:
        raise ValueError("degenerate barrier segment")
    edge_tags = {}
    for f in base.interior_faces:
        a, b = base.face_verts[f]
        pa, pb = base.verts[a], base.verts[b]
        ok = True
        for p in (pa, pb):
            t = (p - p0) @ d / L**2
            off = p - (p0 + t * d)
            if not (-1e-9 <= t <= 1 + 1e-9 and np.hypot(*off) <= 1e-9 * L):
                ok = False
                break
        if ok:
            edge_tags[frozenset((int(a), int(b)))] = tag
    if not edge_tags:
        raise ValueError("barrier segment does not lie on any interior edge")
    for f in base.boundary_faces:
        a, b = base.face_verts[f]
        edge_tags[frozenset((int(a), int(b)))] = base.face_tag_name(f)
    verts = base.verts
    elems = [list(base.element_vertices(k)) for k in range(base.n_elements)]
    return native_mesh_text((verts, elems), edge_tags)
