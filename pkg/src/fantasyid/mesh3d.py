"""Triangle meshes, spiral neighbourhoods, spiral convolution, decimation and the
vertex-token encoder for the 3D identity path."""
from __future__ import annotations

import hashlib
import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .numerics import ContractError, DimensionError, Linear, check_finite


class MeshError(ValueError):
    pass


class DecimationError(MeshError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray  # (N, 3) float64
    faces: np.ndarray  # (F, 3) int64, counter-clockwise seen from outside

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.ascontiguousarray(self.vertices, dtype=np.float64))
        object.__setattr__(self, "faces", np.ascontiguousarray(self.faces, dtype=np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def validate(self) -> "TriangleMesh":
        n = self.n_vertices
        f = self.faces
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError(f"vertices must be N x 3, got {self.vertices.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must be F x 3, got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= n):
            raise MeshError("face index out of range")
        degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if degenerate.any():
            raise MeshError(f"degenerate face {int(np.argmax(degenerate))}")
        used = np.zeros(n, bool)
        used[f.ravel()] = True
        if not used.all():
            raise MeshError(f"vertex {int(np.argmin(used))} is not referenced by any face")
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        if counts.max(initial=0) > 2:
            raise MeshError("edge shared by more than two faces")
        return self

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.vertices.astype("<f8").tobytes())
        h.update(self.faces.astype("<i8").tobytes())
        return h.hexdigest()

    def topology_hash(self) -> str:
        return hashlib.sha256(self.faces.astype("<i8").tobytes()).hexdigest()


@dataclass(frozen=True, eq=False)
class SpiralTable:
    indices: np.ndarray  # (N, S); entries equal to N are padding
    length: int

    @property
    def pad_marker(self) -> int:
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class DownsampleMap:
    parent_of: np.ndarray  # coarse vertex -> representative fine vertex
    coarse: TriangleMesh


@dataclass(frozen=True)
class Camera:
    scale: float
    image_size: tuple[int, int]
    principal: tuple[float, float]

    def __post_init__(self):
        if self.scale <= 0:
            raise ContractError("camera scale must be positive")


# --------------------------------------------------------------------------- generators


def icosphere(subdivisions: int = 3) -> TriangleMesh:
    """Unit icosphere; 10 * 4**s + 2 vertices (642 at s=3). Mirror-symmetric in x."""
    phi = (1 + math.sqrt(5)) / 2
    verts = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
             (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
             (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, float) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    mesh = TriangleMesh(np.array(v), np.array(faces))
    return orient_outward(mesh)


def orient_outward(mesh: TriangleMesh) -> TriangleMesh:
    """Flip faces whose normal points toward the centroid (star-shaped meshes only)."""
    v, f = mesh.vertices, mesh.faces.copy()
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    inward = np.einsum("ij,ij->i", n, v[f].mean(1) - v.mean(0)) < 0
    f[inward] = f[inward][:, [0, 2, 1]]
    return TriangleMesh(v, f)


def tetrahedron() -> TriangleMesh:
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], float)
    return orient_outward(TriangleMesh(v, np.array([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]])))


def octahedron() -> TriangleMesh:
    v = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)
    f = [(a, b, c) for a in (0, 1) for b in (2, 3) for c in (4, 5)]
    return orient_outward(TriangleMesh(v, np.array(f)))


def icosahedron() -> TriangleMesh:
    return icosphere(0)


# --------------------------------------------------------------------------- spirals


def _ccw_next(mesh: TriangleMesh) -> list[dict[int, int]]:
    """Per vertex, map neighbour -> next neighbour counter-clockwise."""
    nxt: list[dict[int, int]] = [dict() for _ in range(mesh.n_vertices)]
    for a, b, c in mesh.faces.tolist():
        for u, x, y in ((a, b, c), (b, c, a), (c, a, b)):
            if x in nxt[u]:
                raise MeshError(f"non-manifold or inconsistently oriented fan at vertex {u}")
            nxt[u][x] = y
    return nxt


def ordered_ring(nxt: dict[int, int], v: int) -> list[int]:
    """Neighbours of ``v`` counter-clockwise, starting at the smallest index."""
    nbrs = set(nxt) | set(nxt.values())
    start = min(nbrs)
    order = [start]
    cur = start
    while cur in nxt and nxt[cur] != start:
        cur = nxt[cur]
        if cur in order:
            raise MeshError(f"non-manifold vertex {v}")
        order.append(cur)
    if len(order) < len(nbrs):
        # open fan: walk backwards from the start for the remainder
        prev = {y: x for x, y in nxt.items()}
        cur = start
        while cur in prev and prev[cur] not in order:
            cur = prev[cur]
            order.append(cur)
    if len(order) != len(nbrs):
        raise MeshError(f"non-manifold vertex {v}: neighbours form several fans")
    return order


def build_spirals(mesh: TriangleMesh, length: int) -> SpiralTable:
    """Spiral per vertex: ``[v, ring 1, ring 2, ...]`` truncated or padded to ``length``.

    Ring 1 is the counter-clockwise 1-ring starting at its smallest index. Ring k is
    collected by walking ring k-1 in order and appending each member's unvisited
    neighbours in that member's counter-clockwise order; the result is then
    rotated to start at its smallest index.
    """
    if length < 1:
        raise ContractError("spiral length must be >= 1")
    n = mesh.n_vertices
    nxt = _ccw_next(mesh)
    rings = [ordered_ring(nxt[u], u) for u in range(n)]
    out = np.full((n, length), n, dtype=np.int64)
    for v in range(n):
        spiral = [v]
        seen = {v}
        ring = [v]
        while len(spiral) < length and ring:
            new = []
            for u in ring:
                for w in rings[u]:
                    if w not in seen:
                        seen.add(w)
                        new.append(w)
            if new:
                k = new.index(min(new))
                new = new[k:] + new[:k]
            spiral.extend(new)
            ring = new
        spiral = spiral[:length]
        out[v, : len(spiral)] = spiral
    return SpiralTable(out, length)


def spirals_cached(mesh: TriangleMesh, length: int, cache_dir: str | Path | None) -> SpiralTable:
    """``build_spirals`` with an ``.npy`` sidecar named by the mesh content hash."""
    if cache_dir is None:
        return build_spirals(mesh, length)
    path = Path(cache_dir) / f"spirals_{mesh.content_hash()[:16]}_S{length}.npy"
    if path.exists():
        return SpiralTable(np.load(path), length)
    table = build_spirals(mesh, length)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, table.indices)
    return table


def spiral_conv(feats: torch.Tensor, spirals: SpiralTable | torch.Tensor, w: torch.Tensor,
                bias: torch.Tensor | None = None) -> torch.Tensor:
    """out[v] = w @ concat(feats[spiral[v]]) + bias; padding gathers zeros.

    feats: (N, C_in) or (B, N, C_in); w: (C_out, S * C_in).
    """
    idx = spirals.indices if isinstance(spirals, SpiralTable) else spirals
    idx = torch.as_tensor(idx, dtype=torch.long)
    n, s = idx.shape
    unbatched = feats.dim() == 2
    if unbatched:
        feats = feats.unsqueeze(0)
    b, n_f, c = feats.shape
    if n_f != n:
        raise DimensionError(f"spiral_conv: {n_f} feature rows vs {n} spirals")
    if w.shape[1] != s * c:
        raise DimensionError(f"spiral_conv: weight {tuple(w.shape)} expects S*C_in = {s * c}")
    padded = torch.cat([feats, feats.new_zeros(b, 1, c)], dim=1)
    gathered = padded[:, idx.reshape(-1)].reshape(b, n, s * c)
    out = gathered @ w.t()
    if bias is not None:
        out = out + bias
    if unbatched:
        out = out.squeeze(0)
    return check_finite(out, "spiral_conv")


# --------------------------------------------------------------------------- decimation


def _face_normal(p: np.ndarray, a: int, b: int, c: int) -> np.ndarray:
    return np.cross(p[b] - p[a], p[c] - p[a])


def decimate(mesh: TriangleMesh, target_n: int, start_res: int = 64, shrink: float = 1.25) -> DownsampleMap:
    """Greedy vertex clustering on a uniform grid, coarsened until exactly ``target_n``
    vertices survive.

    At each grid resolution, edges whose endpoints share a cell are contracted onto
    the lower-index endpoint, shortest first. A contraction is skipped if it breaks
    the link condition or flips an incident face, so the coarse mesh stays
    manifold. Survivors keep their original positions.
    """
    mesh.validate()
    n = mesh.n_vertices
    if not 4 <= target_n < n:
        raise ContractError(f"decimate: need 4 <= target_n < {n}, got {target_n}")
    pos = mesh.vertices
    faces: dict[int, list[int]] = {i: list(f) for i, f in enumerate(mesh.faces.tolist())}
    vfaces: list[set[int]] = [set() for _ in range(n)]
    for i, f in faces.items():
        for u in f:
            vfaces[u].add(i)
    alive = np.ones(n, bool)
    count = n

    def nbrs(u: int) -> set[int]:
        s = set()
        for fi in vfaces[u]:
            s.update(faces[fi])
        s.discard(u)
        return s

    def try_collapse(keep: int, drop: int) -> bool:
        shared = vfaces[keep] & vfaces[drop]
        if len(shared) != 2:
            return False
        opposite = set()
        for fi in shared:
            opposite.update(faces[fi])
        opposite -= {keep, drop}
        if nbrs(keep) & nbrs(drop) != opposite:
            return False
        for fi in vfaces[drop] - shared:
            f = faces[fi]
            g = [keep if u == drop else u for u in f]
            n0 = _face_normal(pos, *f)
            n1 = _face_normal(pos, *g)
            if np.dot(n0, n1) <= 0 or np.linalg.norm(n1) < 1e-12:
                return False
        for fi in shared:
            for u in faces[fi]:
                vfaces[u].discard(fi)
            del faces[fi]
        for fi in list(vfaces[drop]):
            faces[fi] = [keep if u == drop else u for u in faces[fi]]
            vfaces[keep].add(fi)
        vfaces[drop] = set()
        alive[drop] = False
        return True

    lo = pos.min(0)
    extent = float((pos.max(0) - lo).max()) or 1.0
    res = float(start_res)
    while count > target_n:
        cells = np.floor((pos - lo) / extent * res * (1 - 1e-9)).astype(np.int64)
        heap = []
        for fi, f in faces.items():
            for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                if a < b and (cells[a] == cells[b]).all():
                    heapq.heappush(heap, (float(np.linalg.norm(pos[a] - pos[b])), a, b))
        while heap and count > target_n:
            _, a, b = heapq.heappop(heap)
            if alive[a] and alive[b] and b in nbrs(a):
                if try_collapse(a, b):
                    count -= 1
        if res <= 1.0:
            if count > target_n:
                raise DecimationError(
                    f"cannot reach {target_n} vertices without breaking manifoldness (stuck at {count})"
                )
            break
        res = max(1.0, res / shrink)

    parent_of = np.flatnonzero(alive)
    remap = np.full(n, -1, np.int64)
    remap[parent_of] = np.arange(len(parent_of))
    coarse_faces = remap[np.array([faces[i] for i in sorted(faces)], dtype=np.int64)]
    coarse = TriangleMesh(pos[parent_of], coarse_faces).validate()
    return DownsampleMap(parent_of, coarse)


# --------------------------------------------------------------------------- projection / encoding


def project_depth(mesh: TriangleMesh | np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Weak-perspective projection. The camera looks along +z, so smaller depth is nearer."""
    v = mesh.vertices if isinstance(mesh, TriangleMesh) else np.asarray(mesh, float)
    uv = camera.scale * v[:, :2] + np.asarray(camera.principal, float)
    return uv, v[:, 2].copy()


def depth_pos_encoding(depth: torch.Tensor | np.ndarray, channels: int) -> torch.Tensor:
    """Sinusoidal code of min-max normalised depth; channel 2i = sin(d / 10000**(2i/C))."""
    if channels % 2:
        raise ConfigError(f"depth encoding needs an even channel count, got {channels}")
    d = torch.as_tensor(depth)
    if not d.is_floating_point():
        d = d.to(torch.float64)
    lo = d.min(dim=-1, keepdim=True).values
    hi = d.max(dim=-1, keepdim=True).values
    span = hi - lo
    flat = span <= 1e-12 * (1 + hi.abs())
    d = torch.where(flat, torch.full_like(d, 0.5), (d - lo) / torch.where(flat, torch.ones_like(span), span))
    i = torch.arange(channels // 2, dtype=d.dtype)
    freq = 10000.0 ** (-2 * i / channels)
    ang = d.unsqueeze(-1) * freq
    out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)
    return out.reshape(*d.shape, channels)


def canonicalize(v: torch.Tensor, eye_idx: tuple[int, int] | None = None) -> torch.Tensor:
    """Centroid-centred coordinates scaled to unit inter-ocular distance (RMS radius
    when no eye vertices are known)."""
    c = v - v.mean(dim=-2, keepdim=True)
    if eye_idx is not None:
        scale = (c[..., eye_idx[0], :] - c[..., eye_idx[1], :]).norm(dim=-1)
    else:
        scale = c.pow(2).sum(-1).mean(-1).sqrt()
    return c / scale[..., None, None]


class SpiralLayer(nn.Module):
    def __init__(self, c_in: int, c_out: int, spirals: SpiralTable):
        super().__init__()
        self.register_buffer("spirals", torch.as_tensor(spirals.indices), persistent=False)
        self.lin = Linear(c_in * spirals.length, c_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return spiral_conv(x, self.spirals, self.lin.weight, self.lin.bias)


@dataclass
class MeshHierarchy:
    """Precomputed spiral tables and decimation maps for one mesh topology."""

    meshes: list[TriangleMesh]
    spirals: list[SpiralTable]
    parents: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def build(cls, template: TriangleMesh, levels: list[int], spiral_len: int,
              cache_dir: str | Path | None = None) -> "MeshHierarchy":
        meshes, parents = [template], []
        for n_target in levels:
            dm = decimate(meshes[-1], n_target)
            parents.append(dm.parent_of)
            meshes.append(dm.coarse)
        spirals = [spirals_cached(m, spiral_len, cache_dir) for m in meshes]
        return cls(meshes, spirals, parents)

    @property
    def coarse_index(self) -> np.ndarray:
        """Fine-mesh index of every coarsest-level vertex."""
        idx = np.arange(self.meshes[0].n_vertices)
        for p in self.parents:
            idx = idx[p]
        return idx


class VertexEncoder(nn.Module):
    """Spiral-conv stack over the fine mesh, decimation gathers to the coarse level,
    then ``X_V = X_V' + E_dep`` on the coarse vertices."""

    def __init__(self, hierarchy: MeshHierarchy, channels: int = 32, hidden: int = 16,
                 eye_idx: tuple[int, int] | None = None):
        super().__init__()
        if channels % 2:
            raise ConfigError("vertex token channels must be even")
        self.channels = channels
        self.eye_idx = eye_idx
        self.topology = hierarchy.meshes[0].topology_hash()
        self.n_fine = hierarchy.meshes[0].n_vertices
        self.n_coarse = hierarchy.meshes[-1].n_vertices
        levels = len(hierarchy.meshes)
        widths = [3] + [hidden] * (levels - 1) + [channels]
        self.convs = nn.ModuleList()
        for i in range(levels - 1):
            self.convs.append(SpiralLayer(widths[i], widths[i + 1], hierarchy.spirals[i]))
        self.head_in = SpiralLayer(widths[levels - 1], channels, hierarchy.spirals[-1])
        self.head_out = SpiralLayer(channels, channels, hierarchy.spirals[-1])
        for i, p in enumerate(hierarchy.parents):
            self.register_buffer(f"parent{i}", torch.as_tensor(p), persistent=False)
        self.register_buffer("coarse_index", torch.as_tensor(hierarchy.coarse_index), persistent=False)

    def check_topology(self, mesh: TriangleMesh) -> None:
        if mesh.n_vertices != self.n_fine or mesh.topology_hash() != self.topology:
            raise MeshError("mesh topology does not match the precomputed spiral/decimation tables")

    def forward(self, vertices: torch.Tensor) -> torch.Tensor:
        if vertices.shape[-2] != self.n_fine:
            raise MeshError(f"expected {self.n_fine} vertices, got {vertices.shape[-2]}")
        x = canonicalize(vertices, self.eye_idx)
        h = x
        for i, conv in enumerate(self.convs):
            h = torch.nn.functional.elu(conv(h))
            h = h.index_select(-2, getattr(self, f"parent{i}"))
        h = torch.nn.functional.elu(self.head_in(h))
        feats = self.head_out(h)
        depth = vertices.index_select(-2, self.coarse_index)[..., 2]
        return check_finite(feats + depth_pos_encoding(depth, self.channels).to(feats.dtype), "vertex_encoder")


# --------------------------------------------------------------------------- morphing / io


def morph_identity(mesh: TriangleMesh, width_scale: float, jaw_sharpness: float,
                   chin_level: float | None = None) -> TriangleMesh:
    """Scale x by ``width_scale`` and taper the lower face toward the midline.

    The vertical axis is +y (down in the image). Vertices below ``chin_level``
    (default: 40% of the way from the centre to the lowest point) are pulled
    toward x=0 by ``1 - (1 - 1/jaw_sharpness) * ramp``, with ramp rising
    quadratically to 1 at the lowest vertex.
    """
    for name, s in (("width_scale", width_scale), ("jaw_sharpness", jaw_sharpness)):
        if not 0.5 <= s <= 2.0:
            raise ContractError(f"{name} must lie in [0.5, 2.0], got {s}")
    v = mesh.vertices.copy()
    v[:, 0] *= width_scale
    if jaw_sharpness != 1.0:
        y = v[:, 1]
        bottom = y.max()
        lvl = 0.4 * bottom if chin_level is None else chin_level
        ramp = np.clip((y - lvl) / max(bottom - lvl, 1e-12), 0.0, 1.0) ** 2
        v[:, 0] *= 1.0 - (1.0 - 1.0 / jaw_sharpness) * ramp
    return TriangleMesh(v, mesh.faces)


MESH_HEADER = "# fantasyid-mesh 1"


def save_mesh(mesh: TriangleMesh, path: str | Path) -> None:
    """Plain text: header line, ``n <N> <F>``, then ``v x y z`` and ``f a b c`` (0-based)."""
    lines = [MESH_HEADER, f"n {mesh.n_vertices} {len(mesh.faces)}"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a} {b} {c}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path: str | Path) -> TriangleMesh:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != MESH_HEADER:
        raise MeshError(f"{path}: missing mesh header")
    _, n, nf = lines[1].split()
    verts = [list(map(float, ln.split()[1:])) for ln in lines[2: 2 + int(n)]]
    faces = [list(map(int, ln.split()[1:])) for ln in lines[2 + int(n): 2 + int(n) + int(nf)]]
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces).reshape(-1, 3))
