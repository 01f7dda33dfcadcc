#pragma once

#include "gspull/sdfnet.hpp"
#include "gspull/types.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <string_view>
#include <vector>

namespace gspull {

using Triangle = std::array<Index, 3>;

struct TriangleMesh {
    Points vertices;
    std::vector<Triangle> triangles;
    Points normals; // empty or one row per vertex

    Index vertex_count() const { return vertices.rows(); }
    Index triangle_count() const { return static_cast<Index>(triangles.size()); }
    bool empty() const { return triangles.empty(); }
    Vec3 vertex(Index i) const { return vertices.row(i).transpose(); }
    Vec3 face_normal(Index t) const; // unnormalized, length = 2 * area
    Real area() const;
    void validate() const;
};

struct Bounds {
    Vec3 lo = Vec3::Constant(-1);
    Vec3 hi = Vec3::Constant(1);

    static Bounds cube(Real half) { return {Vec3::Constant(-half), Vec3::Constant(half)}; }
    void validate() const;
};

// Normalized cube shrunk by 2%.
inline Bounds default_bounds() { return Bounds::cube(Real(0.98)); }

// Evaluates a batch of positions, one per row.
using BatchField = std::function<Vec(const Points&)>;
using PointField = std::function<Real(const Vec3&)>;

BatchField batch_field(PointField f);
BatchField batch_field(const SdfNetwork& net);

// `resolution` cells per axis, so (resolution + 1)^3 samples. Corners with
// field < iso are inside; triangles wind counter-clockwise seen from outside.
TriangleMesh marching_cubes(const BatchField& field, const Bounds& bounds, int resolution, Real iso = 0);

// Splits the lattice of chunk_grid * resolution_per_chunk cells per axis into
// blocks that share their boundary sample planes, extracts each block and
// welds coincident vertices.
TriangleMesh extract_chunked(const BatchField& field, const Bounds& bounds, std::array<int, 3> chunk_grid,
                             int resolution_per_chunk, Real iso = 0);

// Merges vertices closer than `tolerance` (infinity norm), remaps triangles
// and drops those that collapse.
void weld_vertices(TriangleMesh& mesh, Real tolerance);
// Removes collapsed or zero-area triangles and unreferenced vertices.
void cleanup(TriangleMesh& mesh);
// Area-weighted face normals, normalized.
void compute_vertex_normals(TriangleMesh& mesh);

struct MeshStats {
    Index vertices = 0; // referenced by at least one triangle
    Index triangles = 0;
    Index edges = 0;
    Index boundary_edges = 0;
    Index nonmanifold_edges = 0;
    Index misoriented_edges = 0; // directed edge used twice
    Index euler_characteristic = 0;
    bool watertight = false;
};

MeshStats mesh_stats(const TriangleMesh& mesh);

enum class MeshFormat { Obj, Ply };

// From a name ("obj", "ply") or a path extension; throws on anything else.
MeshFormat parse_mesh_format(std::string_view name);
MeshFormat mesh_format_of(const std::filesystem::path& path);

// Vertices are written in scene coordinates: transform.denormalize(v).
// OBJ is ASCII ("v", optional "vn", 1-based "f"); PLY is binary little-endian
// with float32 x y z [nx ny nz] and uchar-count int32 face lists.
void export_mesh(const TriangleMesh& mesh, const std::filesystem::path& path, MeshFormat format,
                 const SceneTransform& transform = {});
inline void export_mesh(const TriangleMesh& mesh, const std::filesystem::path& path,
                        const SceneTransform& transform = {}) {
    export_mesh(mesh, path, mesh_format_of(path), transform);
}
TriangleMesh import_mesh(const std::filesystem::path& path);

} // namespace gspull
