#include "gspull/surface.hpp"

#include "gspull/mc_tables.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>

namespace gspull {

namespace {

// Corner k of a cell sits at offset (kCorner[k][0], kCorner[k][1], kCorner[k][2]).
constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}, {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
// Edge e joins kEdgeLow[e] to kEdgeHigh[e] along kEdgeAxis[e].
constexpr int kEdgeLow[12] = {0, 1, 3, 0, 4, 5, 7, 4, 0, 1, 2, 3};
constexpr int kEdgeHigh[12] = {1, 2, 2, 3, 5, 6, 6, 7, 4, 5, 6, 7};
constexpr int kEdgeAxis[12] = {0, 1, 0, 1, 0, 1, 0, 1, 2, 2, 2, 2};

struct Lattice {
    Bounds bounds;
    std::array<int, 3> cells;

    Real coord(int i, int axis) const {
        if (i == cells[axis]) return bounds.hi(axis);
        return bounds.lo(axis) + (bounds.hi(axis) - bounds.lo(axis)) * (Real(i) / Real(cells[axis]));
    }
    std::uint64_t id(int x, int y, int z) const {
        const auto nx = std::uint64_t(cells[0]) + 1, ny = std::uint64_t(cells[1]) + 1;
        return (std::uint64_t(z) * ny + std::uint64_t(y)) * nx + std::uint64_t(x);
    }
};

std::string format_point(const Vec3& p) {
    std::ostringstream s;
    s << std::setprecision(17) << "(" << p.x() << ", " << p.y() << ", " << p.z() << ")";
    return s.str();
}

// Samples plane z over the block's x/y range.
void sample_layer(const BatchField& field, const Lattice& lat, const int lo[3], const int hi[3], int z, Vec& out) {
    const int nx = hi[0] - lo[0] + 1, ny = hi[1] - lo[1] + 1;
    Points pts(Index(nx) * ny, 3);
    for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x)
            pts.row(Index(y) * nx + x) << lat.coord(lo[0] + x, 0), lat.coord(lo[1] + y, 1), lat.coord(z, 2);
    out = field(pts);
    if (out.size() != pts.rows())
        throw std::invalid_argument("field returned " + std::to_string(out.size()) + " values for " +
                                    std::to_string(pts.rows()) + " positions");
    for (Index i = 0; i < out.size(); ++i)
        if (std::isnan(out(i)))
            throw std::runtime_error("field returned NaN at " + format_point(pts.row(i).transpose()));
}

// Extracts the cells [lo, hi) of the lattice.
TriangleMesh extract_block(const BatchField& field, const Lattice& lat, const int lo[3], const int hi[3], Real iso) {
    TriangleMesh mesh;
    std::vector<Vec3> verts;
    std::unordered_map<std::uint64_t, Index> vertex_of;
    const int nx = hi[0] - lo[0] + 1;
    Vec layers[2];
    sample_layer(field, lat, lo, hi, lo[2], layers[0]);

    auto value = [&](int x, int y, int layer) { return layers[layer](Index(y - lo[1]) * nx + (x - lo[0])); };
    auto position = [&](int x, int y, int z) { return Vec3(lat.coord(x, 0), lat.coord(y, 1), lat.coord(z, 2)); };

    for (int z = lo[2]; z < hi[2]; ++z) {
        sample_layer(field, lat, lo, hi, z + 1, layers[1]);
        for (int y = lo[1]; y < hi[1]; ++y)
            for (int x = lo[0]; x < hi[0]; ++x) {
                Real v[8];
                int cube = 0;
                for (int k = 0; k < 8; ++k) {
                    v[k] = value(x + kCorner[k][0], y + kCorner[k][1], kCorner[k][2]);
                    if (v[k] < iso) cube |= 1 << k;
                }
                const std::uint16_t edges = detail::kEdgeTable[cube];
                if (edges == 0) continue;
                Index edge_vertex[12];
                for (int e = 0; e < 12; ++e) {
                    if (!(edges & (1 << e))) continue;
                    const int a = kEdgeLow[e], b = kEdgeHigh[e];
                    const int ax = x + kCorner[a][0], ay = y + kCorner[a][1], az = z + kCorner[a][2];
                    const int bx = x + kCorner[b][0], by = y + kCorner[b][1], bz = z + kCorner[b][2];
                    const Real t = (iso - v[a]) / (v[b] - v[a]);
                    std::uint64_t key;
                    Vec3 p;
                    if (t <= 0) {
                        key = lat.id(ax, ay, az) * 4 + 3;
                        p = position(ax, ay, az);
                    } else if (t >= 1) {
                        key = lat.id(bx, by, bz) * 4 + 3;
                        p = position(bx, by, bz);
                    } else {
                        key = lat.id(ax, ay, az) * 4 + std::uint64_t(kEdgeAxis[e]);
                        const Vec3 pa = position(ax, ay, az), pb = position(bx, by, bz);
                        p = pa + t * (pb - pa);
                    }
                    auto [it, inserted] = vertex_of.try_emplace(key, Index(verts.size()));
                    if (inserted) verts.push_back(p);
                    edge_vertex[e] = it->second;
                }
                const auto& tri = detail::kTriTable[cube];
                for (int i = 0; tri[i] != -1; i += 3)
                    mesh.triangles.push_back({edge_vertex[tri[i]], edge_vertex[tri[i + 2]], edge_vertex[tri[i + 1]]});
            }
        std::swap(layers[0], layers[1]);
    }
    mesh.vertices.resize(Index(verts.size()), 3);
    for (std::size_t i = 0; i < verts.size(); ++i) mesh.vertices.row(Index(i)) = verts[i].transpose();
    cleanup(mesh);
    return mesh;
}

void append(TriangleMesh& dst, const TriangleMesh& src) {
    const Index base = dst.vertex_count();
    Points v(base + src.vertex_count(), 3);
    v << dst.vertices, src.vertices;
    dst.vertices = std::move(v);
    for (const auto& t : src.triangles) dst.triangles.push_back({t[0] + base, t[1] + base, t[2] + base});
}

} // namespace

Vec3 TriangleMesh::face_normal(Index t) const {
    const auto& tri = triangles[std::size_t(t)];
    const Vec3 a = vertex(tri[0]), b = vertex(tri[1]), c = vertex(tri[2]);
    return (b - a).cross(c - a);
}

Real TriangleMesh::area() const {
    Real s = 0;
    for (Index t = 0; t < triangle_count(); ++t) s += face_normal(t).norm() / 2;
    return s;
}

void TriangleMesh::validate() const {
    for (const auto& t : triangles)
        for (Index i : t)
            if (i < 0 || i >= vertex_count())
                throw std::invalid_argument("triangle index " + std::to_string(i) + " out of range for " +
                                            std::to_string(vertex_count()) + " vertices");
    if (normals.rows() != 0 && normals.rows() != vertex_count())
        throw std::invalid_argument("normal count does not match vertex count");
}

void Bounds::validate() const {
    for (int a = 0; a < 3; ++a)
        if (!(hi(a) > lo(a))) throw std::invalid_argument("degenerate bounds on axis " + std::to_string(a));
}

BatchField batch_field(PointField f) {
    return [f = std::move(f)](const Points& q) {
        Vec out(q.rows());
        for (Index i = 0; i < q.rows(); ++i) out(i) = f(q.row(i).transpose());
        return out;
    };
}

BatchField batch_field(const SdfNetwork& net) {
    return [&net](const Points& q) { return net.evaluate(q); };
}

TriangleMesh marching_cubes(const BatchField& field, const Bounds& bounds, int resolution, Real iso) {
    return extract_chunked(field, bounds, {1, 1, 1}, resolution, iso);
}

TriangleMesh extract_chunked(const BatchField& field, const Bounds& bounds, std::array<int, 3> chunk_grid,
                             int resolution_per_chunk, Real iso) {
    bounds.validate();
    if (resolution_per_chunk < 2) throw std::invalid_argument("resolution must be at least 2");
    for (int c : chunk_grid)
        if (c < 1) throw std::invalid_argument("chunk grid must be at least 1 per axis");
    const Lattice lat{bounds, {chunk_grid[0] * resolution_per_chunk, chunk_grid[1] * resolution_per_chunk,
                               chunk_grid[2] * resolution_per_chunk}};
    TriangleMesh out;
    out.vertices.resize(0, 3);
    const int chunks = chunk_grid[0] * chunk_grid[1] * chunk_grid[2];
    for (int cz = 0; cz < chunk_grid[2]; ++cz)
        for (int cy = 0; cy < chunk_grid[1]; ++cy)
            for (int cx = 0; cx < chunk_grid[0]; ++cx) {
                const int c[3] = {cx, cy, cz};
                int lo[3], hi[3];
                for (int a = 0; a < 3; ++a) {
                    lo[a] = c[a] * resolution_per_chunk;
                    hi[a] = lo[a] + resolution_per_chunk;
                }
                const TriangleMesh block = extract_block(field, lat, lo, hi, iso);
                if (chunks == 1) return block;
                append(out, block);
            }
    weld_vertices(out, Real(1e-9));
    return out;
}

void weld_vertices(TriangleMesh& mesh, Real tolerance) {
    struct KeyHash {
        std::size_t operator()(const std::array<std::int64_t, 3>& k) const {
            std::uint64_t h = 1469598103934665603ull;
            for (auto v : k) h = (h ^ std::uint64_t(v)) * 1099511628211ull;
            return h;
        }
    };
    const Real cell = std::max(tolerance, std::numeric_limits<Real>::min());
    std::unordered_map<std::array<std::int64_t, 3>, std::vector<Index>, KeyHash> grid;
    std::vector<Index> remap(std::size_t(mesh.vertex_count()));
    std::vector<Index> kept;
    for (Index i = 0; i < mesh.vertex_count(); ++i) {
        const Vec3 p = mesh.vertex(i);
        std::array<std::int64_t, 3> key;
        for (int a = 0; a < 3; ++a) key[std::size_t(a)] = std::int64_t(std::floor(p(a) / cell));
        Index found = -1;
        for (int dz = -1; dz <= 1 && found < 0; ++dz)
            for (int dy = -1; dy <= 1 && found < 0; ++dy)
                for (int dx = -1; dx <= 1 && found < 0; ++dx) {
                    auto it = grid.find({key[0] + dx, key[1] + dy, key[2] + dz});
                    if (it == grid.end()) continue;
                    for (Index j : it->second)
                        if ((mesh.vertex(kept[std::size_t(j)]) - p).cwiseAbs().maxCoeff() <= tolerance) {
                            found = j;
                            break;
                        }
                }
        if (found < 0) {
            found = Index(kept.size());
            kept.push_back(i);
            grid[key].push_back(found);
        }
        remap[std::size_t(i)] = found;
    }
    Points v(Index(kept.size()), 3);
    Points n(mesh.normals.rows() ? Index(kept.size()) : 0, 3);
    for (std::size_t j = 0; j < kept.size(); ++j) {
        v.row(Index(j)) = mesh.vertices.row(kept[j]);
        if (n.rows()) n.row(Index(j)) = mesh.normals.row(kept[j]);
    }
    mesh.vertices = std::move(v);
    mesh.normals = std::move(n);
    for (auto& t : mesh.triangles)
        for (auto& i : t) i = remap[std::size_t(i)];
    cleanup(mesh);
}

void cleanup(TriangleMesh& mesh) {
    std::vector<Triangle> tris;
    tris.reserve(mesh.triangles.size());
    for (Index t = 0; t < mesh.triangle_count(); ++t) {
        const auto& tri = mesh.triangles[std::size_t(t)];
        if (tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2]) continue;
        if (!(mesh.face_normal(t).squaredNorm() > 0)) continue;
        tris.push_back(tri);
    }
    std::vector<Index> remap(std::size_t(mesh.vertex_count()), -1);
    Index count = 0;
    for (auto& tri : tris)
        for (auto& i : tri) {
            if (remap[std::size_t(i)] < 0) remap[std::size_t(i)] = -2;
        }
    for (std::size_t i = 0; i < remap.size(); ++i)
        if (remap[i] == -2) remap[i] = count++;
    Points v(count, 3);
    Points n(mesh.normals.rows() ? count : 0, 3);
    for (std::size_t i = 0; i < remap.size(); ++i)
        if (remap[i] >= 0) {
            v.row(remap[i]) = mesh.vertices.row(Index(i));
            if (n.rows()) n.row(remap[i]) = mesh.normals.row(Index(i));
        }
    for (auto& tri : tris)
        for (auto& i : tri) i = remap[std::size_t(i)];
    mesh.vertices = std::move(v);
    mesh.normals = std::move(n);
    mesh.triangles = std::move(tris);
}

void compute_vertex_normals(TriangleMesh& mesh) {
    mesh.normals = Points::Zero(mesh.vertex_count(), 3);
    for (Index t = 0; t < mesh.triangle_count(); ++t) {
        const Vec3 n = mesh.face_normal(t);
        for (Index i : mesh.triangles[std::size_t(t)]) mesh.normals.row(i) += n.transpose();
    }
    for (Index i = 0; i < mesh.vertex_count(); ++i) {
        const Real len = mesh.normals.row(i).norm();
        if (len > 0) mesh.normals.row(i) /= len;
    }
}

MeshStats mesh_stats(const TriangleMesh& mesh) {
    MeshStats s;
    s.triangles = mesh.triangle_count();
    std::vector<std::pair<Index, Index>> directed;
    directed.reserve(mesh.triangles.size() * 3);
    std::vector<bool> used(std::size_t(mesh.vertex_count()), false);
    for (const auto& t : mesh.triangles)
        for (int k = 0; k < 3; ++k) {
            directed.emplace_back(t[std::size_t(k)], t[std::size_t((k + 1) % 3)]);
            used[std::size_t(t[std::size_t(k)])] = true;
        }
    s.vertices = Index(std::count(used.begin(), used.end(), true));

    std::sort(directed.begin(), directed.end());
    for (std::size_t i = 1; i < directed.size(); ++i)
        if (directed[i] == directed[i - 1]) ++s.misoriented_edges;

    std::vector<std::pair<Index, Index>> undirected;
    undirected.reserve(directed.size());
    for (auto [a, b] : directed) undirected.emplace_back(std::min(a, b), std::max(a, b));
    std::sort(undirected.begin(), undirected.end());
    for (std::size_t i = 0; i < undirected.size();) {
        std::size_t j = i;
        while (j < undirected.size() && undirected[j] == undirected[i]) ++j;
        ++s.edges;
        if (j - i == 1) ++s.boundary_edges;
        if (j - i > 2) ++s.nonmanifold_edges;
        i = j;
    }
    s.euler_characteristic = s.vertices - s.edges + s.triangles;
    s.watertight = s.triangles > 0 && s.boundary_edges == 0;
    return s;
}

MeshFormat parse_mesh_format(std::string_view name) {
    std::string n(name);
    if (!n.empty() && n[0] == '.') n.erase(0, 1);
    std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return char(std::tolower(c)); });
    if (n == "obj") return MeshFormat::Obj;
    if (n == "ply") return MeshFormat::Ply;
    throw std::invalid_argument("unknown mesh format '" + std::string(name) + "' (expected obj or ply)");
}

MeshFormat mesh_format_of(const std::filesystem::path& path) { return parse_mesh_format(path.extension().string()); }

namespace {

void write_obj(const TriangleMesh& mesh, std::ostream& out, const SceneTransform& tf) {
    out << "# gspull mesh\n" << std::setprecision(9);
    for (Index i = 0; i < mesh.vertex_count(); ++i) {
        const Vec3 v = tf.denormalize(mesh.vertex(i));
        out << "v " << float(v.x()) << ' ' << float(v.y()) << ' ' << float(v.z()) << '\n';
    }
    const bool normals = mesh.normals.rows() == mesh.vertex_count() && mesh.vertex_count() > 0;
    if (normals)
        for (Index i = 0; i < mesh.vertex_count(); ++i)
            out << "vn " << float(mesh.normals(i, 0)) << ' ' << float(mesh.normals(i, 1)) << ' '
                << float(mesh.normals(i, 2)) << '\n';
    for (const auto& t : mesh.triangles) {
        out << 'f';
        for (Index i : t) {
            out << ' ' << i + 1;
            if (normals) out << "//" << i + 1;
        }
        out << '\n';
    }
}

template <typename T>
void put(std::ostream& out, T v) {
    if constexpr (std::endian::native == std::endian::big) {
        auto* b = reinterpret_cast<unsigned char*>(&v);
        std::reverse(b, b + sizeof(T));
    }
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void write_ply(const TriangleMesh& mesh, std::ostream& out, const SceneTransform& tf) {
    const bool normals = mesh.normals.rows() == mesh.vertex_count() && mesh.vertex_count() > 0;
    out << "ply\nformat binary_little_endian 1.0\ncomment gspull mesh\n"
        << "element vertex " << mesh.vertex_count() << "\nproperty float x\nproperty float y\nproperty float z\n";
    if (normals) out << "property float nx\nproperty float ny\nproperty float nz\n";
    out << "element face " << mesh.triangle_count() << "\nproperty list uchar int vertex_indices\nend_header\n";
    for (Index i = 0; i < mesh.vertex_count(); ++i) {
        const Vec3 v = tf.denormalize(mesh.vertex(i));
        for (int a = 0; a < 3; ++a) put(out, float(v(a)));
        if (normals)
            for (int a = 0; a < 3; ++a) put(out, float(mesh.normals(i, a)));
    }
    for (const auto& t : mesh.triangles) {
        put(out, std::uint8_t(3));
        for (Index i : t) put(out, std::int32_t(i));
    }
}

Index obj_index(const std::string& token, Index count, int line) {
    const std::string head = token.substr(0, token.find('/'));
    Index i;
    try {
        i = std::stoll(head);
    } catch (const std::exception&) {
        throw std::runtime_error("bad face index '" + token + "' on OBJ line " + std::to_string(line));
    }
    return i < 0 ? count + i : i - 1;
}

TriangleMesh read_obj(std::istream& in) {
    std::vector<Vec3> v, vn;
    TriangleMesh mesh;
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        std::istringstream s(line);
        std::string tag;
        if (!(s >> tag) || tag[0] == '#') continue;
        if (tag == "v" || tag == "vn") {
            Vec3 p;
            if (!(s >> p.x() >> p.y() >> p.z()))
                throw std::runtime_error("bad " + tag + " record on OBJ line " + std::to_string(number));
            (tag == "v" ? v : vn).push_back(p);
        } else if (tag == "f") {
            std::vector<Index> poly;
            std::string tok;
            while (s >> tok) poly.push_back(obj_index(tok, Index(v.size()), number));
            if (poly.size() < 3) throw std::runtime_error("face with fewer than 3 vertices on OBJ line " + std::to_string(number));
            for (std::size_t k = 1; k + 1 < poly.size(); ++k) mesh.triangles.push_back({poly[0], poly[k], poly[k + 1]});
        }
    }
    mesh.vertices.resize(Index(v.size()), 3);
    for (std::size_t i = 0; i < v.size(); ++i) mesh.vertices.row(Index(i)) = v[i].transpose();
    if (vn.size() == v.size() && !v.empty()) {
        mesh.normals.resize(Index(vn.size()), 3);
        for (std::size_t i = 0; i < vn.size(); ++i) mesh.normals.row(Index(i)) = vn[i].transpose();
    } else {
        mesh.normals.resize(0, 3);
    }
    return mesh;
}

struct PlyProperty {
    std::string name, type, count_type; // count_type set for lists
};

std::size_t ply_size(const std::string& type) {
    if (type == "char" || type == "uchar" || type == "int8" || type == "uint8") return 1;
    if (type == "short" || type == "ushort" || type == "int16" || type == "uint16") return 2;
    if (type == "int" || type == "uint" || type == "float" || type == "int32" || type == "uint32" || type == "float32")
        return 4;
    if (type == "double" || type == "float64") return 8;
    throw std::runtime_error("unsupported PLY property type '" + type + "'");
}

double ply_read(std::istream& in, const std::string& type) {
    unsigned char b[8];
    const std::size_t n = ply_size(type);
    if (!in.read(reinterpret_cast<char*>(b), std::streamsize(n))) throw std::runtime_error("truncated PLY body");
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + n);
    auto as = [&]<typename T>(T) {
        T v;
        std::memcpy(&v, b, sizeof(T));
        return double(v);
    };
    if (type == "char" || type == "int8") return as(std::int8_t{});
    if (type == "uchar" || type == "uint8") return as(std::uint8_t{});
    if (type == "short" || type == "int16") return as(std::int16_t{});
    if (type == "ushort" || type == "uint16") return as(std::uint16_t{});
    if (type == "int" || type == "int32") return as(std::int32_t{});
    if (type == "uint" || type == "uint32") return as(std::uint32_t{});
    if (type == "float" || type == "float32") return as(float{});
    return as(double{});
}

TriangleMesh read_ply(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != "ply") throw std::runtime_error("missing PLY magic");
    struct Element {
        std::string name;
        Index count = 0;
        std::vector<PlyProperty> props;
    };
    std::vector<Element> elements;
    bool binary = false;
    while (std::getline(in, line)) {
        std::istringstream s(line);
        std::string tag;
        s >> tag;
        if (tag == "format") {
            std::string f;
            s >> f;
            if (f != "binary_little_endian") throw std::runtime_error("unsupported PLY format '" + f + "'");
            binary = true;
        } else if (tag == "element") {
            Element e;
            s >> e.name >> e.count;
            elements.push_back(e);
        } else if (tag == "property") {
            if (elements.empty()) throw std::runtime_error("PLY property before element");
            PlyProperty p;
            std::string type;
            s >> type;
            if (type == "list") s >> p.count_type >> p.type >> p.name;
            else {
                p.type = type;
                s >> p.name;
            }
            elements.back().props.push_back(p);
        } else if (tag == "end_header") {
            break;
        }
    }
    if (!binary) throw std::runtime_error("PLY header has no format line");

    TriangleMesh mesh;
    mesh.vertices.resize(0, 3);
    mesh.normals.resize(0, 3);
    for (const auto& e : elements) {
        if (e.name == "vertex") {
            mesh.vertices.resize(e.count, 3);
            bool has_normals = false;
            for (const auto& p : e.props) has_normals |= p.name == "nx";
            if (has_normals) mesh.normals.resize(e.count, 3);
            for (Index i = 0; i < e.count; ++i)
                for (const auto& p : e.props) {
                    if (!p.count_type.empty()) throw std::runtime_error("unexpected list property on PLY vertices");
                    const double v = ply_read(in, p.type);
                    if (p.name == "x") mesh.vertices(i, 0) = Real(v);
                    else if (p.name == "y") mesh.vertices(i, 1) = Real(v);
                    else if (p.name == "z") mesh.vertices(i, 2) = Real(v);
                    else if (p.name == "nx") mesh.normals(i, 0) = Real(v);
                    else if (p.name == "ny") mesh.normals(i, 1) = Real(v);
                    else if (p.name == "nz") mesh.normals(i, 2) = Real(v);
                }
        } else {
            for (Index i = 0; i < e.count; ++i)
                for (const auto& p : e.props) {
                    if (p.count_type.empty()) {
                        ply_read(in, p.type);
                        continue;
                    }
                    const auto n = std::size_t(ply_read(in, p.count_type));
                    std::vector<Index> poly(n);
                    for (auto& idx : poly) idx = Index(ply_read(in, p.type));
                    if (e.name == "face" && (p.name == "vertex_indices" || p.name == "vertex_index"))
                        for (std::size_t k = 1; k + 1 < n; ++k) mesh.triangles.push_back({poly[0], poly[k], poly[k + 1]});
                }
        }
    }
    return mesh;
}

} // namespace

void export_mesh(const TriangleMesh& mesh, const std::filesystem::path& path, MeshFormat format,
                 const SceneTransform& transform) {
    mesh.validate();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    if (format == MeshFormat::Obj) write_obj(mesh, out, transform);
    else write_ply(mesh, out, transform);
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

TriangleMesh import_mesh(const std::filesystem::path& path) {
    const MeshFormat format = mesh_format_of(path);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
    TriangleMesh mesh;
    try {
        mesh = format == MeshFormat::Obj ? read_obj(in) : read_ply(in);
        mesh.validate();
    } catch (const std::exception& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
    return mesh;
}

} // namespace gspull
