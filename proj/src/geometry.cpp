#include "avatarkit/geometry.hpp"

#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>

namespace avk {

namespace {

constexpr double kZeroNudge = 1e-8;

std::uint64_t edge_key(int a, int b) {
    if (a > b) std::swap(a, b);
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
}

Vec3 row(const Points& p, Eigen::Index i) { return p.row(i).transpose(); }

}  // namespace

// ---------------------------------------------------------------------------
// TetGrid

TetGrid::TetGrid(Points verts, Tets tets_, int res)
    : vertices(std::move(verts)), tets(std::move(tets_)), resolution(res) {
    const auto n = static_cast<int>(vertices.rows());
    for (Eigen::Index t = 0; t < tets.rows(); ++t) {
        for (int k = 0; k < 4; ++k) {
            if (tets(t, k) < 0 || tets(t, k) >= n)
                throw InvalidArgument("tet " + std::to_string(t) + " references vertex " +
                                      std::to_string(tets(t, k)) + " out of range");
        }
        const double vol = signed_tet_volume<double>(row(vertices, tets(t, 0)), row(vertices, tets(t, 1)),
                                                     row(vertices, tets(t, 2)), row(vertices, tets(t, 3)));
        if (!(vol > 0))
            throw InvalidArgument("tet " + std::to_string(t) + " has non-positive volume");
    }
}

TetGrid build_grid(int resolution) {
    if (resolution < 2) throw InvalidArgument("build_grid: resolution must be >= 2");
    const int n = resolution + 1;
    TetGrid grid;
    grid.resolution = resolution;
    grid.vertices.resize(static_cast<Eigen::Index>(n) * n * n, 3);
    auto index = [n](int i, int j, int k) { return i + n * (j + n * k); };
    const double h = 1.0 / resolution;
    for (int k = 0; k < n; ++k)
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < n; ++i)
                grid.vertices.row(index(i, j, k)) << -0.5 + i * h, -0.5 + j * h, -0.5 + k * h;

    // Freudenthal split: one tet per monotone path from the cube's min corner
    // to its max corner, i.e. per permutation of the three axes.
    static constexpr std::array<std::array<int, 3>, 6> kPerms = {
        {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};
    grid.tets.resize(static_cast<Eigen::Index>(resolution) * resolution * resolution * 6, 4);
    Eigen::Index t = 0;
    for (int k = 0; k < resolution; ++k)
        for (int j = 0; j < resolution; ++j)
            for (int i = 0; i < resolution; ++i)
                for (const auto& perm : kPerms) {
                    std::array<int, 3> c = {i, j, k};
                    std::array<int, 4> v{};
                    v[0] = index(c[0], c[1], c[2]);
                    for (int s = 0; s < 3; ++s) {
                        c[perm[s]] += 1;
                        v[s + 1] = index(c[0], c[1], c[2]);
                    }
                    const double vol = signed_tet_volume<double>(row(grid.vertices, v[0]), row(grid.vertices, v[1]),
                                                                 row(grid.vertices, v[2]), row(grid.vertices, v[3]));
                    if (vol < 0) std::swap(v[2], v[3]);
                    grid.tets.row(t++) << v[0], v[1], v[2], v[3];
                }
    return grid;
}

// ---------------------------------------------------------------------------
// Body proxy

std::vector<Capsule> BodyShape::capsules() const {
    const double arm = arm_angle_deg * std::numbers::pi / 180.0;
    const double leg = leg_spread_deg * std::numbers::pi / 180.0;
    const double shoulder_y = torso_top - 0.02;
    const double hip_y = torso_bottom - 0.04;
    std::vector<Capsule> parts;
    parts.reserve(6);
    parts.push_back({{0, torso_bottom, 0}, {0, torso_top, 0}, torso_radius});
    parts.push_back({head_center(), head_center(), head_radius});
    for (double side : {-1.0, 1.0}) {
        const Vec3 shoulder(side * shoulder_offset, shoulder_y, 0);
        const Vec3 hand = shoulder + arm_length * Vec3(side * std::cos(arm), -std::sin(arm), 0);
        parts.push_back({shoulder, hand, arm_radius});
    }
    for (double side : {-1.0, 1.0}) {
        const Vec3 hip(side * hip_offset, hip_y, 0);
        const Vec3 foot = hip + leg_length * Vec3(side * std::sin(leg), -std::cos(leg), 0);
        parts.push_back({hip, foot, leg_radius});
    }
    return parts;
}

BodyShape BodyShape::randomized(std::uint64_t seed, double amount) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(1.0 - amount, 1.0 + amount);
    BodyShape b;
    b.torso_radius *= u(rng);
    b.head_radius *= u(rng);
    b.shoulder_offset *= u(rng);
    b.arm_length *= u(rng);
    b.arm_radius *= u(rng);
    b.arm_angle_deg *= u(rng);
    b.hip_offset *= u(rng);
    b.leg_length = std::min(b.leg_length * u(rng), 0.33);
    b.leg_radius *= u(rng);
    return b;
}

int body_part(const Vec3& p, const BodyShape& body) {
    const auto parts = body.capsules();
    int best = 0;
    double best_d = capsule_sdf<double>(p, parts[0].a, parts[0].b, parts[0].radius);
    for (int i = 1; i < static_cast<int>(parts.size()); ++i) {
        const double d = capsule_sdf<double>(p, parts[i].a, parts[i].b, parts[i].radius);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Params

Points AvatarParams::positions() const { return grid->vertices + deform; }

void AvatarParams::clamp_deform() {
    const double bound = deform_bound();
    deform = deform.cwiseMax(-bound).cwiseMin(bound);
}

AvatarParams init_params(std::shared_ptr<const TetGrid> grid, const ScalarField& sdf_fn) {
    if (!grid) throw InvalidArgument("init_params: null grid");
    AvatarParams p;
    const auto n = grid->num_vertices();
    p.sdf.resize(n);
    for (Eigen::Index v = 0; v < n; ++v) {
        const double s = sdf_fn(row(grid->vertices, v));
        if (!std::isfinite(s))
            throw NumericError("init_params: non-finite SDF sample at vertex " + std::to_string(v));
        p.sdf[v] = s;
    }
    p.deform = Points::Zero(n, 3);
    p.color = Points::Constant(n, 3, 0.5);
    p.grid = std::move(grid);
    return p;
}

// ---------------------------------------------------------------------------
// Marching tetrahedra

VectorXd perturbed_sdf(const VectorXd& sdf) {
    return sdf.unaryExpr([](double s) { return s == 0.0 ? kZeroNudge : s; });
}

std::uint64_t topology_key(const AvatarParams& params) {
    const VectorXd s = perturbed_sdf(params.sdf);
    std::uint64_t h = fnv1a(&params.grid->resolution, sizeof(int));
    std::uint64_t word = 0;
    int bits = 0;
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        word = (word << 1) | (s[i] > 0 ? 1u : 0u);
        if (++bits == 64) {
            h = fnv1a(&word, sizeof(word), h);
            word = 0;
            bits = 0;
        }
    }
    h = fnv1a(&word, sizeof(word), h);
    const auto n = s.size();
    return fnv1a(&n, sizeof(n), h);
}

namespace {

// Triangles per sign case, expressed as crossing-edge lists. The emitted
// triangles depend only on the set of crossing edges, so a case and its
// complement give the same triangles; orientation is fixed afterwards.
struct CaseTriangles {
    int count = 0;
    std::array<std::array<std::array<int, 2>, 3>, 2> tris{};
};

std::array<CaseTriangles, 16> make_case_table() {
    std::array<CaseTriangles, 16> table{};
    for (int mask = 1; mask < 15; ++mask) {
        int npos = 0;
        for (int i = 0; i < 4; ++i) npos += (mask >> i) & 1;
        CaseTriangles& c = table[mask];
        if (npos == 1 || npos == 3) {
            int lone = 0;
            for (int i = 0; i < 4; ++i) {
                const bool pos = (mask >> i) & 1;
                if ((npos == 1) == pos) lone = i;
            }
            int k = 0;
            for (int o = 0; o < 4; ++o)
                if (o != lone) c.tris[0][k++] = {lone, o};
            c.count = 1;
        } else {
            // Partition {0, p} | {q0, q1}; quad cycle (0,q0) (q0,p) (p,q1) (q1,0).
            const bool pos0 = mask & 1;
            int p = -1;
            std::array<int, 2> q{};
            int nq = 0;
            for (int i = 1; i < 4; ++i) {
                const bool pos = (mask >> i) & 1;
                if (pos == pos0)
                    p = i;
                else
                    q[nq++] = i;
            }
            const std::array<std::array<int, 2>, 4> quad = {{{0, q[0]}, {q[0], p}, {p, q[1]}, {q[1], 0}}};
            c.tris[0] = {quad[0], quad[1], quad[2]};
            c.tris[1] = {quad[0], quad[2], quad[3]};
            c.count = 2;
        }
    }
    return table;
}

const std::array<CaseTriangles, 16>& case_table() {
    static const auto table = make_case_table();
    return table;
}

}  // namespace

Points compute_vertex_normals(const Points& positions, const Faces& faces) {
    Points n = Points::Zero(positions.rows(), 3);
    for (Eigen::Index f = 0; f < faces.rows(); ++f) {
        const Vec3 a = row(positions, faces(f, 0));
        const Vec3 fn = (row(positions, faces(f, 1)) - a).cross(row(positions, faces(f, 2)) - a);
        for (int k = 0; k < 3; ++k) n.row(faces(f, k)) += fn.transpose();
    }
    for (Eigen::Index v = 0; v < n.rows(); ++v) {
        const double len = n.row(v).norm();
        if (len > 0 && std::isfinite(len))
            n.row(v) /= len;
        else
            n.row(v) << 0, 0, 1;
    }
    return n;
}

SurfaceMesh make_mesh(Points positions, Faces faces, Points colors) {
    SurfaceMesh m;
    m.positions = std::move(positions);
    m.faces = std::move(faces);
    if (colors.rows() == m.positions.rows())
        m.vertex_colors = std::move(colors);
    else
        m.vertex_colors = Points::Constant(m.positions.rows(), 3, 0.5);
    m.vertex_normals = compute_vertex_normals(m.positions, m.faces);
    return m;
}

SurfaceMesh extract_mesh(const AvatarParams& params) {
    const TetGrid& grid = *params.grid;
    if (params.sdf.size() != grid.num_vertices() || params.deform.rows() != grid.num_vertices() ||
        params.color.rows() != grid.num_vertices())
        throw InvalidArgument("extract_mesh: parameter arrays do not match grid vertex count");

    const VectorXd s = perturbed_sdf(params.sdf);
    const Points x = params.positions();
    const double min_volume = 1e-12 * std::pow(grid.cell_size(), 3);
    const auto& table = case_table();

    std::vector<Vec3> pos;
    std::vector<Vec3> col;
    std::vector<EdgeCrossing> prov;
    std::vector<std::array<int, 3>> tris;
    std::unordered_map<std::uint64_t, int> cache;

    auto crossing_vertex = [&](int a, int b) {
        if (a > b) std::swap(a, b);
        const auto key = edge_key(a, b);
        if (auto it = cache.find(key); it != cache.end()) return it->second;
        const double w = s[a] / (s[a] - s[b]);
        const int id = static_cast<int>(pos.size());
        pos.push_back(row(x, a) + w * (row(x, b) - row(x, a)));
        col.push_back(row(params.color, a) + w * (row(params.color, b) - row(params.color, a)));
        prov.push_back({a, b, w});
        cache.emplace(key, id);
        return id;
    };

    for (Eigen::Index t = 0; t < grid.num_tets(); ++t) {
        std::array<int, 4> v = {grid.tets(t, 0), grid.tets(t, 1), grid.tets(t, 2), grid.tets(t, 3)};
        int mask = 0;
        for (int i = 0; i < 4; ++i) mask |= (s[v[i]] > 0 ? 1 : 0) << i;
        if (mask == 0 || mask == 15) continue;

        const Vec3 x0 = row(x, v[0]), x1 = row(x, v[1]), x2 = row(x, v[2]), x3 = row(x, v[3]);
        if (!(std::abs(signed_tet_volume<double>(x0, x1, x2, x3)) > min_volume))
            throw DegenerateGeometry("extract_mesh: tet " + std::to_string(t) +
                                     " is degenerate after deformation");

        Vec3 pos_c = Vec3::Zero(), neg_c = Vec3::Zero();
        int npos = 0;
        for (int i = 0; i < 4; ++i) {
            if ((mask >> i) & 1) {
                pos_c += row(x, v[i]);
                ++npos;
            } else {
                neg_c += row(x, v[i]);
            }
        }
        const Vec3 outward = pos_c / npos - neg_c / (4 - npos);

        const CaseTriangles& c = table[mask];
        for (int k = 0; k < c.count; ++k) {
            std::array<int, 3> tri{};
            for (int e = 0; e < 3; ++e) tri[e] = crossing_vertex(v[c.tris[k][e][0]], v[c.tris[k][e][1]]);
            const Vec3 n = (pos[tri[1]] - pos[tri[0]]).cross(pos[tri[2]] - pos[tri[0]]);
            if (n.dot(outward) < 0) std::swap(tri[1], tri[2]);
            tris.push_back(tri);
        }
    }

    SurfaceMesh mesh;
    mesh.positions.resize(static_cast<Eigen::Index>(pos.size()), 3);
    mesh.vertex_colors.resize(static_cast<Eigen::Index>(pos.size()), 3);
    for (std::size_t i = 0; i < pos.size(); ++i) {
        mesh.positions.row(static_cast<Eigen::Index>(i)) = pos[i].transpose();
        mesh.vertex_colors.row(static_cast<Eigen::Index>(i)) = col[i].transpose();
    }
    mesh.faces.resize(static_cast<Eigen::Index>(tris.size()), 3);
    for (std::size_t f = 0; f < tris.size(); ++f)
        mesh.faces.row(static_cast<Eigen::Index>(f)) << tris[f][0], tris[f][1], tris[f][2];
    mesh.vertex_normals = compute_vertex_normals(mesh.positions, mesh.faces);
    mesh.provenance = std::move(prov);
    mesh.topology_key = topology_key(params);
    return mesh;
}

ParamGrad extract_mesh_vjp(const AvatarParams& params, const SurfaceMesh& mesh, const Points& d_positions,
                           const Points& d_colors) {
    const auto nv = mesh.num_vertices();
    if (mesh.topology_key == 0 || mesh.topology_key != topology_key(params) ||
        static_cast<Eigen::Index>(mesh.provenance.size()) != nv)
        throw StaleState("extract_mesh_vjp: mesh topology does not match parameters (stale topology)");
    if (d_positions.rows() != nv) throw InvalidArgument("extract_mesh_vjp: cotangent size mismatch");
    const bool with_color = d_colors.rows() == nv;

    const VectorXd s = perturbed_sdf(params.sdf);
    const Points x = params.positions();
    ParamGrad g{VectorXd::Zero(s.size()), Points::Zero(x.rows(), 3), Points::Zero(x.rows(), 3)};

    for (Eigen::Index i = 0; i < nv; ++i) {
        const auto& pv = mesh.provenance[static_cast<std::size_t>(i)];
        const int a = pv.a, b = pv.b;
        const double sa = s[a], sb = s[b];
        const double w = sa / (sa - sb);
        if (w != pv.weight) throw StaleState("extract_mesh_vjp: provenance weight mismatch (stale topology)");
        const double denom = (sa - sb) * (sa - sb);
        const double dw_dsa = -sb / denom;
        const double dw_dsb = sa / denom;

        const Vec3 dp = row(d_positions, i);
        g.deform.row(a) += (1.0 - w) * dp.transpose();
        g.deform.row(b) += w * dp.transpose();
        double dw = dp.dot(row(x, b) - row(x, a));
        if (with_color) {
            const Vec3 dc = row(d_colors, i);
            g.color.row(a) += (1.0 - w) * dc.transpose();
            g.color.row(b) += w * dc.transpose();
            dw += dc.dot(row(params.color, b) - row(params.color, a));
        }
        g.sdf[a] += dw * dw_dsa;
        g.sdf[b] += dw * dw_dsb;
    }
    return g;
}

SurfaceMesh transformed(const SurfaceMesh& mesh, const Mat3& rotation, const Vec3& translation) {
    SurfaceMesh out = mesh;
    out.positions = (mesh.positions * rotation.transpose()).rowwise() + translation.transpose();
    out.vertex_normals = mesh.vertex_normals * rotation.transpose();
    return out;
}

SurfaceMesh uv_sphere(double radius, int rings, int segments, const Vec3& center) {
    const int nv = 2 + (rings - 1) * segments;
    Points p(nv, 3);
    p.row(0) = (center + Vec3(0, radius, 0)).transpose();
    p.row(nv - 1) = (center - Vec3(0, radius, 0)).transpose();
    for (int r = 1; r < rings; ++r) {
        const double th = std::numbers::pi * r / rings;
        for (int s = 0; s < segments; ++s) {
            const double ph = 2 * std::numbers::pi * s / segments;
            p.row(1 + (r - 1) * segments + s) =
                (center + radius * Vec3(std::sin(th) * std::sin(ph), std::cos(th), std::sin(th) * std::cos(ph)))
                    .transpose();
        }
    }
    std::vector<std::array<int, 3>> f;
    auto ring = [&](int r, int s) { return 1 + (r - 1) * segments + (s % segments); };
    for (int s = 0; s < segments; ++s) f.push_back({0, ring(1, s), ring(1, s + 1)});
    for (int r = 1; r < rings - 1; ++r)
        for (int s = 0; s < segments; ++s) {
            f.push_back({ring(r, s), ring(r + 1, s), ring(r + 1, s + 1)});
            f.push_back({ring(r, s), ring(r + 1, s + 1), ring(r, s + 1)});
        }
    for (int s = 0; s < segments; ++s) f.push_back({nv - 1, ring(rings - 1, s + 1), ring(rings - 1, s)});
    Faces faces(static_cast<Eigen::Index>(f.size()), 3);
    for (std::size_t i = 0; i < f.size(); ++i) faces.row(static_cast<Eigen::Index>(i)) << f[i][0], f[i][1], f[i][2];
    return make_mesh(std::move(p), std::move(faces));
}

}  // namespace avk
