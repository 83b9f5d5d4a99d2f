#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "avatarkit/errors.hpp"
#include "avatarkit/types.hpp"

namespace avk {

/// Deformable tetrahedral grid over the [-0.5, 0.5]^3 working cube.
///
/// Every tet is stored with positive signed volume. A grid built by
/// build_grid() uses the six-tets-per-cube (Freudenthal) split, which is
/// conforming across neighbouring cubes.
struct TetGrid {
    Points vertices;
    Tets tets;
    int resolution = 0;

    /// Validates indices and orientation of a hand-built grid.
    TetGrid(Points verts, Tets tets_, int res);
    TetGrid() = default;

    Eigen::Index num_vertices() const { return vertices.rows(); }
    Eigen::Index num_tets() const { return tets.rows(); }
    double cell_size() const { return resolution > 0 ? 1.0 / resolution : 1.0; }
};

TetGrid build_grid(int resolution);

template <typename Scalar>
Scalar signed_tet_volume(const Vec3T<Scalar>& a, const Vec3T<Scalar>& b, const Vec3T<Scalar>& c,
                         const Vec3T<Scalar>& d) {
    return (b - a).dot((c - a).cross(d - a)) / Scalar(6);
}

// ---------------------------------------------------------------------------
// Procedural A-pose body proxy

template <typename Scalar>
Scalar capsule_sdf(const Vec3T<Scalar>& p, const Vec3& a, const Vec3& b, double radius) {
    const Vec3 ab = b - a;
    const Vec3T<Scalar> ap = p - a.cast<Scalar>();
    const double len2 = ab.squaredNorm();
    Scalar h = len2 > 0 ? Scalar(ap.dot(ab.cast<Scalar>()) / len2) : Scalar(0);
    using std::max;
    using std::min;
    h = min(max(h, Scalar(0)), Scalar(1));
    const Vec3T<Scalar> d = ap - ab.cast<Scalar>() * h;
    using std::sqrt;
    return sqrt(d.squaredNorm()) - Scalar(radius);
}

struct Capsule {
    Vec3 a;
    Vec3 b;
    double radius;
};

/// Capsule skeleton standing in for a parametric body model. Y is up, the
/// body faces +Z, all parts fit inside the working cube.
struct BodyShape {
    double torso_radius = 0.11;
    double torso_bottom = -0.06;
    double torso_top = 0.19;
    double head_radius = 0.085;
    double head_height = 0.36;
    double shoulder_offset = 0.12;
    double arm_length = 0.30;
    double arm_radius = 0.04;
    double arm_angle_deg = 45.0;  ///< below horizontal
    double hip_offset = 0.065;
    double leg_length = 0.32;
    double leg_radius = 0.055;
    double leg_spread_deg = 5.0;

    Vec3 head_center() const { return {0.0, head_height, 0.0}; }
    std::vector<Capsule> capsules() const;

    /// Proportions jittered by up to +-`amount` relative, deterministic in seed.
    static BodyShape randomized(std::uint64_t seed, double amount = 0.1);
};

/// Signed distance to the union of body parts (min over capsules; head is a
/// zero-length capsule).
template <typename Scalar>
Scalar capsule_body_sdf(const Vec3T<Scalar>& p, const BodyShape& body = {}) {
    const auto parts = body.capsules();
    Scalar best = capsule_sdf<Scalar>(p, parts[0].a, parts[0].b, parts[0].radius);
    for (std::size_t i = 1; i < parts.size(); ++i) {
        Scalar d = capsule_sdf<Scalar>(p, parts[i].a, parts[i].b, parts[i].radius);
        if (d < best) best = d;
    }
    return best;
}

/// Body part index closest to `p` (0 torso, 1 head, 2-3 arms, 4-5 legs).
int body_part(const Vec3& p, const BodyShape& body = {});

// ---------------------------------------------------------------------------
// Optimisable parameters

struct AvatarParams {
    std::shared_ptr<const TetGrid> grid;
    VectorXd sdf;
    Points deform;
    Points color;

    /// Deformed grid positions (vertices + deform).
    Points positions() const;
    double deform_bound() const { return 0.45 * grid->cell_size(); }
    void clamp_deform();
};

using ScalarField = std::function<double(const Vec3&)>;

AvatarParams init_params(std::shared_ptr<const TetGrid> grid, const ScalarField& sdf_fn);

// ---------------------------------------------------------------------------
// Marching tetrahedra

/// Surface vertex provenance: position = x_a + weight * (x_b - x_a), a < b.
struct EdgeCrossing {
    int a;
    int b;
    double weight;
};

struct SurfaceMesh {
    Points positions;
    Faces faces;
    Points vertex_colors;
    Points vertex_normals;
    std::vector<EdgeCrossing> provenance;
    /// Hash of the grid sign pattern the mesh was extracted from; 0 if the
    /// mesh was not produced by extract_mesh().
    std::uint64_t topology_key = 0;

    Eigen::Index num_vertices() const { return positions.rows(); }
    Eigen::Index num_faces() const { return faces.rows(); }
    bool empty() const { return faces.rows() == 0; }
};

/// SDF values actually used for extraction (exact zeros nudged to +1e-8).
VectorXd perturbed_sdf(const VectorXd& sdf);
std::uint64_t topology_key(const AvatarParams& params);

SurfaceMesh extract_mesh(const AvatarParams& params);

struct ParamGrad {
    VectorXd sdf;
    Points deform;
    Points color;
};

/// Reverse-mode derivative of extract_mesh with the sign configuration held
/// fixed. `d_colors` may be empty.
ParamGrad extract_mesh_vjp(const AvatarParams& params, const SurfaceMesh& mesh,
                           const Points& d_positions, const Points& d_colors = Points());

/// Area weighted vertex normals; isolated vertices get +Z.
Points compute_vertex_normals(const Points& positions, const Faces& faces);

/// Builds a mesh with normals from raw arrays (for loaded or hand-made meshes).
SurfaceMesh make_mesh(Points positions, Faces faces, Points colors = Points());

SurfaceMesh transformed(const SurfaceMesh& mesh, const Mat3& rotation, const Vec3& translation);

/// UV sphere, used as a smooth analytic fixture.
SurfaceMesh uv_sphere(double radius, int rings, int segments, const Vec3& center = Vec3::Zero());

}  // namespace avk
