#pragma once

#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "avatarkit/camrig.hpp"
#include "avatarkit/geometry.hpp"
#include "avatarkit/raster.hpp"

namespace avk {

struct PointCloud {
    Points points;
    Points normals;  ///< empty or one row per point

    Eigen::Index size() const { return points.rows(); }
};

/// Area-weighted triangle choice, uniform barycentric placement. Normals are
/// the sampled triangles' face normals.
PointCloud sample_surface(const SurfaceMesh& mesh, int n, Rng& rng);

struct ClosestHit {
    double distance = std::numeric_limits<double>::infinity();
    int face = -1;
    Vec3 point = Vec3::Zero();
};

/// Closest point on triangle (a, b, c) to p.
Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

/// Axis-aligned box tree over a mesh's triangles (median split on the
/// longest centroid axis).
class Bvh {
public:
    struct Node {
        Vec3 lo;
        Vec3 hi;
        int left = -1;   ///< child node indices, -1 for leaves
        int right = -1;
        int begin = 0;   ///< leaf range into order()
        int count = 0;

        bool leaf() const { return left < 0; }
    };

    explicit Bvh(const SurfaceMesh& mesh, int leaf_size = 4);

    const std::vector<Node>& nodes() const { return nodes_; }
    /// Triangle indices, grouped by leaf.
    const std::vector<int>& order() const { return order_; }
    Eigen::Index num_faces() const { return Eigen::Index(order_.size()); }
    int leaf_size() const { return leaf_size_; }

private:
    std::vector<Node> nodes_;
    std::vector<int> order_;
    int leaf_size_;
};

/// Exact nearest triangle; equal distances resolve to the lowest face index.
ClosestHit closest_point(const Bvh& bvh, const SurfaceMesh& mesh, const Vec3& query);
/// Same result by scanning every triangle.
ClosestHit closest_point_brute(const SurfaceMesh& mesh, const Vec3& query);

enum class Accel { bvh, brute_force };

/// Distances (meters) from each point to the mesh surface.
VectorXd surface_distances(const Points& points, const SurfaceMesh& mesh, Accel accel = Accel::bvh);

/// 100 * 0.5 * (mean d(A samples, B) + mean d(B samples, A)); A is sampled
/// first, then B, from the same generator.
double chamfer_cm(const SurfaceMesh& a, const SurfaceMesh& b, int n, Rng& rng, Accel accel = Accel::bvh);

/// 100 * mean distance from the scan points to the mesh.
double p2s_cm(const PointCloud& scan, const SurfaceMesh& mesh, Accel accel = Accel::bvh);

struct NormalL2 {
    double mean = 0.0;
    /// One entry per metric view; NaN where both renders were empty.
    std::vector<double> per_view;
};

/// Squared unit-normal difference averaged over the foreground union of each
/// metric view, then over the non-empty views. Background decodes to the
/// zero vector, so a pixel covered by one mesh only contributes 1.
NormalL2 normal_l2_views(const SurfaceMesh& a, const SurfaceMesh& b, int render_size = 256);
double normal_l2(const SurfaceMesh& a, const SurfaceMesh& b, int render_size = 256);

/// +inf when the images are identical.
double psnr_db(const Image& a, const Image& b);
double ssim(const Image& a, const Image& b);

// ---------------------------------------------------------------------------
// Reports

struct MetricConfig {
    int samples = 100000;
    int render_size = 256;
    std::uint64_t seed = 0;
};

struct ViewMetrics {
    std::string view;
    std::optional<double> normal_l2;
    std::optional<double> psnr_db;
    std::optional<double> ssim;
};

struct MetricReport {
    std::optional<double> chamfer_cm;
    std::optional<double> p2s_cm;
    std::optional<double> normal_l2;
    std::optional<double> psnr_db;
    std::optional<double> ssim;
    std::vector<ViewMetrics> views;
    nlohmann::json fingerprint = nlohmann::json::object();
};

/// Seed, sample count, render size and the metric conventions in use.
nlohmann::json metric_fingerprint(const MetricConfig& cfg);

/// Full 3D + 2D comparison against a ground-truth mesh. P2S uses `scan`
/// when given, else samples of the ground-truth surface. PSNR/SSIM need
/// vertex colors on both meshes and are left empty otherwise.
MetricReport evaluate(const SurfaceMesh& pred, const SurfaceMesh& truth, const std::optional<PointCloud>& scan,
                      const MetricConfig& cfg);

/// 2D-only comparison of a mesh's color renders against reference images
/// (one per metric view); 3D fields stay empty.
MetricReport evaluate_images(const SurfaceMesh& pred, const std::vector<Image>& reference, const MetricConfig& cfg);

void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);

/// "n/a" for empty, "inf" for infinite values, otherwise fixed 6-decimal.
std::string format_metric(const std::optional<double>& v);

/// label,chamfer_cm,p2s_cm,normal_l2,psnr_db,ssim,lpips
std::string metrics_csv(const std::vector<std::pair<std::string, MetricReport>>& rows);
/// Chamfer / P2S / Normal (down) and PSNR / SSIM / LPIPS (up) table.
std::string metrics_markdown(const std::vector<std::pair<std::string, MetricReport>>& rows);

}  // namespace avk
