#include "avatarkit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "avatarkit/errors.hpp"

namespace avk {

namespace {

Vec3 vertex(const SurfaceMesh& m, int f, int k) { return m.positions.row(m.faces(f, k)).transpose(); }

void require_mesh(const SurfaceMesh& m, const char* what) {
    if (m.empty()) throw InvalidArgument(std::string(what) + ": empty mesh");
}

double box_distance2(const Vec3& p, const Vec3& lo, const Vec3& hi) {
    double d2 = 0.0;
    for (int k = 0; k < 3; ++k) {
        const double v = std::max({lo[k] - p[k], 0.0, p[k] - hi[k]});
        d2 += v * v;
    }
    return d2;
}

struct Candidate {
    double d2 = std::numeric_limits<double>::infinity();
    int face = -1;
    Vec3 point = Vec3::Zero();

    void offer(const SurfaceMesh& m, int f, const Vec3& q) {
        const Vec3 c = closest_point_on_triangle(q, vertex(m, f, 0), vertex(m, f, 1), vertex(m, f, 2));
        const double d = (c - q).squaredNorm();
        if (d < d2 || (d == d2 && f < face)) {
            d2 = d;
            face = f;
            point = c;
        }
    }

    ClosestHit hit() const { return {std::sqrt(d2), face, point}; }
};

}  // namespace

PointCloud sample_surface(const SurfaceMesh& mesh, int n, Rng& rng) {
    require_mesh(mesh, "sample_surface");
    if (n < 1) throw InvalidArgument("sample_surface: n must be >= 1");
    const Eigen::Index nf = mesh.num_faces();
    std::vector<double> cdf(static_cast<std::size_t>(nf));
    Points fn(nf, 3);
    double total = 0.0;
    for (Eigen::Index f = 0; f < nf; ++f) {
        const Vec3 cr = (vertex(mesh, int(f), 1) - vertex(mesh, int(f), 0)).cross(vertex(mesh, int(f), 2) - vertex(mesh, int(f), 0));
        const double area = 0.5 * cr.norm();
        total += area;
        cdf[std::size_t(f)] = total;
        const Vec3 n = area > 0 ? Vec3(cr / cr.norm()) : Vec3(Vec3::UnitZ());
        fn.row(f) = n.transpose();
    }
    if (!(total > 0.0)) throw InvalidArgument("sample_surface: mesh has zero area");

    std::uniform_real_distribution<double> u01(0.0, 1.0);
    PointCloud pc;
    pc.points.resize(n, 3);
    pc.normals.resize(n, 3);
    for (int i = 0; i < n; ++i) {
        const double pick = u01(rng) * total;
        const auto it = std::upper_bound(cdf.begin(), cdf.end(), pick);
        const int f = int(std::min<std::ptrdiff_t>(it - cdf.begin(), nf - 1));
        const double r1 = std::sqrt(u01(rng)), r2 = u01(rng);
        const Vec3 p = (1 - r1) * vertex(mesh, f, 0) + r1 * (1 - r2) * vertex(mesh, f, 1) + r1 * r2 * vertex(mesh, f, 2);
        pc.points.row(i) = p.transpose();
        pc.normals.row(i) = fn.row(f);
    }
    return pc;
}

Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
    const Vec3 ab = b - a, ac = c - a, ap = p - a;
    const double d1 = ab.dot(ap), d2 = ac.dot(ap);
    if (d1 <= 0 && d2 <= 0) return a;

    const Vec3 bp = p - b;
    const double d3 = ab.dot(bp), d4 = ac.dot(bp);
    if (d3 >= 0 && d4 <= d3) return b;

    const double vc = d1 * d4 - d3 * d2;
    if (vc <= 0 && d1 >= 0 && d3 <= 0) return a + ab * (d1 / (d1 - d3));

    const Vec3 cp = p - c;
    const double d5 = ab.dot(cp), d6 = ac.dot(cp);
    if (d6 >= 0 && d5 <= d6) return c;

    const double vb = d5 * d2 - d1 * d6;
    if (vb <= 0 && d2 >= 0 && d6 <= 0) return a + ac * (d2 / (d2 - d6));

    const double va = d3 * d6 - d5 * d4;
    if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));

    const double denom = va + vb + vc;
    if (denom == 0.0) {
        // Degenerate (zero-area) triangle: nearest of its three edges.
        Vec3 best = a;
        double bd = (p - a).squaredNorm();
        const Vec3 ends[3][2] = {{a, b}, {b, c}, {c, a}};
        for (const auto& e : ends) {
            const Vec3 d = e[1] - e[0];
            const double len2 = d.squaredNorm();
            const double s = len2 > 0 ? std::clamp((p - e[0]).dot(d) / len2, 0.0, 1.0) : 0.0;
            const Vec3 q = e[0] + s * d;
            if ((p - q).squaredNorm() < bd) {
                bd = (p - q).squaredNorm();
                best = q;
            }
        }
        return best;
    }
    const double v = vb / denom, w = vc / denom;
    return a + ab * v + ac * w;
}

Bvh::Bvh(const SurfaceMesh& mesh, int leaf_size) : leaf_size_(leaf_size) {
    require_mesh(mesh, "Bvh");
    if (leaf_size < 1) throw InvalidArgument("Bvh: leaf_size must be >= 1");
    const int nf = int(mesh.num_faces());
    order_.resize(std::size_t(nf));
    std::iota(order_.begin(), order_.end(), 0);
    const auto count = static_cast<std::size_t>(nf);
    std::vector<Vec3> lo(count), hi(count), centroid(count);
    for (int f = 0; f < nf; ++f) {
        const Vec3 a = vertex(mesh, f, 0), b = vertex(mesh, f, 1), c = vertex(mesh, f, 2);
        lo[std::size_t(f)] = a.cwiseMin(b).cwiseMin(c);
        hi[std::size_t(f)] = a.cwiseMax(b).cwiseMax(c);
        centroid[std::size_t(f)] = (a + b + c) / 3.0;
    }

    struct Job {
        int node, begin, count;
    };
    nodes_.push_back({});
    std::vector<Job> stack{{0, 0, nf}};
    while (!stack.empty()) {
        const Job job = stack.back();
        stack.pop_back();
        Node node;
        node.lo = Vec3::Constant(std::numeric_limits<double>::infinity());
        node.hi = -node.lo;
        Vec3 clo = node.lo, chi = node.hi;
        for (int i = job.begin; i < job.begin + job.count; ++i) {
            const auto f = std::size_t(order_[std::size_t(i)]);
            node.lo = node.lo.cwiseMin(lo[f]);
            node.hi = node.hi.cwiseMax(hi[f]);
            clo = clo.cwiseMin(centroid[f]);
            chi = chi.cwiseMax(centroid[f]);
        }
        if (job.count <= leaf_size_) {
            node.begin = job.begin;
            node.count = job.count;
            nodes_[std::size_t(job.node)] = node;
            continue;
        }
        int axis = 0;
        (chi - clo).maxCoeff(&axis);
        const int half = job.count / 2;
        auto first = order_.begin() + job.begin;
        std::nth_element(first, first + half, first + job.count, [&](int x, int y) {
            const double cx = centroid[std::size_t(x)][axis], cy = centroid[std::size_t(y)][axis];
            return cx < cy || (cx == cy && x < y);
        });
        node.left = int(nodes_.size());
        node.right = node.left + 1;
        nodes_[std::size_t(job.node)] = node;
        nodes_.emplace_back();
        nodes_.emplace_back();
        stack.push_back({node.right, job.begin + half, job.count - half});
        stack.push_back({node.left, job.begin, half});
    }
}

ClosestHit closest_point(const Bvh& bvh, const SurfaceMesh& mesh, const Vec3& query) {
    require_mesh(mesh, "closest_point");
    if (bvh.num_faces() != mesh.num_faces()) throw InvalidArgument("closest_point: bvh was built for another mesh");
    const auto& nodes = bvh.nodes();
    Candidate best;
    std::vector<int> stack{0};
    while (!stack.empty()) {
        const Bvh::Node& n = nodes[std::size_t(stack.back())];
        stack.pop_back();
        // Equal bounds are still visited so ties can resolve to a lower index.
        if (box_distance2(query, n.lo, n.hi) > best.d2) continue;
        if (n.leaf()) {
            for (int i = n.begin; i < n.begin + n.count; ++i) best.offer(mesh, bvh.order()[std::size_t(i)], query);
            continue;
        }
        const double dl = box_distance2(query, nodes[std::size_t(n.left)].lo, nodes[std::size_t(n.left)].hi);
        const double dr = box_distance2(query, nodes[std::size_t(n.right)].lo, nodes[std::size_t(n.right)].hi);
        // Nearer child on top of the stack.
        if (dl <= dr) {
            stack.push_back(n.right);
            stack.push_back(n.left);
        } else {
            stack.push_back(n.left);
            stack.push_back(n.right);
        }
    }
    return best.hit();
}

ClosestHit closest_point_brute(const SurfaceMesh& mesh, const Vec3& query) {
    require_mesh(mesh, "closest_point_brute");
    Candidate best;
    for (int f = 0; f < int(mesh.num_faces()); ++f) best.offer(mesh, f, query);
    return best.hit();
}

VectorXd surface_distances(const Points& points, const SurfaceMesh& mesh, Accel accel) {
    require_mesh(mesh, "surface_distances");
    VectorXd d(points.rows());
    if (accel == Accel::brute_force) {
        for (Eigen::Index i = 0; i < points.rows(); ++i) d[i] = closest_point_brute(mesh, points.row(i).transpose()).distance;
        return d;
    }
    const Bvh bvh(mesh);
    for (Eigen::Index i = 0; i < points.rows(); ++i) d[i] = closest_point(bvh, mesh, points.row(i).transpose()).distance;
    return d;
}

double chamfer_cm(const SurfaceMesh& a, const SurfaceMesh& b, int n, Rng& rng, Accel accel) {
    require_mesh(a, "chamfer_cm");
    require_mesh(b, "chamfer_cm");
    const PointCloud sa = sample_surface(a, n, rng);
    const PointCloud sb = sample_surface(b, n, rng);
    return 100.0 * 0.5 * (surface_distances(sa.points, b, accel).mean() + surface_distances(sb.points, a, accel).mean());
}

double p2s_cm(const PointCloud& scan, const SurfaceMesh& mesh, Accel accel) {
    if (scan.size() == 0) throw InvalidArgument("p2s_cm: empty point cloud");
    require_mesh(mesh, "p2s_cm");
    if (!scan.points.allFinite()) throw InvalidArgument("p2s_cm: non-finite scan point");
    return 100.0 * surface_distances(scan.points, mesh, accel).mean();
}

NormalL2 normal_l2_views(const SurfaceMesh& a, const SurfaceMesh& b, int render_size) {
    require_mesh(a, "normal_l2");
    require_mesh(b, "normal_l2");
    RenderOptions opts;
    opts.width = opts.height = render_size;
    NormalL2 out;
    double sum = 0.0;
    int used = 0;
    for (const CameraSample& cam : metric_views()) {
        const Image ra = render(a, cam, RenderMode::normal, opts);
        const Image rb = render(b, cam, RenderMode::normal, opts);
        double acc = 0.0;
        long count = 0;
        for (int y = 0; y < render_size; ++y)
            for (int x = 0; x < render_size; ++x) {
                const std::size_t p = std::size_t(y) * std::size_t(render_size) + std::size_t(x);
                const bool fa = ra.foreground[p], fb = rb.foreground[p];
                if (!fa && !fb) continue;
                const Vec3 na = fa ? decode_normal(ra, x, y).normalized() : Vec3::Zero();
                const Vec3 nb = fb ? decode_normal(rb, x, y).normalized() : Vec3::Zero();
                acc += (na - nb).squaredNorm();
                ++count;
            }
        if (count == 0) {
            out.per_view.push_back(std::numeric_limits<double>::quiet_NaN());
            continue;
        }
        out.per_view.push_back(acc / double(count));
        sum += out.per_view.back();
        ++used;
    }
    if (used == 0) throw InvalidArgument("normal_l2: both meshes are empty in every metric view");
    out.mean = sum / used;
    return out;
}

double normal_l2(const SurfaceMesh& a, const SurfaceMesh& b, int render_size) {
    return normal_l2_views(a, b, render_size).mean;
}

double psnr_db(const Image& a, const Image& b) {
    if (!a.same_shape(b) || a.data.size() == 0) throw InvalidArgument("psnr_db: image dimensions differ");
    const double mse = (a.data - b.data).squaredNorm() / double(a.data.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 20.0 * std::log10(1.0 / std::sqrt(mse));
}

double ssim(const Image& a, const Image& b) {
    constexpr int kWin = 11;
    constexpr double kSigma = 1.5, C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    if (!a.same_shape(b)) throw InvalidArgument("ssim: image dimensions differ");
    if (a.channels != 3) throw InvalidArgument("ssim: expected 3 channels");
    if (a.width < kWin || a.height < kWin) throw InvalidArgument("ssim: image smaller than the 11x11 window");

    double g[kWin];
    double gs = 0.0;
    for (int i = 0; i < kWin; ++i) {
        const double d = i - kWin / 2;
        g[i] = std::exp(-d * d / (2 * kSigma * kSigma));
        gs += g[i];
    }
    for (double& v : g) v /= gs;

    const int w = a.width, h = a.height, ow = w - kWin + 1, oh = h - kWin + 1;
    // Separable valid filtering: rows first into (ow x h), then columns into (ow x oh).
    auto filter = [&](const MatrixXd& src) {
        MatrixXd rows = MatrixXd::Zero(h, ow);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < ow; ++x)
                for (int k = 0; k < kWin; ++k) rows(y, x) += g[k] * src(y, x + k);
        MatrixXd out = MatrixXd::Zero(oh, ow);
        for (int y = 0; y < oh; ++y)
            for (int k = 0; k < kWin; ++k) out.row(y) += g[k] * rows.row(y + k);
        return out;
    };

    double total = 0.0;
    for (int c = 0; c < 3; ++c) {
        MatrixXd x(h, w), y(h, w);
        for (int r = 0; r < h; ++r)
            for (int q = 0; q < w; ++q) {
                x(r, q) = a.at(q, r, c);
                y(r, q) = b.at(q, r, c);
            }
        const MatrixXd mx = filter(x), my = filter(y);
        const MatrixXd sxx = filter(x.cwiseProduct(x)) - mx.cwiseProduct(mx);
        const MatrixXd syy = filter(y.cwiseProduct(y)) - my.cwiseProduct(my);
        const MatrixXd sxy = filter(x.cwiseProduct(y)) - mx.cwiseProduct(my);
        const auto num = (2 * mx.cwiseProduct(my).array() + C1) * (2 * sxy.array() + C2);
        const auto den = (mx.array().square() + my.array().square() + C1) * (sxx.array() + syy.array() + C2);
        total += (num / den).mean();
    }
    return total / 3.0;
}

// ---------------------------------------------------------------------------

nlohmann::json metric_fingerprint(const MetricConfig& cfg) {
    return {{"seed", cfg.seed},
            {"samples", cfg.samples},
            {"render_size", cfg.render_size},
            {"normal_error", "unit-vector squared difference over the foreground union"},
            {"image_metrics", "full composited image, white background"},
            {"lpips", "n/a"}};
}

namespace {

const char* kViewNames[4] = {"0", "90", "180", "270"};

void fill_image_metrics(MetricReport& r, const SurfaceMesh& pred, const std::vector<Image>& reference,
                        const RenderOptions& opts) {
    const auto cams = metric_views();
    double ps = 0.0, ss = 0.0;
    bool inf = false;
    for (std::size_t v = 0; v < cams.size(); ++v) {
        const Image img = render(pred, cams[v], RenderMode::color, opts);
        const double p = psnr_db(img, reference[v]);
        const double s = ssim(img, reference[v]);
        r.views[v].psnr_db = p;
        r.views[v].ssim = s;
        if (std::isinf(p)) inf = true;
        else ps += p;
        ss += s;
    }
    r.psnr_db = inf ? std::numeric_limits<double>::infinity() : ps / double(cams.size());
    r.ssim = ss / double(cams.size());
}

bool has_colors(const SurfaceMesh& m) { return m.vertex_colors.rows() == m.positions.rows() && m.num_vertices() > 0; }

}  // namespace

MetricReport evaluate(const SurfaceMesh& pred, const SurfaceMesh& truth, const std::optional<PointCloud>& scan,
                      const MetricConfig& cfg) {
    if (cfg.samples < 1 || cfg.render_size < 11) throw InvalidArgument("evaluate: bad metric config");
    MetricReport r;
    r.fingerprint = metric_fingerprint(cfg);
    for (const char* name : kViewNames) r.views.push_back({name, {}, {}, {}});

    Rng rng(cfg.seed);
    r.chamfer_cm = chamfer_cm(pred, truth, cfg.samples, rng);
    const PointCloud pts = scan ? *scan : sample_surface(truth, cfg.samples, rng);
    r.p2s_cm = p2s_cm(pts, pred);

    const NormalL2 nl = normal_l2_views(pred, truth, cfg.render_size);
    r.normal_l2 = nl.mean;
    for (std::size_t v = 0; v < nl.per_view.size(); ++v)
        if (!std::isnan(nl.per_view[v])) r.views[v].normal_l2 = nl.per_view[v];

    if (has_colors(pred) && has_colors(truth)) {
        RenderOptions opts;
        opts.width = opts.height = cfg.render_size;
        std::vector<Image> ref;
        for (const auto& cam : metric_views()) ref.push_back(render(truth, cam, RenderMode::color, opts));
        fill_image_metrics(r, pred, ref, opts);
    }
    return r;
}

MetricReport evaluate_images(const SurfaceMesh& pred, const std::vector<Image>& reference, const MetricConfig& cfg) {
    if (reference.size() != 4) throw InvalidArgument("evaluate_images: need one reference image per metric view");
    if (!has_colors(pred)) throw InvalidArgument("evaluate_images: mesh has no vertex colors");
    MetricReport r;
    r.fingerprint = metric_fingerprint(cfg);
    for (const char* name : kViewNames) r.views.push_back({name, {}, {}, {}});
    RenderOptions opts;
    opts.width = reference[0].width;
    opts.height = reference[0].height;
    fill_image_metrics(r, pred, reference, opts);
    return r;
}

namespace {

nlohmann::json opt_json(const std::optional<double>& v) {
    if (!v) return nullptr;
    if (std::isinf(*v)) return *v > 0 ? "inf" : "-inf";
    return *v;
}

std::optional<double> opt_from(const nlohmann::json& j) {
    if (j.is_null()) return std::nullopt;
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        if (s == "n/a") return std::nullopt;
        throw InvalidArgument("metric value: unexpected string '" + s + "'");
    }
    return j.get<double>();
}

}  // namespace

void to_json(nlohmann::json& j, const MetricReport& r) {
    j = {{"chamfer_cm", opt_json(r.chamfer_cm)},
         {"p2s_cm", opt_json(r.p2s_cm)},
         {"normal_l2", opt_json(r.normal_l2)},
         {"psnr_db", opt_json(r.psnr_db)},
         {"ssim", opt_json(r.ssim)},
         {"fingerprint", r.fingerprint}};
    j["views"] = nlohmann::json::array();
    for (const auto& v : r.views)
        j["views"].push_back(
            {{"view", v.view}, {"normal_l2", opt_json(v.normal_l2)}, {"psnr_db", opt_json(v.psnr_db)}, {"ssim", opt_json(v.ssim)}});
}

void from_json(const nlohmann::json& j, MetricReport& r) {
    r.chamfer_cm = opt_from(j.at("chamfer_cm"));
    r.p2s_cm = opt_from(j.at("p2s_cm"));
    r.normal_l2 = opt_from(j.at("normal_l2"));
    r.psnr_db = opt_from(j.at("psnr_db"));
    r.ssim = opt_from(j.at("ssim"));
    r.fingerprint = j.value("fingerprint", nlohmann::json::object());
    r.views.clear();
    for (const auto& v : j.value("views", nlohmann::json::array()))
        r.views.push_back({v.at("view").get<std::string>(), opt_from(v.at("normal_l2")), opt_from(v.at("psnr_db")),
                           opt_from(v.at("ssim"))});
}

std::string format_metric(const std::optional<double>& v) {
    if (!v) return "n/a";
    if (std::isinf(*v)) return *v > 0 ? "inf" : "-inf";
    std::ostringstream os;
    os << std::fixed << std::setprecision(6) << *v;
    return os.str();
}

std::string metrics_csv(const std::vector<std::pair<std::string, MetricReport>>& rows) {
    std::ostringstream os;
    os << "label,chamfer_cm,p2s_cm,normal_l2,psnr_db,ssim,lpips\n";
    for (const auto& [label, r] : rows)
        os << label << ',' << format_metric(r.chamfer_cm) << ',' << format_metric(r.p2s_cm) << ','
           << format_metric(r.normal_l2) << ',' << format_metric(r.psnr_db) << ',' << format_metric(r.ssim) << ",n/a\n";
    return os.str();
}

std::string metrics_markdown(const std::vector<std::pair<std::string, MetricReport>>& rows) {
    std::ostringstream os;
    os << "| Method | Chamfer (cm) ↓ | P2S (cm) ↓ | Normal ↓ | PSNR ↑ | SSIM ↑ | LPIPS ↓ |\n";
    os << "|---|---|---|---|---|---|---|\n";
    for (const auto& [label, r] : rows)
        os << "| " << label << " | " << format_metric(r.chamfer_cm) << " | " << format_metric(r.p2s_cm) << " | "
           << format_metric(r.normal_l2) << " | " << format_metric(r.psnr_db) << " | " << format_metric(r.ssim)
           << " | n/a |\n";
    return os.str();
}

}  // namespace avk
