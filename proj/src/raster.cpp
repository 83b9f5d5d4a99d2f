#include "avatarkit/raster.hpp"

#include <algorithm>
#include <limits>
#include <string>
#include <unordered_map>

#include <unsupported/Eigen/AutoDiff>

namespace avk {

namespace {

constexpr double kDeg = 3.14159265358979323846 / 180.0;

using Ad9 = Eigen::AutoDiffScalar<Eigen::Matrix<double, 9, 1>>;
using Ad6 = Eigen::AutoDiffScalar<Eigen::Matrix<double, 6, 1>>;

Vec3 row(const Points& p, Eigen::Index i) { return p.row(i).transpose(); }

struct Screen {
    Points xyw;  ///< per vertex (pixel x, pixel y, depth)
};

Screen project_all(const SurfaceMesh& mesh, const CameraFrame& frame) {
    Screen s;
    s.xyw.resize(mesh.num_vertices(), 3);
    for (Eigen::Index v = 0; v < mesh.num_vertices(); ++v) {
        const Vec3 p = row(mesh.positions, v);
        if (!p.allFinite()) throw NumericError("render: non-finite vertex " + std::to_string(v));
        s.xyw.row(v) = frame.project<double>(p).transpose();
    }
    return s;
}

// Edge function evaluated with endpoints in a canonical order so that the two
// triangles sharing an edge see exactly negated values.
double edge_fn(const Vec2& u, const Vec2& v, double px, double py) {
    const bool swap = (u.x() > v.x()) || (u.x() == v.x() && u.y() > v.y());
    const Vec2& a = swap ? v : u;
    const Vec2& b = swap ? u : v;
    const double e = (b.x() - a.x()) * (py - a.y()) - (b.y() - a.y()) * (px - a.x());
    return swap ? -e : e;
}

bool top_left(const Vec2& from, const Vec2& to) {
    const double dx = to.x() - from.x(), dy = to.y() - from.y();
    return dy < 0 || (dy == 0 && dx > 0);
}

std::uint64_t render_token(const SurfaceMesh& mesh, const CameraSample& cam, RenderMode mode,
                           const RenderOptions& opts) {
    std::uint64_t h = hash_dense(mesh.positions);
    h = hash_dense(mesh.faces, h);
    if (mode == RenderMode::color) h = hash_dense(mesh.vertex_colors, h);
    const double cam_vals[] = {cam.position.x(), cam.position.y(), cam.position.z(), cam.target.x(),
                               cam.target.y(),   cam.target.z(),   cam.up.x(),       cam.up.y(),
                               cam.up.z(),       cam.fov_y};
    h = fnv1a(cam_vals, sizeof(cam_vals), h);
    const int ints[] = {static_cast<int>(mode), opts.width, opts.height};
    return fnv1a(ints, sizeof(ints), h);
}

Vec3 background(RenderMode mode, const RenderOptions& opts) {
    switch (mode) {
        case RenderMode::color: return opts.color_background;
        case RenderMode::normal: return opts.normal_background;
        case RenderMode::mask: return Vec3::Zero();
    }
    return Vec3::Zero();
}

int mode_channels(RenderMode mode) { return mode == RenderMode::mask ? 1 : 3; }

Vec3 pixel_center(int idx, int width) { return Vec3(idx % width + 0.5, idx / width + 0.5, 0); }

void check_forward(const SurfaceMesh& mesh, const CameraSample& camera, RenderMode mode, const Image& forward,
                   const RenderOptions& opts, const char* who) {
    if (forward.token == 0 || forward.token != render_token(mesh, camera, mode, opts) ||
        forward.face_id.size() != static_cast<std::size_t>(forward.pixels()))
        throw StaleState(std::string(who) + ": forward pass does not match inputs (stale coverage)");
}

}  // namespace

CameraFrame::CameraFrame(const CameraSample& cam, int w, int h) : eye(cam.position), width(w), height(h) {
    const Vec3 fwd = (cam.target - cam.position).normalized();
    Vec3 right = fwd.cross(cam.up);
    if (right.norm() < 1e-9) right = fwd.cross(Vec3::UnitZ());
    right.normalize();
    const Vec3 up = right.cross(fwd);
    rotation.row(0) = right.transpose();
    rotation.row(1) = up.transpose();
    rotation.row(2) = -fwd.transpose();
    focal = 1.0 / std::tan(0.5 * cam.fov_y * kDeg);
}

Image render(const SurfaceMesh& mesh, const CameraSample& camera, RenderMode mode, const RenderOptions& opts) {
    const int W = opts.width, H = opts.height;
    const int C = mode_channels(mode);
    const Vec3 bg = background(mode, opts);
    Image img(W, H, C);
    for (Eigen::Index p = 0; p < img.pixels(); ++p)
        for (int c = 0; c < C; ++c) img.data[p * C + c] = bg[c];
    img.face_id.assign(static_cast<std::size_t>(img.pixels()), -1);
    img.depth.assign(static_cast<std::size_t>(img.pixels()), std::numeric_limits<double>::infinity());
    img.token = render_token(mesh, camera, mode, opts);
    if (mesh.empty()) return img;

    const CameraFrame frame(camera, W, H);
    const Screen scr = project_all(mesh, frame);

    for (Eigen::Index f = 0; f < mesh.num_faces(); ++f) {
        const int i0 = mesh.faces(f, 0), i1 = mesh.faces(f, 1), i2 = mesh.faces(f, 2);
        const double w0 = scr.xyw(i0, 2), w1 = scr.xyw(i1, 2), w2 = scr.xyw(i2, 2);
        if (w0 < opts.near || w1 < opts.near || w2 < opts.near) continue;
        const Vec2 p0(scr.xyw(i0, 0), scr.xyw(i0, 1)), p1(scr.xyw(i1, 0), scr.xyw(i1, 1)),
            p2(scr.xyw(i2, 0), scr.xyw(i2, 1));
        const double area = edge_fn(p0, p1, p2.x(), p2.y());
        if (area == 0 || !std::isfinite(area)) continue;
        const double sgn = area > 0 ? 1.0 : -1.0;
        // Edges directed along the positive orientation, opposite vertex k.
        const Vec2* from[3] = {&p1, &p2, &p0};
        const Vec2* to[3] = {&p2, &p0, &p1};
        if (sgn < 0)
            for (int k = 0; k < 3; ++k) std::swap(from[k], to[k]);
        bool incl[3];
        for (int k = 0; k < 3; ++k) incl[k] = top_left(*from[k], *to[k]);

        const int x0 = std::max(0, static_cast<int>(std::ceil(std::min({p0.x(), p1.x(), p2.x()}) - 0.5)));
        const int x1 = std::min(W - 1, static_cast<int>(std::floor(std::max({p0.x(), p1.x(), p2.x()}) - 0.5)));
        const int y0 = std::max(0, static_cast<int>(std::ceil(std::min({p0.y(), p1.y(), p2.y()}) - 0.5)));
        const int y1 = std::min(H - 1, static_cast<int>(std::floor(std::max({p0.y(), p1.y(), p2.y()}) - 0.5)));
        for (int y = y0; y <= y1; ++y) {
            const double py = y + 0.5;
            for (int x = x0; x <= x1; ++x) {
                const double px = x + 0.5;
                const double e[3] = {sgn * edge_fn(p1, p2, px, py), sgn * edge_fn(p2, p0, px, py),
                                     sgn * edge_fn(p0, p1, px, py)};
                bool inside = true;
                for (int k = 0; k < 3 && inside; ++k) inside = e[k] > 0 || (e[k] == 0 && incl[k]);
                if (!inside) continue;
                const double a = std::abs(area);
                const double inv_w = e[0] / a / w0 + e[1] / a / w1 + e[2] / a / w2;
                const double depth = 1.0 / inv_w;
                const auto pix = static_cast<std::size_t>(y) * W + x;
                if (depth < img.depth[pix]) {
                    img.depth[pix] = depth;
                    img.face_id[pix] = static_cast<std::int32_t>(f);
                }
            }
        }
    }

    for (Eigen::Index pix = 0; pix < img.pixels(); ++pix) {
        const int f = img.face_id[static_cast<std::size_t>(pix)];
        if (f < 0) continue;
        img.foreground[static_cast<std::size_t>(pix)] = 1;
        const Vec3 a = row(mesh.positions, mesh.faces(f, 0)), b = row(mesh.positions, mesh.faces(f, 1)),
                   c = row(mesh.positions, mesh.faces(f, 2));
        Vec3 value;
        switch (mode) {
            case RenderMode::mask: value = Vec3::Ones(); break;
            case RenderMode::normal:
                value = 0.5 * (frame.rotation * face_normal<double>(a, b, c) + Vec3::Ones());
                break;
            case RenderMode::color: {
                const Vec3 pc = pixel_center(static_cast<int>(pix), W);
                const Vec3 bary = pixel_barycentrics<double>(a, b, c, frame, pc.x(), pc.y());
                value = Vec3::Zero();
                for (int k = 0; k < 3; ++k) value += bary[k] * row(mesh.vertex_colors, mesh.faces(f, k));
                break;
            }
        }
        for (int ch = 0; ch < C; ++ch) img.data[pix * C + ch] = value[ch];
    }
    return img;
}

RenderGrad render_vjp(const SurfaceMesh& mesh, const CameraSample& camera, RenderMode mode, const Image& forward,
                      const Image& cotangent, const RenderOptions& opts) {
    check_forward(mesh, camera, mode, forward, opts, "render_vjp");
    if (!cotangent.same_shape(forward)) throw InvalidArgument("render_vjp: cotangent shape mismatch");
    RenderGrad g{Points::Zero(mesh.num_vertices(), 3), Points::Zero(mesh.num_vertices(), 3)};
    if (mode == RenderMode::mask || mesh.empty()) return g;

    const CameraFrame frame(camera, forward.width, forward.height);
    const int C = forward.channels;

    if (mode == RenderMode::normal) {
        // Flat shading: every covered pixel of a face shares one value, so the
        // pixel cotangents are summed per face first.
        Points face_cot = Points::Zero(mesh.num_faces(), 3);
        std::vector<std::uint8_t> touched(static_cast<std::size_t>(mesh.num_faces()), 0);
        for (Eigen::Index pix = 0; pix < forward.pixels(); ++pix) {
            const int f = forward.face_id[static_cast<std::size_t>(pix)];
            if (f < 0) continue;
            touched[static_cast<std::size_t>(f)] = 1;
            for (int ch = 0; ch < 3; ++ch) face_cot(f, ch) += cotangent.data[pix * C + ch];
        }
        for (Eigen::Index f = 0; f < mesh.num_faces(); ++f) {
            if (!touched[static_cast<std::size_t>(f)]) continue;
            Vec3T<Ad9> v[3];
            for (int k = 0; k < 3; ++k)
                for (int d = 0; d < 3; ++d)
                    v[k][d] = Ad9(mesh.positions(mesh.faces(f, k), d), 9, 3 * k + d);
            const Vec3T<Ad9> n = face_normal<Ad9>(v[0], v[1], v[2]);
            const Vec3 w = 0.5 * frame.rotation.transpose() * row(face_cot, f);
            const Ad9 s = n[0] * w[0] + n[1] * w[1] + n[2] * w[2];
            for (int k = 0; k < 3; ++k)
                for (int d = 0; d < 3; ++d) g.positions(mesh.faces(f, k), d) += s.derivatives()[3 * k + d];
        }
        return g;
    }

    for (Eigen::Index pix = 0; pix < forward.pixels(); ++pix) {
        const int f = forward.face_id[static_cast<std::size_t>(pix)];
        if (f < 0) continue;
        const Vec3 cot(cotangent.data[pix * C], cotangent.data[pix * C + 1], cotangent.data[pix * C + 2]);
        if (cot.isZero(0)) continue;
        Vec3T<Ad9> v[3];
        for (int k = 0; k < 3; ++k)
            for (int d = 0; d < 3; ++d) v[k][d] = Ad9(mesh.positions(mesh.faces(f, k), d), 9, 3 * k + d);
        const Vec3 pc = pixel_center(static_cast<int>(pix), forward.width);
        const Vec3T<Ad9> bary = pixel_barycentrics<Ad9>(v[0], v[1], v[2], frame, pc.x(), pc.y());
        Ad9 s(0.0, Eigen::Matrix<double, 9, 1>::Zero());
        for (int k = 0; k < 3; ++k) {
            const Vec3 col = row(mesh.vertex_colors, mesh.faces(f, k));
            s += bary[k] * col.dot(cot);
            g.colors.row(mesh.faces(f, k)) += bary[k].value() * cot.transpose();
        }
        for (int k = 0; k < 3; ++k)
            for (int d = 0; d < 3; ++d) g.positions(mesh.faces(f, k), d) += s.derivatives()[3 * k + d];
    }
    return g;
}

// ---------------------------------------------------------------------------
// Silhouette antialiasing

namespace {

struct AaPair {
    int inner;  ///< pixel covered by the occluding face
    int outer;
    int va;
    int vb;
    double alpha;  ///< crossing position along inner -> outer, in [0, 1]
};

template <typename Scalar>
Scalar crossing_alpha(const Vec3T<Scalar>& a3, const Vec3T<Scalar>& b3, const CameraFrame& frame, const Vec3& ci,
                      const Vec3& co) {
    const Vec3T<Scalar> a = frame.project(a3), b = frame.project(b3);
    auto e = [&](const Vec3& c) -> Scalar {
        return (b.x() - a.x()) * (Scalar(c.y()) - a.y()) - (b.y() - a.y()) * (Scalar(c.x()) - a.x());
    };
    const Scalar ei = e(ci), eo = e(co);
    return ei / (ei - eo);
}

std::vector<AaPair> find_aa_pairs(const SurfaceMesh& mesh, const CameraFrame& frame, const Image& fwd) {
    std::vector<AaPair> pairs;
    if (mesh.empty()) return pairs;
    const Screen scr = project_all(mesh, frame);

    std::vector<double> orient(static_cast<std::size_t>(mesh.num_faces()));
    for (Eigen::Index f = 0; f < mesh.num_faces(); ++f) {
        const Vec2 p0 = scr.xyw.row(mesh.faces(f, 0)).head<2>().transpose();
        const Vec2 p1 = scr.xyw.row(mesh.faces(f, 1)).head<2>().transpose();
        const Vec2 p2 = scr.xyw.row(mesh.faces(f, 2)).head<2>().transpose();
        orient[static_cast<std::size_t>(f)] = edge_fn(p0, p1, p2.x(), p2.y());
    }
    std::unordered_map<std::uint64_t, std::vector<int>> adjacency;
    auto key = [](int a, int b) {
        if (a > b) std::swap(a, b);
        return (std::uint64_t(std::uint32_t(a)) << 32) | std::uint32_t(b);
    };
    for (Eigen::Index f = 0; f < mesh.num_faces(); ++f)
        for (int k = 0; k < 3; ++k)
            adjacency[key(mesh.faces(f, k), mesh.faces(f, (k + 1) % 3))].push_back(static_cast<int>(f));

    auto silhouette = [&](int f, int a, int b) {
        const auto& adj = adjacency[key(a, b)];
        if (adj.size() < 2) return true;
        const double s = orient[static_cast<std::size_t>(f)];
        for (int g : adj)
            if (g != f && (orient[static_cast<std::size_t>(g)] > 0) != (s > 0)) return true;
        return false;
    };

    const int W = fwd.width, H = fwd.height;
    auto visit = [&](int p, int q) {
        const int fp = fwd.face_id[static_cast<std::size_t>(p)], fq = fwd.face_id[static_cast<std::size_t>(q)];
        if (fp == fq) return;
        int inner = p, outer = q, f = fp;
        if (fp < 0 || (fq >= 0 && fwd.depth[static_cast<std::size_t>(q)] < fwd.depth[static_cast<std::size_t>(p)])) {
            inner = q;
            outer = p;
            f = fq;
        }
        const Vec3 ci = pixel_center(inner, W), co = pixel_center(outer, W);
        double best = 2.0;
        AaPair found{};
        for (int k = 0; k < 3; ++k) {
            const int a = mesh.faces(f, k), b = mesh.faces(f, (k + 1) % 3);
            if (!silhouette(f, a, b)) continue;
            const Vec2 pa = scr.xyw.row(a).head<2>().transpose(), pb = scr.xyw.row(b).head<2>().transpose();
            const double ei = (pb.x() - pa.x()) * (ci.y() - pa.y()) - (pb.y() - pa.y()) * (ci.x() - pa.x());
            const double eo = (pb.x() - pa.x()) * (co.y() - pa.y()) - (pb.y() - pa.y()) * (co.x() - pa.x());
            if (ei == eo || (ei > 0) == (eo > 0)) continue;
            const double alpha = ei / (ei - eo);
            const Vec2 x = ci.head<2>() + alpha * (co - ci).head<2>();
            const double len2 = (pb - pa).squaredNorm();
            if (len2 == 0) continue;
            const double t = (x - pa).dot(pb - pa) / len2;
            if (t < 0 || t > 1) continue;
            if (alpha < best) {
                best = alpha;
                found = {inner, outer, a, b, alpha};
            }
        }
        if (best <= 1.0) pairs.push_back(found);
    };
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const int p = y * W + x;
            if (x + 1 < W) visit(p, p + 1);
            if (y + 1 < H) visit(p, p + W);
        }
    return pairs;
}

}  // namespace

Image antialias(const SurfaceMesh& mesh, const CameraSample& camera, const Image& forward, const RenderOptions&) {
    if (forward.face_id.size() != static_cast<std::size_t>(forward.pixels()))
        throw InvalidArgument("antialias: forward image carries no coverage");
    Image out = forward;
    const CameraFrame frame(camera, forward.width, forward.height);
    const int C = forward.channels;
    for (const AaPair& pr : find_aa_pairs(mesh, frame, forward)) {
        const bool blend_inner = pr.alpha < 0.5;
        const int j = blend_inner ? pr.inner : pr.outer;
        const int k = blend_inner ? pr.outer : pr.inner;
        const double beta = blend_inner ? 0.5 - pr.alpha : pr.alpha - 0.5;
        for (int ch = 0; ch < C; ++ch)
            out.data[Eigen::Index(j) * C + ch] += beta * (forward.data[Eigen::Index(k) * C + ch] -
                                                           forward.data[Eigen::Index(j) * C + ch]);
    }
    return out;
}

AntialiasGrad antialias_vjp(const SurfaceMesh& mesh, const CameraSample& camera, const Image& forward,
                            const Image& cotangent, const RenderOptions&) {
    if (!cotangent.same_shape(forward)) throw InvalidArgument("antialias_vjp: cotangent shape mismatch");
    AntialiasGrad g{cotangent, Points::Zero(mesh.num_vertices(), 3)};
    g.image.face_id.clear();
    g.image.depth.clear();
    g.image.token = 0;
    const CameraFrame frame(camera, forward.width, forward.height);
    const int C = forward.channels;
    for (const AaPair& pr : find_aa_pairs(mesh, frame, forward)) {
        const bool blend_inner = pr.alpha < 0.5;
        const int j = blend_inner ? pr.inner : pr.outer;
        const int k = blend_inner ? pr.outer : pr.inner;
        const double beta = blend_inner ? 0.5 - pr.alpha : pr.alpha - 0.5;
        double d_beta = 0;
        for (int ch = 0; ch < C; ++ch) {
            const double cj = cotangent.data[Eigen::Index(j) * C + ch];
            g.image.data[Eigen::Index(k) * C + ch] += beta * cj;
            g.image.data[Eigen::Index(j) * C + ch] -= beta * cj;
            d_beta += cj * (forward.data[Eigen::Index(k) * C + ch] - forward.data[Eigen::Index(j) * C + ch]);
        }
        if (d_beta == 0) continue;
        const double d_alpha = blend_inner ? -d_beta : d_beta;
        Vec3T<Ad6> a, b;
        for (int d = 0; d < 3; ++d) {
            a[d] = Ad6(mesh.positions(pr.va, d), 6, d);
            b[d] = Ad6(mesh.positions(pr.vb, d), 6, 3 + d);
        }
        const Ad6 alpha = crossing_alpha<Ad6>(a, b, frame, pixel_center(pr.inner, forward.width),
                                              pixel_center(pr.outer, forward.width));
        for (int d = 0; d < 3; ++d) {
            g.positions(pr.va, d) += d_alpha * alpha.derivatives()[d];
            g.positions(pr.vb, d) += d_alpha * alpha.derivatives()[3 + d];
        }
    }
    return g;
}

}  // namespace avk
