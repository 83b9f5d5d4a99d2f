#include <doctest.h>

#include "avatarkit/camrig.hpp"
#include "avatarkit/raster.hpp"
#include "support.hpp"

using namespace avk;

namespace {

constexpr double kPi = 3.14159265358979323846;

RenderOptions small(int w, int h) {
    RenderOptions o;
    o.width = w;
    o.height = h;
    return o;
}

CameraSample front_camera(double fov = 90.0) {
    return make_camera(Vec3::Zero(), 1.0, 0, 90, fov, CameraGroup::body);
}

/// With a 90 degree front camera at unit distance, the z = 0 plane maps
/// x -> (x + 1) * W / 2, y -> (1 - y) * H / 2.
Vec3 at_pixel(double px, double py, int w, int h) { return {px / (w / 2.0) - 1.0, 1.0 - py / (h / 2.0), 0.0}; }

SurfaceMesh fixture_mesh(std::uint64_t seed) {
    const AvatarParams p = test::random_params(seed, 4);
    return extract_mesh(p);
}

CameraSample fixture_camera(std::uint64_t seed) {
    Rng rng(seed);
    CamConfig cfg;
    cfg.p_body = 1.0;
    cfg.body_height = {-0.05, 0.05};
    cfg.body_radius = {0.9, 1.1};
    CameraSample c = sample_camera(rng, cfg);
    c.fov_y = 40;
    return c;
}

}  // namespace

TEST_CASE("empty mesh renders background") {
    const SurfaceMesh empty;
    const auto opts = small(16, 12);
    const Image c = render(empty, front_camera(), RenderMode::color, opts);
    CHECK(c.width == 16);
    CHECK(c.height == 12);
    CHECK((c.data.array() == 1.0).all());
    for (auto f : c.foreground) CHECK(f == 0);
    const Image n = render(empty, front_camera(), RenderMode::normal, opts);
    CHECK((n.data.array() == 0.5).all());
    const Image m = render(empty, front_camera(), RenderMode::mask, opts);
    CHECK(m.channels == 1);
    CHECK(m.data.isZero(0));
}

TEST_CASE("barycentre of an RGB triangle") {
    const int W = 65, H = 65;
    Points p(3, 3);
    p.row(0) = Vec3(-0.9, -0.6, 0).transpose();
    p.row(1) = Vec3(0.9, -0.6, 0).transpose();
    p.row(2) = Vec3(0.0, 1.2, 0).transpose();
    Faces f(1, 3);
    f << 0, 1, 2;
    Points col(3, 3);
    col << 1, 0, 0, 0, 1, 0, 0, 0, 1;
    const SurfaceMesh m = make_mesh(p, f, col);
    const Image img = render(m, front_camera(), RenderMode::color, small(W, H));
    // Centroid is the origin, which projects onto the centre of pixel (32, 32).
    for (int c = 0; c < 3; ++c) CHECK(img.at(32, 32, c) == doctest::Approx(1.0 / 3).epsilon(1e-12));
    CHECK(img.face_id[32 * W + 32] == 0);
}

TEST_CASE("sphere normal at the image centre faces the camera") {
    const int rings = 32;
    const SurfaceMesh s = uv_sphere(0.3, rings, 64);
    const Image n = render(s, front_camera(45), RenderMode::normal, small(65, 65));
    const Vec3 c = decode_normal(n, 32, 32);
    CHECK((c - Vec3(0, 0, 1)).norm() < 2 * (kPi / rings));
    // Every foreground pixel decodes to a unit vector.
    for (int y = 0; y < 65; ++y)
        for (int x = 0; x < 65; ++x)
            if (n.foreground[std::size_t(y) * 65 + x]) CHECK(std::abs(decode_normal(n, x, y).norm() - 1) < 1e-3);
}

TEST_CASE("mask equals colour foreground; rendering is deterministic") {
    const SurfaceMesh m = fixture_mesh(3);
    const CameraSample cam = fixture_camera(3);
    const auto opts = small(48, 40);
    const Image a = render(m, cam, RenderMode::color, opts), b = render(m, cam, RenderMode::color, opts);
    CHECK(a.data == b.data);
    CHECK(a.face_id == b.face_id);
    CHECK(a.token == b.token);
    const Image mask = render(m, cam, RenderMode::mask, opts);
    int fg = 0;
    for (Eigen::Index i = 0; i < mask.pixels(); ++i) {
        CHECK(mask.data[i] == double(a.foreground[std::size_t(i)]));
        fg += a.foreground[std::size_t(i)];
    }
    CHECK(fg > 100);
}

TEST_CASE("rigid motion of mesh and camera leaves the image unchanged") {
    const SurfaceMesh m = fixture_mesh(8);
    const CameraSample cam = fixture_camera(8);
    const Mat3 R = Eigen::AngleAxisd(0.7, Vec3(0.3, -0.5, 0.8).normalized()).toRotationMatrix();
    const Vec3 t(0.2, -0.1, 0.4);
    CameraSample moved = cam;
    moved.position = R * cam.position + t;
    moved.target = R * cam.target + t;
    moved.up = R * cam.up;
    for (RenderMode mode : {RenderMode::color, RenderMode::normal}) {
        const Image a = render(m, cam, mode, small(48, 48));
        const Image b = render(transformed(m, R, t), moved, mode, small(48, 48));
        CHECK((a.data - b.data).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("top-left rule covers shared edges exactly once") {
    const int W = 64, H = 64;
    // Square whose edges and diagonal run through pixel centres.
    const Vec3 a = at_pixel(10.5, 10.5, W, H), b = at_pixel(50.5, 10.5, W, H), c = at_pixel(50.5, 50.5, W, H),
               d = at_pixel(10.5, 50.5, W, H), e = at_pixel(60.5, 30.5, W, H);
    Points p(5, 3);
    p << a.transpose(), b.transpose(), c.transpose(), d.transpose(), e.transpose();
    auto tri = [&](std::vector<std::array<int, 3>> fs) {
        Faces f(static_cast<Eigen::Index>(fs.size()), 3);
        for (std::size_t i = 0; i < fs.size(); ++i) f.row(Eigen::Index(i)) << fs[i][0], fs[i][1], fs[i][2];
        return render(make_mesh(p, f), front_camera(), RenderMode::mask, small(W, H));
    };
    // Mixed orientations: the rule must not depend on winding.
    const Image t0 = tri({{0, 1, 2}}), t1 = tri({{0, 3, 2}}), t2 = tri({{1, 4, 2}});
    const Image all = tri({{0, 1, 2}, {0, 3, 2}, {1, 4, 2}});
    for (Eigen::Index i = 0; i < all.pixels(); ++i) {
        const double sum = t0.data[i] + t1.data[i] + t2.data[i];
        CHECK(sum <= 1.0);
        CHECK(sum == all.data[i]);
    }
    // 40x40 pixel centres inside the half-open square plus the right triangle.
    double covered_square = 0;
    for (Eigen::Index i = 0; i < all.pixels(); ++i) covered_square += t0.data[i] + t1.data[i];
    CHECK(covered_square == 40 * 40);
}

TEST_CASE("render_vjp basic contracts") {
    const SurfaceMesh m = fixture_mesh(4);
    const CameraSample cam = fixture_camera(4);
    const auto opts = small(32, 32);
    const Image fwd = render(m, cam, RenderMode::color, opts);
    Image zero(fwd.width, fwd.height, fwd.channels);
    const RenderGrad z = render_vjp(m, cam, RenderMode::color, fwd, zero, opts);
    CHECK(z.positions.isZero(0));
    CHECK(z.colors.isZero(0));

    // One-hot cotangent: colour gradient equals the barycentric weights.
    int pix = -1;
    for (int i = 0; i < int(fwd.pixels()); ++i)
        if (fwd.face_id[std::size_t(i)] >= 0) {
            pix = i;
            break;
        }
    REQUIRE(pix >= 0);
    Image onehot = zero;
    onehot.data[Eigen::Index(pix) * 3 + 1] = 1.0;
    const RenderGrad g = render_vjp(m, cam, RenderMode::color, fwd, onehot, opts);
    const int f = fwd.face_id[std::size_t(pix)];
    const CameraFrame frame(cam, 32, 32);
    const Vec3 bary = pixel_barycentrics<double>(m.positions.row(m.faces(f, 0)).transpose(),
                                                 m.positions.row(m.faces(f, 1)).transpose(),
                                                 m.positions.row(m.faces(f, 2)).transpose(), frame, pix % 32 + 0.5,
                                                 pix / 32 + 0.5);
    for (int k = 0; k < 3; ++k) {
        CHECK(g.colors(m.faces(f, k), 1) == doctest::Approx(bary[k]).epsilon(1e-12));
        CHECK(g.colors(m.faces(f, k), 0) == 0);
    }
    CHECK(g.colors.sum() == doctest::Approx(1.0));

    // Stale forward pass.
    SurfaceMesh other = m;
    other.positions(0, 0) += 1e-3;
    CHECK_THROWS_AS(render_vjp(other, cam, RenderMode::color, fwd, onehot, opts), StaleState);
    CHECK_THROWS_AS(render_vjp(m, cam, RenderMode::normal, fwd, onehot, opts), StaleState);

    const Image mask = render(m, cam, RenderMode::mask, opts);
    const RenderGrad mg = render_vjp(m, cam, RenderMode::mask, mask, test::random_cotangent(mask, *new Rng(1)), opts);
    CHECK(mg.positions.isZero(0));
}

TEST_CASE("non-finite vertex is a numeric error") {
    SurfaceMesh m = fixture_mesh(1);
    m.positions(2, 1) = NAN;
    CHECK_THROWS_AS(render(m, fixture_camera(1), RenderMode::color, small(8, 8)), NumericError);
}

namespace {

test::GradCheck fd_render(RenderMode mode, bool aa, int fixtures, int vertices_per_fixture) {
    const double h = 1e-5;
    test::GradCheck check;
    for (int fx = 0; fx < fixtures; ++fx) {
        const SurfaceMesh m = fixture_mesh(200 + fx);
        const CameraSample cam = fixture_camera(300 + fx);
        const auto opts = small(40, 40);
        Rng rng(fx);
        const Image fwd = render(m, cam, mode, opts);
        const Image cot = test::random_cotangent(fwd, rng);
        Points gp;
        Points gc;
        if (aa) {
            const AntialiasGrad ag = antialias_vjp(m, cam, fwd, cot, opts);
            const RenderGrad rg = render_vjp(m, cam, mode, fwd, ag.image, opts);
            gp = rg.positions + ag.positions;
            gc = rg.colors;
        } else {
            const RenderGrad rg = render_vjp(m, cam, mode, fwd, cot, opts);
            gp = rg.positions;
            gc = rg.colors;
        }
        auto eval = [&](const SurfaceMesh& q, bool& stable) {
            const Image img = render(q, cam, mode, opts);
            stable = img.face_id == fwd.face_id;
            return test::dot_images(aa ? antialias(q, cam, img, opts) : img, cot);
        };
        // Prefer visible vertices: those of faces that cover some pixel.
        std::vector<int> visible;
        std::vector<std::uint8_t> seen(std::size_t(m.num_vertices()), 0);
        for (int f : fwd.face_id)
            if (f >= 0)
                for (int k = 0; k < 3; ++k)
                    if (!seen[std::size_t(m.faces(f, k))]++) visible.push_back(m.faces(f, k));
        std::shuffle(visible.begin(), visible.end(), rng);
        visible.resize(std::min<std::size_t>(visible.size(), std::size_t(vertices_per_fixture)));
        for (int v : visible)
            for (int d = 0; d < 3; ++d) {
                SurfaceMesh a = m, b = m;
                a.positions(v, d) += h;
                b.positions(v, d) -= h;
                bool s1, s2;
                const double fd = (eval(a, s1) - eval(b, s2)) / (2 * h);
                if (s1 && s2) check.add(gp(v, d), fd, 1e-3);
                if (mode == RenderMode::color) {
                    a = m;
                    b = m;
                    a.vertex_colors(v, d) += h;
                    b.vertex_colors(v, d) -= h;
                    check.add(gc(v, d), (eval(a, s1) - eval(b, s2)) / (2 * h), 1e-3);
                }
            }
    }
    return check;
}

}  // namespace

TEST_CASE("render_vjp matches central differences (colour)") {
    const auto c = fd_render(RenderMode::color, false, 3, 25);
    CAPTURE(c.worst);
    CHECK(c.checked > 150);
    CHECK(c.ratio() >= 0.95);
}

TEST_CASE("render_vjp matches central differences (normal)") {
    const auto c = fd_render(RenderMode::normal, false, 3, 25);
    CAPTURE(c.worst);
    CHECK(c.checked > 150);
    CHECK(c.ratio() >= 0.95);
}

TEST_CASE("antialias pass: silhouette gradients match central differences") {
    const auto c = fd_render(RenderMode::normal, true, 3, 25);
    CAPTURE(c.worst);
    CHECK(c.checked > 150);
    CHECK(c.ratio() >= 0.95);
    const auto cc = fd_render(RenderMode::color, true, 2, 25);
    CAPTURE(cc.worst);
    CHECK(cc.ratio() >= 0.95);
}

TEST_CASE("antialias blends only across silhouettes") {
    const SurfaceMesh m = fixture_mesh(5);
    const CameraSample cam = fixture_camera(5);
    const auto opts = small(48, 48);
    const Image fwd = render(m, cam, RenderMode::color, opts);
    const Image aa = antialias(m, cam, fwd, opts);
    int changed = 0;
    for (int y = 1; y < 47; ++y)
        for (int x = 1; x < 47; ++x) {
            const int i = y * 48 + x;
            bool differs = false;
            for (int c = 0; c < 3; ++c) differs |= aa.data[i * 3 + c] != fwd.data[i * 3 + c];
            if (!differs) continue;
            ++changed;
            // A changed pixel borders a pixel of a different face.
            const int f = fwd.face_id[std::size_t(i)];
            const bool border = fwd.face_id[std::size_t(i - 1)] != f || fwd.face_id[std::size_t(i + 1)] != f ||
                                fwd.face_id[std::size_t(i - 48)] != f || fwd.face_id[std::size_t(i + 48)] != f;
            CHECK(border);
        }
    CHECK(changed > 10);
    CHECK(aa.foreground == fwd.foreground);
}

TEST_CASE("resampling") {
    Image img(8, 4, 3);
    for (Eigen::Index i = 0; i < img.data.size(); ++i) img.data[i] = double(i % 7) / 7;
    img.foreground[3] = 1;
    const Image up = upsample(img, 2);
    CHECK(up.width == 16);
    const Image back = downsample(up, 2);
    CHECK((back.data - img.data).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(back.foreground == img.foreground);
    const Image same = resize_area(up, 8, 4);
    CHECK((same.data - img.data).cwiseAbs().maxCoeff() < 1e-12);
    const Image odd = resize_area(img, 3, 3);
    CHECK(odd.data.mean() == doctest::Approx(img.data.mean()).epsilon(1e-2));
    CHECK_THROWS_AS(downsample(img, 3), InvalidArgument);
}

TEST_CASE("png and npy round trips") {
    const auto dir = std::filesystem::temp_directory_path() / "avk_raster_io";
    Image img(5, 3, 3);
    for (Eigen::Index i = 0; i < img.data.size(); ++i) img.data[i] = double(i * 11 % 256) / 255.0;
    write_png(img, dir / "a.png");
    const Image p = read_png(dir / "a.png");
    CHECK(p.width == 5);
    CHECK(p.height == 3);
    CHECK(p.channels == 3);
    CHECK((p.data - img.data).cwiseAbs().maxCoeff() < 1e-12);
    Image gray(4, 4, 1, 1.0);
    write_png(gray, dir / "g.png");
    CHECK(read_png(dir / "g.png").channels == 1);

    for (Eigen::Index i = 0; i < img.data.size(); ++i) img.data[i] = std::sin(double(i));
    write_npy(img, dir / "a.npy");
    const Image n = read_npy(dir / "a.npy");
    CHECK(n.width == 5);
    CHECK(n.height == 3);
    CHECK(n.data == img.data);
    CHECK_THROWS_AS(read_png(dir / "a.npy"), IoError);
    CHECK_THROWS_AS(read_npy(dir / "nope.npy"), IoError);
}
