#include <doctest.h>

#include <map>
#include <set>

#include "avatarkit/geometry.hpp"
#include "avatarkit/mesh_io.hpp"
#include "support.hpp"

using namespace avk;

namespace {

std::shared_ptr<const TetGrid> unit_tet() {
    Points v(4, 3);
    v << 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1;
    Tets t(1, 4);
    t << 0, 1, 2, 3;
    return std::make_shared<const TetGrid>(v, t, 1);
}

AvatarParams tet_params(const Eigen::Vector4d& s) {
    AvatarParams p = init_params(unit_tet(), [](const Vec3&) { return 1.0; });
    p.sdf = s;
    return p;
}

}  // namespace

TEST_CASE("build_grid counts and volume") {
    const TetGrid g2 = build_grid(2);
    CHECK(g2.num_vertices() == 27);
    CHECK(g2.num_tets() == 48);
    for (int r : {3, 7}) CHECK(build_grid(r).num_vertices() == (r + 1) * (r + 1) * (r + 1));
    CHECK_THROWS_AS(build_grid(1), InvalidArgument);

    const TetGrid g = build_grid(32);
    double vol = 0, min_vol = 1;
    for (Eigen::Index t = 0; t < g.num_tets(); ++t) {
        const double v = signed_tet_volume<double>(g.vertices.row(g.tets(t, 0)).transpose(),
                                                   g.vertices.row(g.tets(t, 1)).transpose(),
                                                   g.vertices.row(g.tets(t, 2)).transpose(),
                                                   g.vertices.row(g.tets(t, 3)).transpose());
        vol += v;
        min_vol = std::min(min_vol, v);
    }
    CHECK(min_vol > 0);
    CHECK(vol == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(g.vertices.minCoeff() == -0.5);
    CHECK(g.vertices.maxCoeff() == 0.5);
}

TEST_CASE("TetGrid rejects bad hand-built tets") {
    Points v(4, 3);
    v << 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1;
    Tets flipped(1, 4);
    flipped << 0, 2, 1, 3;
    CHECK_THROWS_AS(TetGrid(v, flipped, 1), InvalidArgument);
    Tets oob(1, 4);
    oob << 0, 1, 2, 4;
    CHECK_THROWS_AS(TetGrid(v, oob, 1), InvalidArgument);
}

TEST_CASE("capsule body sdf examples") {
    const BodyShape body;
    CHECK(capsule_body_sdf<double>(body.head_center(), body) == doctest::Approx(-body.head_radius));
    // Torso axis runs along Y at the origin; step out along +Z.
    const Vec3 q(0, 0.05, 2 * body.torso_radius);
    CHECK(capsule_body_sdf<double>(q, body) == doctest::Approx(body.torso_radius).epsilon(1e-12));
    CHECK(body_part(Vec3(0, 0.05, 0), body) == 0);
    CHECK(body_part(body.head_center(), body) == 1);

    // The body stays inside the working cube.
    for (const auto& c : body.capsules())
        for (const Vec3& e : {c.a, c.b}) CHECK(e.cwiseAbs().maxCoeff() + c.radius < 0.5);
}

TEST_CASE("capsule body sdf has unit gradient off the medial axis") {
    const BodyShape body;
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-0.45, 0.45);
    const double h = 1e-6;
    int tested = 0, unit = 0;
    for (int i = 0; i < 1000; ++i) {
        const Vec3 p(u(rng), u(rng), u(rng));
        Vec3 g;
        for (int d = 0; d < 3; ++d) {
            Vec3 a = p, b = p;
            a[d] += h;
            b[d] -= h;
            g[d] = (capsule_body_sdf<double>(a, body) - capsule_body_sdf<double>(b, body)) / (2 * h);
        }
        // Points near a medial axis (part boundary or capsule axis) are excluded.
        double second = 1e9;
        const double best = capsule_body_sdf<double>(p, body);
        for (const auto& c : body.capsules()) {
            const double d = capsule_sdf<double>(p, c.a, c.b, c.radius);
            if (d > best) second = std::min(second, d);
        }
        if (second - best < 1e-4 || best < -0.03) continue;
        ++tested;
        if (std::abs(g.norm() - 1.0) < 1e-5) ++unit;
    }
    CHECK(tested > 800);
    CHECK(unit == tested);
}

TEST_CASE("randomized body shape is deterministic and bounded") {
    const BodyShape a = BodyShape::randomized(3), b = BodyShape::randomized(3), c = BodyShape::randomized(4);
    CHECK(a.torso_radius == b.torso_radius);
    CHECK(a.leg_length == b.leg_length);
    CHECK(a.torso_radius != c.torso_radius);
    for (std::uint64_t s = 0; s < 50; ++s)
        for (const auto& cap : BodyShape::randomized(s).capsules())
            for (const Vec3& e : {cap.a, cap.b}) CHECK(e.cwiseAbs().maxCoeff() + cap.radius < 0.5);
}

TEST_CASE("init_params samples the field") {
    auto grid = std::make_shared<const TetGrid>(build_grid(6));
    const AvatarParams p = init_params(grid, [](const Vec3& x) { return x.norm() - 0.3; });
    for (Eigen::Index v = 0; v < grid->num_vertices(); ++v) {
        const double r = grid->vertices.row(v).norm();
        CHECK((p.sdf[v] < 0) == (r < 0.3));
    }
    CHECK(p.deform.isZero(0));
    CHECK((p.color.array() == 0.5).all());

    const AvatarParams pos = init_params(grid, [](const Vec3&) { return 1.0; });
    CHECK(extract_mesh(pos).empty());

    CHECK_THROWS_WITH_AS(init_params(grid, [](const Vec3& x) { return x.x() > 0.4 ? NAN : 1.0; }),
                         doctest::Contains("vertex"), NumericError);
}

TEST_CASE("single tet: all 16 sign cases") {
    const auto grid = unit_tet();
    const Points& x = grid->vertices;
    for (int mask = 0; mask < 16; ++mask) {
        Eigen::Vector4d s;
        int neg = 0;
        for (int i = 0; i < 4; ++i) {
            s[i] = (mask >> i) & 1 ? -1.0 : 1.0;
            neg += (mask >> i) & 1;
        }
        CAPTURE(mask);
        const SurfaceMesh m = extract_mesh(tet_params(s));
        const int expected_tris = (neg == 0 || neg == 4) ? 0 : (neg == 2 ? 2 : 1);
        REQUIRE(m.num_faces() == expected_tris);

        // Oracle: one vertex per crossing edge, at its midpoint.
        std::set<std::pair<int, int>> crossing;
        for (int a = 0; a < 4; ++a)
            for (int b = a + 1; b < 4; ++b)
                if ((s[a] > 0) != (s[b] > 0)) crossing.insert({a, b});
        REQUIRE(m.num_vertices() == static_cast<Eigen::Index>(crossing.size()));
        for (Eigen::Index v = 0; v < m.num_vertices(); ++v) {
            const auto& pv = m.provenance[static_cast<std::size_t>(v)];
            CHECK(crossing.count({pv.a, pv.b}) == 1);
            CHECK(pv.weight == 0.5);
            const Vec3 mid = 0.5 * (x.row(pv.a) + x.row(pv.b)).transpose();
            CHECK((m.positions.row(v).transpose() - mid).norm() < 1e-15);
        }
        if (!expected_tris) continue;
        Vec3 cpos = Vec3::Zero(), cneg = Vec3::Zero();
        for (int i = 0; i < 4; ++i) (s[i] > 0 ? cpos : cneg) += x.row(i).transpose();
        const Vec3 outward = cpos / (4 - neg) - cneg / neg;
        for (Eigen::Index f = 0; f < m.num_faces(); ++f) {
            const Vec3 a = m.positions.row(m.faces(f, 0)), b = m.positions.row(m.faces(f, 1)),
                       c = m.positions.row(m.faces(f, 2));
            const Vec3 n = (b - a).cross(c - a);
            CHECK(n.norm() > 1e-6);
            CHECK(n.dot(outward) > 0);
        }
        if (neg == 2) {
            // The two triangles tile the (planar) midpoint parallelogram.
            double area = 0;
            for (Eigen::Index f = 0; f < 2; ++f) {
                const Vec3 a = m.positions.row(m.faces(f, 0)), b = m.positions.row(m.faces(f, 1)),
                           c = m.positions.row(m.faces(f, 2));
                area += 0.5 * (b - a).cross(c - a).norm();
            }
            std::vector<Vec3> q;
            for (Eigen::Index v = 0; v < 4; ++v) q.push_back(m.positions.row(v));
            std::sort(q.begin(), q.end(), [](const Vec3& u, const Vec3& w) {
                return std::lexicographical_compare(u.data(), u.data() + 3, w.data(), w.data() + 3);
            });
            // Parallelogram area from any vertex and its two neighbours.
            double best = 0;
            for (int i = 1; i < 4; ++i)
                for (int j = i + 1; j < 4; ++j) best = std::max(best, (q[i] - q[0]).cross(q[j] - q[0]).norm());
            CHECK(area == doctest::Approx(best).epsilon(1e-12));
        }
    }
}

TEST_CASE("sphere extraction stays within a cell of the true surface") {
    auto grid = std::make_shared<const TetGrid>(build_grid(32));
    const double r = 0.3;
    const SurfaceMesh m = extract_mesh(init_params(grid, [r](const Vec3& x) { return x.norm() - r; }));
    REQUIRE(m.num_faces() > 1000);
    double worst = 0;
    for (Eigen::Index v = 0; v < m.num_vertices(); ++v) worst = std::max(worst, std::abs(m.positions.row(v).norm() - r));
    CHECK(worst < grid->cell_size());

    // Normals are unit and point away from the centre.
    for (Eigen::Index v = 0; v < m.num_vertices(); ++v) {
        CHECK(std::abs(m.vertex_normals.row(v).norm() - 1.0) < 1e-6);
        CHECK(m.vertex_normals.row(v).dot(m.positions.row(v)) > 0);
    }

    // Edge-manifold and closed: every undirected edge shared by two faces with opposite directions.
    std::map<std::pair<int, int>, int> directed;
    for (Eigen::Index f = 0; f < m.num_faces(); ++f)
        for (int k = 0; k < 3; ++k) ++directed[{m.faces(f, k), m.faces(f, (k + 1) % 3)}];
    bool manifold = true;
    for (const auto& [e, n] : directed) manifold &= n == 1 && directed.count({e.second, e.first}) == 1;
    CHECK(manifold);
}

TEST_CASE("extraction invariants") {
    const AvatarParams p = test::random_params(11, 6);
    const SurfaceMesh m = extract_mesh(p);
    REQUIRE(!m.empty());

    // Positive scaling leaves positions unchanged.
    AvatarParams scaled = p;
    scaled.sdf *= 3.7;
    const SurfaceMesh ms = extract_mesh(scaled);
    REQUIRE(ms.num_vertices() == m.num_vertices());
    CHECK((ms.positions - m.positions).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(ms.faces == m.faces);

    // Negation keeps positions and reverses every face.
    AvatarParams neg = p;
    neg.sdf = -p.sdf;
    const SurfaceMesh mn = extract_mesh(neg);
    REQUIRE(mn.num_faces() == m.num_faces());
    CHECK((mn.positions - m.positions).cwiseAbs().maxCoeff() < 1e-12);
    for (Eigen::Index f = 0; f < m.num_faces(); ++f) {
        CHECK(mn.faces(f, 0) == m.faces(f, 0));
        CHECK(mn.faces(f, 1) == m.faces(f, 2));
        CHECK(mn.faces(f, 2) == m.faces(f, 1));
    }

    // One vertex per sign-crossing grid edge.
    const VectorXd s = perturbed_sdf(p.sdf);
    std::set<std::pair<int, int>> edges;
    const auto& T = p.grid->tets;
    for (Eigen::Index t = 0; t < T.rows(); ++t)
        for (int i = 0; i < 4; ++i)
            for (int j = i + 1; j < 4; ++j) {
                const int a = std::min(T(t, i), T(t, j)), b = std::max(T(t, i), T(t, j));
                if ((s[a] > 0) != (s[b] > 0)) edges.insert({a, b});
            }
    CHECK(m.num_vertices() == static_cast<Eigen::Index>(edges.size()));

    // Every surface vertex sits on its crossing edge.
    const Points x = p.positions();
    for (Eigen::Index v = 0; v < m.num_vertices(); ++v) {
        const auto& pv = m.provenance[static_cast<std::size_t>(v)];
        CHECK((s[pv.a] > 0) != (s[pv.b] > 0));
        const Vec3 expect = x.row(pv.a) + pv.weight * (x.row(pv.b) - x.row(pv.a));
        CHECK((m.positions.row(v).transpose() - expect).norm() < 1e-15);
    }

    // Determinism.
    const SurfaceMesh m2 = extract_mesh(p);
    CHECK(m2.positions == m.positions);
    CHECK(m2.faces == m.faces);
}

TEST_CASE("exact zero sdf is nudged positive") {
    const SurfaceMesh a = extract_mesh(tet_params(Eigen::Vector4d(0.0, -1, -1, -1)));
    const SurfaceMesh b = extract_mesh(tet_params(Eigen::Vector4d(1e-8, -1, -1, -1)));
    REQUIRE(a.num_faces() == 1);
    CHECK(a.positions == b.positions);
}

TEST_CASE("degenerate tet is reported by index") {
    AvatarParams p = tet_params(Eigen::Vector4d(1, -1, -1, -1));
    p.deform(3, 2) = -1.0;  // vertex 3 drops into the plane of the others
    CHECK_THROWS_WITH_AS(extract_mesh(p), doctest::Contains("tet 0"), DegenerateGeometry);
}

TEST_CASE("deform clamp") {
    AvatarParams p = test::random_params(2, 4);
    p.deform.setConstant(1.0);
    p.deform(0, 0) = -1.0;
    p.clamp_deform();
    CHECK(p.deform.cwiseAbs().maxCoeff() == doctest::Approx(0.45 / 4));
}

TEST_CASE("extract_mesh_vjp: single tet by hand") {
    const AvatarParams p = tet_params(Eigen::Vector4d(1, -1, -1, -1));
    const SurfaceMesh m = extract_mesh(p);
    Eigen::Index v01 = -1;
    for (Eigen::Index v = 0; v < m.num_vertices(); ++v)
        if (m.provenance[std::size_t(v)].a == 0 && m.provenance[std::size_t(v)].b == 1) v01 = v;
    REQUIRE(v01 >= 0);
    Points cot = Points::Zero(m.num_vertices(), 3);
    cot.row(v01) = Vec3(1, 0, 0).transpose();
    const ParamGrad g = extract_mesh_vjp(p, m, cot);
    // w = s0 / (s0 - s1): dw/ds0 = -s1 / (s0-s1)^2 = 1/4, dw/ds1 = s0 / (s0-s1)^2 = 1/4; (x1 - x0).x = 1.
    CHECK(g.sdf[0] == doctest::Approx(0.25));
    CHECK(g.sdf[1] == doctest::Approx(0.25));
    CHECK(g.sdf[2] == 0);
    CHECK(g.sdf[3] == 0);
    CHECK(g.deform(0, 0) == doctest::Approx(0.5));
    CHECK(g.deform(1, 0) == doctest::Approx(0.5));
    CHECK(g.deform.row(2).isZero(0));

    const ParamGrad z = extract_mesh_vjp(p, m, Points::Zero(m.num_vertices(), 3));
    CHECK(z.sdf.isZero(0));
    CHECK(z.deform.isZero(0));
    CHECK(z.color.isZero(0));
}

TEST_CASE("extract_mesh_vjp rejects stale topology") {
    AvatarParams p = test::random_params(5, 4);
    const SurfaceMesh m = extract_mesh(p);
    const Points cot = Points::Ones(m.num_vertices(), 3);
    AvatarParams flipped = p;
    Eigen::Index v = 0;
    while (flipped.sdf[v] < 0) ++v;
    flipped.sdf[v] = -flipped.sdf[v];
    CHECK_THROWS_AS(extract_mesh_vjp(flipped, m, cot), StaleState);
    AvatarParams moved = p;
    moved.sdf *= 1.0;
    moved.sdf[m.provenance[0].a] *= 1.5;
    CHECK_THROWS_AS(extract_mesh_vjp(moved, m, cot), StaleState);
}

TEST_CASE("extract_mesh_vjp matches central differences") {
    const double h = 1e-5;
    test::GradCheck check;
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const AvatarParams p = test::random_params(100 + seed, 5);
        const SurfaceMesh m = extract_mesh(p);
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> u(-1, 1);
        Points cp(m.num_vertices(), 3), cc(m.num_vertices(), 3);
        for (Eigen::Index i = 0; i < cp.size(); ++i) {
            cp.data()[i] = u(rng);
            cc.data()[i] = u(rng);
        }
        const ParamGrad g = extract_mesh_vjp(p, m, cp, cc);
        auto loss = [&](const AvatarParams& q, bool& stable) {
            stable = topology_key(q) == m.topology_key;
            const SurfaceMesh mq = extract_mesh(q);
            return test::dot_points(mq.positions, cp) + test::dot_points(mq.vertex_colors, cc);
        };
        std::set<int> involved;
        for (const auto& pv : m.provenance) involved.insert({pv.a, pv.b});
        for (int v : involved) {
            bool s1, s2;
            AvatarParams a = p, b = p;
            a.sdf[v] += h;
            b.sdf[v] -= h;
            const double fd = (loss(a, s1) - loss(b, s2)) / (2 * h);
            if (s1 && s2) check.add(g.sdf[v], fd, 1e-4);
            for (int d = 0; d < 3; ++d) {
                a = p;
                b = p;
                a.deform(v, d) += h;
                b.deform(v, d) -= h;
                check.add(g.deform(v, d), (loss(a, s1) - loss(b, s2)) / (2 * h), 1e-4);
                a = p;
                b = p;
                a.color(v, d) += h;
                b.color(v, d) -= h;
                check.add(g.color(v, d), (loss(a, s1) - loss(b, s2)) / (2 * h), 1e-4);
            }
        }
    }
    CAPTURE(check.worst);
    CHECK(check.checked > 500);
    CHECK(check.ratio() >= 0.95);
}

TEST_CASE("uv sphere and mesh io round trip") {
    const SurfaceMesh s = uv_sphere(0.2, 8, 12, Vec3(0.1, 0, 0));
    for (Eigen::Index v = 0; v < s.num_vertices(); ++v)
        CHECK((s.positions.row(v).transpose() - Vec3(0.1, 0, 0)).norm() == doctest::Approx(0.2));
    for (Eigen::Index f = 0; f < s.num_faces(); ++f) {
        const Vec3 a = s.positions.row(s.faces(f, 0)), b = s.positions.row(s.faces(f, 1)),
                   c = s.positions.row(s.faces(f, 2));
        CHECK((b - a).cross(c - a).dot((a + b + c) / 3 - Vec3(0.1, 0, 0)) > 0);
    }
    SurfaceMesh col = s;
    col.vertex_colors = Points::Constant(s.num_vertices(), 3, 0.25);
    const auto dir = std::filesystem::temp_directory_path() / "avk_geom_io";
    for (const char* ext : {".ply", ".obj"}) {
        write_mesh(col, dir / (std::string("s") + ext));
        const SurfaceMesh back = read_mesh(dir / (std::string("s") + ext));
        CHECK(back.faces == col.faces);
        CHECK((back.positions - col.positions).cwiseAbs().maxCoeff() < 1e-12);
        CHECK((back.vertex_colors - col.vertex_colors).cwiseAbs().maxCoeff() < 1e-12);
    }
    CHECK_THROWS_AS(read_mesh(dir / "missing.ply"), IoError);
    CHECK_THROWS_AS(write_mesh(col, dir / "x.stl"), IoError);
}
