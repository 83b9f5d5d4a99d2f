#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "avatarkit/geometry.hpp"
#include "avatarkit/raster.hpp"

namespace avk::test {

inline double rel_err(double a, double b, double floor = 1e-8) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Fraction of (analytic, numeric) pairs that agree to `tol` relative error.
struct GradCheck {
    int checked = 0;
    int passed = 0;
    double worst = 0;

    void add(double analytic, double numeric, double tol) {
        const double e = rel_err(analytic, numeric);
        ++checked;
        if (e < tol) ++passed;
        worst = std::max(worst, e);
    }
    double ratio() const { return checked ? double(passed) / checked : 0.0; }
};

/// Small random tet-grid fixture: a perturbed sphere with random deform.
inline AvatarParams random_params(std::uint64_t seed, int resolution = 5) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    auto grid = std::make_shared<const TetGrid>(build_grid(resolution));
    const double r = 0.25 + 0.1 * (u(rng) + 1) * 0.5;
    AvatarParams p = init_params(grid, [r](const Vec3& x) { return x.norm() - r; });
    const double h = grid->cell_size();
    for (Eigen::Index v = 0; v < p.sdf.size(); ++v) {
        p.sdf[v] += 0.15 * h * u(rng);
        for (int d = 0; d < 3; ++d) p.deform(v, d) = 0.3 * h * u(rng);
        for (int d = 0; d < 3; ++d) p.color(v, d) = 0.5 + 0.4 * u(rng);
    }
    return p;
}

inline double dot_points(const Points& a, const Points& b) { return (a.array() * b.array()).sum(); }

inline double dot_images(const Image& a, const Image& b) { return a.data.dot(b.data); }

inline Image random_cotangent(const Image& like, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Image c(like.width, like.height, like.channels);
    for (Eigen::Index i = 0; i < c.data.size(); ++i) c.data[i] = u(rng);
    return c;
}

}  // namespace avk::test
