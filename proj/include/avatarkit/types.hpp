#pragma once

#include <cstdint>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace avk {

template <typename Scalar>
using Vec3T = Eigen::Matrix<Scalar, 3, 1>;

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
using Mat3 = Eigen::Matrix3d;

/// N x 3 row-major point / vector arrays (one row per item).
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Faces = Eigen::Matrix<int, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Tets = Eigen::Matrix<int, Eigen::Dynamic, 4, Eigen::RowMajor>;

using Eigen::VectorXd;
using Eigen::MatrixXd;

/// FNV-1a, used for stable (platform independent) fingerprints.
inline std::uint64_t fnv1a(const void* data, std::size_t bytes,
                           std::uint64_t seed = 1469598103934665603ULL) {
    auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

template <typename Derived>
std::uint64_t hash_dense(const Eigen::DenseBase<Derived>& m, std::uint64_t seed = 1469598103934665603ULL) {
    std::uint64_t h = seed;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            auto v = m(i, j);
            h = fnv1a(&v, sizeof(v), h);
        }
    return h;
}

}  // namespace avk
