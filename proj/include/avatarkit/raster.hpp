#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "avatarkit/camrig.hpp"
#include "avatarkit/geometry.hpp"

namespace avk {

/// Row-major interleaved float image. Rendered images additionally carry the
/// per-pixel covering face and a token identifying the forward pass.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    VectorXd data;
    std::vector<std::uint8_t> foreground;
    std::vector<std::int32_t> face_id;
    std::vector<double> depth;
    std::uint64_t token = 0;

    Image() = default;
    Image(int w, int h, int c, double fill = 0.0)
        : width(w), height(h), channels(c), data(VectorXd::Constant(Eigen::Index(w) * h * c, fill)),
          foreground(std::size_t(w) * h, 0) {}

    Eigen::Index pixels() const { return Eigen::Index(width) * height; }
    Eigen::Index index(int x, int y, int c = 0) const { return (Eigen::Index(y) * width + x) * channels + c; }
    double& at(int x, int y, int c = 0) { return data[index(x, y, c)]; }
    double at(int x, int y, int c = 0) const { return data[index(x, y, c)]; }
    bool same_shape(const Image& o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }
};

enum class RenderMode { normal, color, mask };

struct RenderOptions {
    int width = 256;
    int height = 256;
    Vec3 color_background = Vec3::Ones();
    /// Encoded value of the zero normal: (0 + 1) / 2 per channel.
    Vec3 normal_background = Vec3::Constant(0.5);
    double near = 1e-3;
};

/// World -> camera transform and pinhole intrinsics for one camera.
/// Camera space looks down -Z with +Y up; pixel (0,0) is the top-left.
struct CameraFrame {
    Mat3 rotation;  ///< rows: right, up, back
    Vec3 eye;
    double focal;   ///< 1 / tan(fov_y / 2)
    int width;
    int height;

    CameraFrame(const CameraSample& cam, int w, int h);

    template <typename Scalar>
    Vec3T<Scalar> to_camera(const Vec3T<Scalar>& p) const {
        return rotation.cast<Scalar>() * (p - eye.cast<Scalar>());
    }

    /// (pixel x, pixel y, view depth).
    template <typename Scalar>
    Vec3T<Scalar> project(const Vec3T<Scalar>& p) const {
        const Vec3T<Scalar> c = to_camera(p);
        const Scalar depth = -c.z();
        const double aspect = double(width) / height;
        const Scalar nx = Scalar(focal / aspect) * c.x() / depth;
        const Scalar ny = Scalar(focal) * c.y() / depth;
        return {(nx + Scalar(1)) * Scalar(0.5 * width), (Scalar(1) - ny) * Scalar(0.5 * height), depth};
    }
};

/// Perspective-correct barycentric weights of pixel (px, py) inside the
/// projection of world triangle (a, b, c).
template <typename Scalar>
Vec3T<Scalar> pixel_barycentrics(const Vec3T<Scalar>& a, const Vec3T<Scalar>& b, const Vec3T<Scalar>& c,
                                 const CameraFrame& frame, double px, double py) {
    const Vec3T<Scalar> p0 = frame.project(a), p1 = frame.project(b), p2 = frame.project(c);
    auto edge = [px, py](const Vec3T<Scalar>& u, const Vec3T<Scalar>& v) -> Scalar {
        return (v.x() - u.x()) * (Scalar(py) - u.y()) - (v.y() - u.y()) * (Scalar(px) - u.x());
    };
    const Scalar area = (p1.x() - p0.x()) * (p2.y() - p0.y()) - (p1.y() - p0.y()) * (p2.x() - p0.x());
    const Scalar l0 = edge(p1, p2) / area, l1 = edge(p2, p0) / area, l2 = edge(p0, p1) / area;
    const Scalar q0 = l0 / p0.z(), q1 = l1 / p1.z(), q2 = l2 / p2.z();
    const Scalar sum = q0 + q1 + q2;
    return {q0 / sum, q1 / sum, q2 / sum};
}

template <typename Scalar>
Vec3T<Scalar> face_normal(const Vec3T<Scalar>& a, const Vec3T<Scalar>& b, const Vec3T<Scalar>& c) {
    const Vec3T<Scalar> n = (b - a).cross(c - a);
    using std::sqrt;
    return n / sqrt(n.squaredNorm());
}

Image render(const SurfaceMesh& mesh, const CameraSample& camera, RenderMode mode,
             const RenderOptions& opts = {});

struct RenderGrad {
    Points positions;
    Points colors;
};

/// Gradients of <cotangent, render(...)> with the forward coverage frozen.
/// `forward` must be the image returned by render() for the same inputs.
RenderGrad render_vjp(const SurfaceMesh& mesh, const CameraSample& camera, RenderMode mode, const Image& forward,
                      const Image& cotangent, const RenderOptions& opts = {});

/// Silhouette-edge antialiasing pass over a rendered image. Pixel pairs that
/// straddle a silhouette edge are blended by how far the edge crosses the
/// segment between their centres, which makes the result differentiable with
/// respect to silhouette vertex positions.
Image antialias(const SurfaceMesh& mesh, const CameraSample& camera, const Image& forward,
                const RenderOptions& opts = {});

struct AntialiasGrad {
    Image image;       ///< cotangent for the un-antialiased forward image
    Points positions;  ///< direct contribution through edge positions
};

AntialiasGrad antialias_vjp(const SurfaceMesh& mesh, const CameraSample& camera, const Image& forward,
                            const Image& cotangent, const RenderOptions& opts = {});

/// Decodes a normal-mode pixel to a vector in [-1, 1]^3.
inline Vec3 decode_normal(const Image& img, int x, int y) {
    return Vec3(img.at(x, y, 0), img.at(x, y, 1), img.at(x, y, 2)) * 2.0 - Vec3::Ones();
}

// ---------------------------------------------------------------------------
// Image utilities and IO

/// Box-filter downsampling by an integer factor.
Image downsample(const Image& img, int factor);
/// Nearest-neighbour upsampling by an integer factor.
Image upsample(const Image& img, int factor);
/// Area resampling to an arbitrary size.
Image resize_area(const Image& img, int width, int height);

void write_png(const Image& img, const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);

/// NumPy .npy (v1.0, little-endian float64, shape (H, W, C)).
void write_npy(const Image& img, const std::filesystem::path& path);
Image read_npy(const std::filesystem::path& path);

}  // namespace avk
