#pragma once

#include <array>
#include <random>
#include <string>
#include <string_view>

#include <json.hpp>

#include "avatarkit/types.hpp"

namespace avk {

enum class CameraGroup { body, face };
enum class ViewTag { front, side, back, overhead };

std::string_view to_string(CameraGroup g);
std::string_view to_string(ViewTag v);
/// Throws InvalidArgument for anything outside {front, side, back, overhead}.
ViewTag parse_view_tag(std::string_view s);

/// Angles in degrees. Elevation is the polar angle from +Y (90 = equator);
/// azimuth 0 looks at the body's front (+Z), increasing toward +X.
struct CameraSample {
    Vec3 position = Vec3(0, 0, 1);
    Vec3 target = Vec3::Zero();
    Vec3 up = Vec3::UnitY();
    double fov_y = 45.0;
    CameraGroup group = CameraGroup::body;
    double azimuth = 0.0;
    double elevation = 90.0;
    double radius = 1.0;
    ViewTag view_tag = ViewTag::front;
};

struct Range {
    double lo;
    double hi;
};

struct CamConfig {
    double p_body = 0.5;
    Range body_height{-0.4, 0.4};
    Range body_radius{0.7, 1.3};
    Range body_elevation{60.0, 120.0};
    Range body_azimuth{0.0, 360.0};
    Range face_radius{0.3, 0.4};
    Range face_elevation{90.0, 90.0};
    Range face_azimuth{-90.0, 90.0};
    Vec3 face_target = Vec3(0.0, 0.36, 0.0);
    double body_fov = 45.0;
    double face_fov = 30.0;

    void validate() const;
};

constexpr double kOverheadPolarDeg = 30.0;

/// Unit direction from the target toward the camera.
Vec3 spherical_direction(double azimuth_deg, double elevation_deg);

CameraSample make_camera(const Vec3& target, double radius, double azimuth_deg, double elevation_deg,
                         double fov_y, CameraGroup group);

ViewTag classify_view(double azimuth_deg, double elevation_deg);

using Rng = std::mt19937_64;

CameraSample sample_camera(Rng& rng, const CamConfig& cfg);

/// The fixed 0/90/180/270 degree equatorial evaluation rig.
std::array<CameraSample, 4> metric_views();

void to_json(nlohmann::json& j, const CameraSample& c);
void to_json(nlohmann::json& j, const CamConfig& c);
void from_json(const nlohmann::json& j, CamConfig& c);

}  // namespace avk
