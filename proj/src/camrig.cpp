#include "avatarkit/camrig.hpp"

#include <cmath>
#include <numbers>

#include "avatarkit/errors.hpp"

namespace avk {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

double wrap_azimuth(double a) {
    a = std::fmod(a, 360.0);
    if (a < 0) a += 360.0;
    if (a >= 360.0) a -= 360.0;
    return a;
}

double uniform(Rng& rng, const Range& r) {
    if (r.lo == r.hi) return r.lo;
    return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

void check_range(const Range& r, const char* name) {
    if (!(r.lo <= r.hi)) throw InvalidArgument(std::string("CamConfig: empty range ") + name);
}

}  // namespace

std::string_view to_string(CameraGroup g) { return g == CameraGroup::body ? "body" : "face"; }

std::string_view to_string(ViewTag v) {
    switch (v) {
        case ViewTag::front: return "front";
        case ViewTag::side: return "side";
        case ViewTag::back: return "back";
        case ViewTag::overhead: return "overhead";
    }
    return "front";
}

ViewTag parse_view_tag(std::string_view s) {
    if (s == "front") return ViewTag::front;
    if (s == "side") return ViewTag::side;
    if (s == "back") return ViewTag::back;
    if (s == "overhead") return ViewTag::overhead;
    throw InvalidArgument("unknown view tag '" + std::string(s) + "'");
}

void CamConfig::validate() const {
    if (!(p_body >= 0.0 && p_body <= 1.0)) throw InvalidArgument("CamConfig: p_body outside [0,1]");
    check_range(body_height, "body_height");
    check_range(body_radius, "body_radius");
    check_range(body_elevation, "body_elevation");
    check_range(body_azimuth, "body_azimuth");
    check_range(face_radius, "face_radius");
    check_range(face_elevation, "face_elevation");
    check_range(face_azimuth, "face_azimuth");
}

Vec3 spherical_direction(double azimuth_deg, double elevation_deg) {
    const double th = elevation_deg * kDeg;
    const double ph = azimuth_deg * kDeg;
    return {std::sin(th) * std::sin(ph), std::cos(th), std::sin(th) * std::cos(ph)};
}

CameraSample make_camera(const Vec3& target, double radius, double azimuth_deg, double elevation_deg,
                         double fov_y, CameraGroup group) {
    CameraSample c;
    c.azimuth = wrap_azimuth(azimuth_deg);
    c.elevation = elevation_deg;
    c.radius = radius;
    c.target = target;
    c.position = target + radius * spherical_direction(c.azimuth, elevation_deg);
    c.up = Vec3::UnitY();
    c.fov_y = fov_y;
    c.group = group;
    c.view_tag = classify_view(c.azimuth, elevation_deg);
    return c;
}

ViewTag classify_view(double azimuth_deg, double elevation_deg) {
    if (elevation_deg < kOverheadPolarDeg) return ViewTag::overhead;
    const double a = wrap_azimuth(azimuth_deg);
    if (a >= 315.0 || a < 45.0) return ViewTag::front;
    if (a >= 135.0 && a < 225.0) return ViewTag::back;
    return ViewTag::side;
}

CameraSample sample_camera(Rng& rng, const CamConfig& cfg) {
    // Draw every variate in a fixed order so the stream does not depend on
    // which branch is taken.
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    if (u < cfg.p_body) {
        const double h = uniform(rng, cfg.body_height);
        const double r = uniform(rng, cfg.body_radius);
        const double el = uniform(rng, cfg.body_elevation);
        const double az = uniform(rng, cfg.body_azimuth);
        return make_camera(Vec3(0, h, 0), r, az, el, cfg.body_fov, CameraGroup::body);
    }
    const double r = uniform(rng, cfg.face_radius);
    const double el = uniform(rng, cfg.face_elevation);
    const double az = uniform(rng, cfg.face_azimuth);
    return make_camera(cfg.face_target, r, az, el, cfg.face_fov, CameraGroup::face);
}

std::array<CameraSample, 4> metric_views() {
    // The [-0.5, 0.5] extent at the target plane fills the frame vertically.
    const double fov = 2.0 * std::atan(0.5 / 1.0) / kDeg;
    std::array<CameraSample, 4> views;
    for (int i = 0; i < 4; ++i) views[i] = make_camera(Vec3::Zero(), 1.0, 90.0 * i, 90.0, fov, CameraGroup::body);
    return views;
}

void to_json(nlohmann::json& j, const CameraSample& c) {
    j = {{"position", {c.position.x(), c.position.y(), c.position.z()}},
         {"target", {c.target.x(), c.target.y(), c.target.z()}},
         {"up", {c.up.x(), c.up.y(), c.up.z()}},
         {"fov_y", c.fov_y},
         {"group", to_string(c.group)},
         {"azimuth", c.azimuth},
         {"elevation", c.elevation},
         {"radius", c.radius},
         {"view_tag", to_string(c.view_tag)}};
}

void to_json(nlohmann::json& j, const CamConfig& c) {
    auto range = [](const Range& r) { return nlohmann::json::array({r.lo, r.hi}); };
    j = {{"p_body", c.p_body},
         {"body_height", range(c.body_height)},
         {"body_radius", range(c.body_radius)},
         {"body_elevation", range(c.body_elevation)},
         {"body_azimuth", range(c.body_azimuth)},
         {"face_radius", range(c.face_radius)},
         {"face_elevation", range(c.face_elevation)},
         {"face_azimuth", range(c.face_azimuth)},
         {"face_target", {c.face_target.x(), c.face_target.y(), c.face_target.z()}},
         {"body_fov", c.body_fov},
         {"face_fov", c.face_fov}};
}

void from_json(const nlohmann::json& j, CamConfig& c) {
    auto range = [&](const char* key, Range& r) {
        if (j.contains(key)) {
            r.lo = j.at(key).at(0).get<double>();
            r.hi = j.at(key).at(1).get<double>();
        }
    };
    if (j.contains("p_body")) c.p_body = j.at("p_body").get<double>();
    range("body_height", c.body_height);
    range("body_radius", c.body_radius);
    range("body_elevation", c.body_elevation);
    range("body_azimuth", c.body_azimuth);
    range("face_radius", c.face_radius);
    range("face_elevation", c.face_elevation);
    range("face_azimuth", c.face_azimuth);
    if (j.contains("face_target")) {
        const auto& t = j.at("face_target");
        c.face_target = Vec3(t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>());
    }
    if (j.contains("body_fov")) c.body_fov = j.at("body_fov").get<double>();
    if (j.contains("face_fov")) c.face_fov = j.at("face_fov").get<double>();
    c.validate();
}

}  // namespace avk
