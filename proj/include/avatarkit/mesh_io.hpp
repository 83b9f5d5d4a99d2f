#pragma once

#include <filesystem>

#include "avatarkit/geometry.hpp"

namespace avk {

/// ASCII PLY with per-vertex float colours (red, green, blue in [0,1]).
void write_ply(const SurfaceMesh& mesh, const std::filesystem::path& path);
/// Reads ASCII PLY written by write_ply() or by common tools (uchar or float
/// colours, triangle faces). Point clouds (no faces) are accepted.
SurfaceMesh read_ply(const std::filesystem::path& path);

/// OBJ with the common "v x y z r g b" colour extension.
void write_obj(const SurfaceMesh& mesh, const std::filesystem::path& path);
SurfaceMesh read_obj(const std::filesystem::path& path);

/// Dispatches on extension (.ply / .obj).
SurfaceMesh read_mesh(const std::filesystem::path& path);
void write_mesh(const SurfaceMesh& mesh, const std::filesystem::path& path);

}  // namespace avk
