#include "avatarkit/mesh_io.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace avk {

namespace fs = std::filesystem;

namespace {

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << std::setprecision(17);
    return out;
}

std::ifstream open_in(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    return in;
}

SurfaceMesh from_vectors(const std::vector<Vec3>& p, const std::vector<Vec3>& c,
                         const std::vector<std::array<int, 3>>& f, const fs::path& path) {
    Points pos(static_cast<Eigen::Index>(p.size()), 3);
    for (std::size_t i = 0; i < p.size(); ++i) pos.row(static_cast<Eigen::Index>(i)) = p[i].transpose();
    Faces faces(static_cast<Eigen::Index>(f.size()), 3);
    for (std::size_t i = 0; i < f.size(); ++i) {
        for (int k = 0; k < 3; ++k)
            if (f[i][k] < 0 || f[i][k] >= static_cast<int>(p.size()))
                throw IoError(path.string() + ": face " + std::to_string(i) + " index out of range");
        faces.row(static_cast<Eigen::Index>(i)) << f[i][0], f[i][1], f[i][2];
    }
    Points col;
    if (c.size() == p.size()) {
        col.resize(pos.rows(), 3);
        for (std::size_t i = 0; i < c.size(); ++i) col.row(static_cast<Eigen::Index>(i)) = c[i].transpose();
    }
    return make_mesh(std::move(pos), std::move(faces), std::move(col));
}

}  // namespace

void write_ply(const SurfaceMesh& mesh, const fs::path& path) {
    auto out = open_out(path);
    const bool colors = mesh.vertex_colors.rows() == mesh.positions.rows();
    out << "ply\nformat ascii 1.0\n";
    out << "element vertex " << mesh.positions.rows() << "\n";
    out << "property float x\nproperty float y\nproperty float z\n";
    if (colors) out << "property float red\nproperty float green\nproperty float blue\n";
    out << "element face " << mesh.faces.rows() << "\n";
    out << "property list uchar int vertex_indices\nend_header\n";
    for (Eigen::Index i = 0; i < mesh.positions.rows(); ++i) {
        out << mesh.positions(i, 0) << ' ' << mesh.positions(i, 1) << ' ' << mesh.positions(i, 2);
        if (colors) out << ' ' << mesh.vertex_colors(i, 0) << ' ' << mesh.vertex_colors(i, 1) << ' ' << mesh.vertex_colors(i, 2);
        out << '\n';
    }
    for (Eigen::Index f = 0; f < mesh.faces.rows(); ++f)
        out << "3 " << mesh.faces(f, 0) << ' ' << mesh.faces(f, 1) << ' ' << mesh.faces(f, 2) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

SurfaceMesh read_ply(const fs::path& path) {
    auto in = open_in(path);
    std::string line;
    std::getline(in, line);
    if (line.rfind("ply", 0) != 0) throw IoError(path.string() + ": not a PLY file");
    long nv = 0, nf = 0;
    std::vector<std::string> vprops;
    std::vector<bool> uchar_prop;
    std::string current;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string tok;
        ls >> tok;
        if (tok == "format") {
            std::string fmt;
            ls >> fmt;
            if (fmt != "ascii") throw IoError(path.string() + ": only ASCII PLY is supported");
        } else if (tok == "element") {
            ls >> current;
            long n = 0;
            ls >> n;
            if (current == "vertex") nv = n;
            if (current == "face") nf = n;
        } else if (tok == "property" && current == "vertex") {
            std::string type, name;
            ls >> type >> name;
            vprops.push_back(name);
            uchar_prop.push_back(type == "uchar" || type == "uint8");
        } else if (tok == "end_header") {
            break;
        }
    }
    auto find = [&](const std::string& n) {
        for (std::size_t i = 0; i < vprops.size(); ++i)
            if (vprops[i] == n) return static_cast<int>(i);
        return -1;
    };
    const int ix = find("x"), iy = find("y"), iz = find("z");
    const int ir = find("red"), ig = find("green"), ib = find("blue");
    if (ix < 0 || iy < 0 || iz < 0) throw IoError(path.string() + ": missing x/y/z properties");
    const bool has_color = ir >= 0 && ig >= 0 && ib >= 0;

    std::vector<Vec3> p, c;
    std::vector<double> vals(vprops.size());
    for (long i = 0; i < nv; ++i) {
        for (auto& v : vals)
            if (!(in >> v)) throw IoError(path.string() + ": truncated vertex list");
        p.emplace_back(vals[ix], vals[iy], vals[iz]);
        if (has_color) {
            Vec3 col(vals[ir], vals[ig], vals[ib]);
            if (uchar_prop[ir]) col /= 255.0;
            c.push_back(col);
        }
    }
    std::vector<std::array<int, 3>> f;
    for (long i = 0; i < nf; ++i) {
        int k = 0;
        if (!(in >> k)) throw IoError(path.string() + ": truncated face list");
        std::vector<int> idx(static_cast<std::size_t>(k));
        for (auto& v : idx) in >> v;
        for (int j = 1; j + 1 < k; ++j) f.push_back({idx[0], idx[j], idx[j + 1]});
    }
    return from_vectors(p, c, f, path);
}

void write_obj(const SurfaceMesh& mesh, const fs::path& path) {
    auto out = open_out(path);
    const bool colors = mesh.vertex_colors.rows() == mesh.positions.rows();
    for (Eigen::Index i = 0; i < mesh.positions.rows(); ++i) {
        out << "v " << mesh.positions(i, 0) << ' ' << mesh.positions(i, 1) << ' ' << mesh.positions(i, 2);
        if (colors) out << ' ' << mesh.vertex_colors(i, 0) << ' ' << mesh.vertex_colors(i, 1) << ' ' << mesh.vertex_colors(i, 2);
        out << '\n';
    }
    for (Eigen::Index f = 0; f < mesh.faces.rows(); ++f)
        out << "f " << mesh.faces(f, 0) + 1 << ' ' << mesh.faces(f, 1) + 1 << ' ' << mesh.faces(f, 2) + 1 << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

SurfaceMesh read_obj(const fs::path& path) {
    auto in = open_in(path);
    std::vector<Vec3> p, c;
    std::vector<std::array<int, 3>> f;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string tok;
        ls >> tok;
        if (tok == "v") {
            std::vector<double> v;
            double x;
            while (ls >> x) v.push_back(x);
            if (v.size() < 3) throw IoError(path.string() + ": malformed vertex line");
            p.emplace_back(v[0], v[1], v[2]);
            if (v.size() >= 6) c.emplace_back(v[3], v[4], v[5]);
        } else if (tok == "f") {
            std::vector<int> idx;
            std::string item;
            while (ls >> item) {
                int i = std::stoi(item.substr(0, item.find('/')));
                idx.push_back(i > 0 ? i - 1 : static_cast<int>(p.size()) + i);
            }
            for (std::size_t j = 1; j + 1 < idx.size(); ++j) f.push_back({idx[0], idx[j], idx[j + 1]});
        }
    }
    if (c.size() != p.size()) c.clear();
    return from_vectors(p, c, f, path);
}

SurfaceMesh read_mesh(const fs::path& path) {
    const auto ext = path.extension().string();
    if (ext == ".ply") return read_ply(path);
    if (ext == ".obj") return read_obj(path);
    throw IoError("unsupported mesh format: " + path.string());
}

void write_mesh(const SurfaceMesh& mesh, const fs::path& path) {
    const auto ext = path.extension().string();
    if (ext == ".ply")
        write_ply(mesh, path);
    else if (ext == ".obj")
        write_obj(mesh, path);
    else
        throw IoError("unsupported mesh format: " + path.string());
}

}  // namespace avk
