#include "avatarkit/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "avatarkit/errors.hpp"
#include "avatarkit/mesh_io.hpp"

namespace avk {

namespace {

// Body parts as returned by body_part(): 0 torso, 1 head, 2-3 arms, 4-5 legs.
std::vector<int> region_parts(const std::string& region) {
    if (region == "torso") return {0};
    if (region == "head") return {1};
    if (region == "arms") return {2, 3};
    if (region == "legs") return {4, 5};
    throw InvalidArgument("unknown body region '" + region + "'");
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw InvalidArgument(path.string() + ": " + e.what());
    }
}

void write_json(const nlohmann::json& j, const fs::path& path) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

std::string photo_name(std::size_t i) {
    std::ostringstream os;
    os << std::setw(4) << std::setfill('0') << i;
    return os.str();
}

/// Part-coloured copy of `mesh` with unshared vertices, so every face renders
/// exactly its own colour.
SurfaceMesh flat_part_mesh(const SurfaceMesh& mesh, const BodyShape& body, const std::array<Vec3, 6>& part_colors) {
    const Eigen::Index nf = mesh.num_faces();
    Points pos(3 * nf, 3), col(3 * nf, 3);
    Faces faces(nf, 3);
    for (Eigen::Index f = 0; f < nf; ++f) {
        Vec3 c = Vec3::Zero();
        for (int k = 0; k < 3; ++k) c += mesh.positions.row(mesh.faces(f, k)).transpose() / 3.0;
        const Vec3 color = part_colors[std::size_t(body_part(c, body))];
        for (int k = 0; k < 3; ++k) {
            pos.row(3 * f + k) = mesh.positions.row(mesh.faces(f, k));
            col.row(3 * f + k) = color.transpose();
            faces(f, k) = int(3 * f + k);
        }
    }
    return make_mesh(pos, faces, col);
}

SurfaceMesh body_mesh(const BodyShape& body, int resolution) {
    auto grid = std::make_shared<const TetGrid>(build_grid(resolution));
    const AvatarParams p = init_params(grid, [&](const Vec3& x) { return capsule_body_sdf<double>(x, body); });
    return extract_mesh(p);
}

void color_by_part(SurfaceMesh& mesh, const BodyShape& body, const std::array<Vec3, 6>& part_colors) {
    mesh.vertex_colors.resize(mesh.num_vertices(), 3);
    for (Eigen::Index v = 0; v < mesh.num_vertices(); ++v)
        mesh.vertex_colors.row(v) = part_colors[std::size_t(body_part(mesh.positions.row(v).transpose(), body))].transpose();
}

std::array<Vec3, 6> garment_colors(const Vec3& skin, const Vec3& top, const Vec3& bottom) {
    return {top, skin, top, top, bottom, bottom};
}

Image to_rgb(const Image& img) {
    if (img.channels == 3) return img;
    Image out(img.width, img.height, 3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(x, y, img.channels == 1 ? 0 : c);
    return out;
}

template <typename Fn>
auto staged(const char* stage, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const NumericError& e) {
        throw NumericError(std::string(stage) + ": " + e.what());
    } catch (const InvalidArgument& e) {
        throw InvalidArgument(std::string(stage) + ": " + e.what());
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Manifests

std::vector<std::string> default_regions(const std::string& class_name) {
    static const std::map<std::string, std::vector<std::string>> known = {
        {"face", {"head"}},           {"hair", {"head"}},           {"hat", {"head"}},
        {"shirt", {"torso", "arms"}}, {"t-shirt", {"torso", "arms"}}, {"jacket", {"torso", "arms"}},
        {"coat", {"torso", "arms"}},  {"sweater", {"torso", "arms"}}, {"top", {"torso"}},
        {"dress", {"torso", "legs"}}, {"pants", {"legs"}},          {"trousers", {"legs"}},
        {"jeans", {"legs"}},          {"shorts", {"legs"}},         {"skirt", {"legs"}}};
    const auto it = known.find(class_name);
    return it == known.end() ? std::vector<std::string>{} : it->second;
}

std::vector<Asset> SubjectManifest::asset_list() const {
    std::vector<Asset> out;
    for (const auto& a : assets) out.push_back(a.asset);
    return out;
}

SubjectManifest read_manifest(const fs::path& path) {
    const nlohmann::json j = read_json(path);
    SubjectManifest m;
    m.root = path.parent_path();
    try {
        m.subject_id = j.at("subject_id").get<std::string>();
        m.gender = parse_gender(j.value("gender", std::string("man")));
        for (const auto& a : j.at("assets")) {
            AssetRecord r;
            r.asset.token_id = a.at("token_id").get<int>();
            r.asset.class_name = a.at("class_name").get<std::string>();
            r.asset.kind = parse_asset_kind(a.at("kind").get<std::string>());
            r.regions = a.contains("regions") ? a.at("regions").get<std::vector<std::string>>()
                                              : default_regions(r.asset.class_name);
            for (const auto& reg : r.regions) region_parts(reg);
            m.assets.push_back(r);
        }
        if (j.contains("body_proxy")) m.body = j.at("body_proxy").get<BodyShape>();
        if (j.contains("ground_truth")) {
            const auto& g = j.at("ground_truth");
            if (g.contains("mesh")) m.gt_mesh = g.at("mesh").get<std::string>();
            if (g.contains("scan")) m.scan = g.at("scan").get<std::string>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw InvalidArgument(path.string() + ": " + e.what());
    }
    const auto& photos = j.contains("photos") ? j.at("photos") : nlohmann::json::array();
    for (std::size_t i = 0; i < photos.size(); ++i) {
        const auto& p = photos[i];
        PhotoRecord r;
        try {
            r.image = p.at("image").get<std::string>();
            for (const auto& [k, v] : p.at("masks").items()) r.masks[std::stoi(k)] = v.get<std::string>();
            r.view = parse_view_tag(p.at("view").get<std::string>());
            if (p.contains("visible")) r.visible = p.at("visible").get<std::vector<int>>();
            if (p.contains("body_rows")) r.body_rows = p.at("body_rows").get<std::array<double, 2>>();
        } catch (const std::exception& e) {
            throw InvalidArgument(path.string() + ": photo " + std::to_string(i) + ": " + e.what());
        }
        m.photos.push_back(std::move(r));
    }
    return m;
}

void write_manifest(const SubjectManifest& m, const fs::path& path) {
    nlohmann::json j;
    j["subject_id"] = m.subject_id;
    j["gender"] = to_string(m.gender);
    j["assets"] = nlohmann::json::array();
    for (const auto& a : m.assets)
        j["assets"].push_back({{"token_id", a.asset.token_id},
                               {"class_name", a.asset.class_name},
                               {"kind", to_string(a.asset.kind)},
                               {"regions", a.regions}});
    j["body_proxy"] = m.body;
    j["photos"] = nlohmann::json::array();
    for (const auto& p : m.photos) {
        nlohmann::json masks = nlohmann::json::object();
        for (const auto& [k, v] : p.masks) masks[std::to_string(k)] = v;
        nlohmann::json r = {{"image", p.image}, {"masks", masks}, {"view", to_string(p.view)}, {"visible", p.visible}};
        if (p.body_rows) r["body_rows"] = *p.body_rows;
        j["photos"].push_back(r);
    }
    if (m.gt_mesh || m.scan) {
        j["ground_truth"] = nlohmann::json::object();
        if (m.gt_mesh) j["ground_truth"]["mesh"] = *m.gt_mesh;
        if (m.scan) j["ground_truth"]["scan"] = *m.scan;
    }
    write_json(j, path);
}

Subject ingest(const fs::path& path) {
    Subject s;
    s.manifest = read_manifest(path);
    const SubjectManifest& m = s.manifest;
    validate_assets(m.asset_list());
    std::set<int> ids;
    for (const auto& a : m.assets) ids.insert(a.asset.token_id);
    if (m.photos.empty()) throw InvalidArgument(path.string() + ": manifest lists no photos");

    auto need = [&](const std::string& rel, const std::string& what) {
        const fs::path p = m.root / rel;
        if (!fs::exists(p)) throw IoError(what + ": missing file " + p.string());
        return p;
    };
    for (std::size_t i = 0; i < m.photos.size(); ++i) {
        const PhotoRecord& r = m.photos[i];
        const std::string where = "photo " + std::to_string(i) + " (" + r.image + ")";
        TrainImage t;
        t.image = to_rgb(read_png(need(r.image, where)));
        t.view = r.view;
        t.gender = m.gender;
        for (int id : r.visible)
            if (!ids.count(id)) throw InvalidArgument(where + ": visible asset " + std::to_string(id) + " not in the asset table");
        for (const auto& [id, rel] : r.masks) {
            if (!ids.count(id)) throw InvalidArgument(where + ": mask for unknown asset " + std::to_string(id));
            const Image raw = read_png(need(rel, where));
            if (raw.width != t.image.width || raw.height != t.image.height)
                throw InvalidArgument(where + ": mask for asset " + std::to_string(id) + " is " + std::to_string(raw.width) +
                                      "x" + std::to_string(raw.height) + ", image is " + std::to_string(t.image.width) +
                                      "x" + std::to_string(t.image.height));
            Image mask(raw.width, raw.height, 1);
            for (int y = 0; y < raw.height; ++y)
                for (int x = 0; x < raw.width; ++x) mask.at(x, y) = raw.at(x, y, 0) >= 0.5 ? 1.0 : 0.0;
            t.masks[id] = std::move(mask);
        }
        s.photos.push_back(std::move(t));
    }
    if (m.gt_mesh) need(*m.gt_mesh, "ground truth");
    if (m.scan) need(*m.scan, "scan");
    return s;
}

fs::path gen_synthetic_subject(const fs::path& dir, std::uint64_t seed, int photos, int size) {
    if (photos < 1 || size < 16) throw InvalidArgument("gen_synthetic_subject: need >= 1 photo of >= 16 px");
    SubjectManifest m;
    m.subject_id = "synthetic-" + std::to_string(seed);
    m.gender = Gender::man;
    m.body = BodyShape::randomized(seed, 0.15);
    m.assets = {{{0, "face", AssetKind::face}, {"head"}},
                {{1, "shirt", AssetKind::garment}, {"torso", "arms"}},
                {{2, "pants", AssetKind::garment}, {"legs"}}};
    const Vec3 skin(0.85, 0.68, 0.55), shirt(0.78, 0.22, 0.2), pants(0.2, 0.3, 0.65);
    const auto colors = garment_colors(skin, shirt, pants);

    SurfaceMesh gt = body_mesh(m.body, 64);
    color_by_part(gt, m.body, colors);
    fs::create_directories(dir / "photos");
    fs::create_directories(dir / "masks");
    write_ply(gt, dir / "gt.ply");
    m.gt_mesh = "gt.ply";

    // Asset index k is encoded as (k + 1) / 4 in the red channel of the id render.
    const std::array<Vec3, 6> ids = {Vec3::Constant(0.5), Vec3::Constant(0.25), Vec3::Constant(0.5),
                                     Vec3::Constant(0.5), Vec3::Constant(0.75), Vec3::Constant(0.75)};
    const SurfaceMesh color_mesh = flat_part_mesh(gt, m.body, colors);
    const SurfaceMesh id_mesh = flat_part_mesh(gt, m.body, ids);

    CamConfig cams;
    cams.face_target = m.body.head_center();
    Rng rng(seed ^ 0x5eedf00dULL);
    RenderOptions opts;
    opts.width = opts.height = size;
    for (int i = 0; i < photos; ++i) {
        const CameraSample cam = sample_camera(rng, cams);
        const Image img = render(color_mesh, cam, RenderMode::color, opts);
        const Image idr = render(id_mesh, cam, RenderMode::color, opts);
        PhotoRecord r;
        const std::string name = photo_name(std::size_t(i));
        r.image = "photos/" + name + ".png";
        r.view = cam.view_tag;
        write_png(img, dir / r.image);
        for (std::size_t k = 0; k < m.assets.size(); ++k) {
            Image mask(size, size, 1);
            const double code = double(k + 1) / 4.0;
            double area = 0;
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x)
                    if (idr.foreground[std::size_t(y * size + x)] && std::abs(idr.at(x, y, 0) - code) < 0.1) {
                        mask.at(x, y) = 1.0;
                        ++area;
                    }
            const int id = m.assets[k].asset.token_id;
            r.masks[id] = "masks/" + name + "_" + std::to_string(id) + ".png";
            write_png(mask, dir / r.masks[id]);
            if (area > 0) r.visible.push_back(id);
        }
        const CameraFrame frame(cam, size, size);
        double top = std::numeric_limits<double>::infinity(), bottom = -top;
        for (Eigen::Index v = 0; v < gt.num_vertices(); ++v) {
            const Vec3 p = frame.project<double>(gt.positions.row(v).transpose());
            top = std::min(top, p.y());
            bottom = std::max(bottom, p.y());
        }
        r.body_rows = std::array<double, 2>{top, bottom};
        m.photos.push_back(std::move(r));
    }
    const fs::path manifest = dir / "manifest.json";
    write_manifest(m, manifest);
    return manifest;
}

// ---------------------------------------------------------------------------
// Synthetic prior

std::vector<PriorEntry> gen_synthetic_prior(int n_subjects, std::uint64_t seed, int size,
                                            const std::optional<fs::path>& out_dir) {
    if (n_subjects < 1) throw InvalidArgument("gen_synthetic_prior: n_subjects must be >= 1");
    if (size < 8) throw InvalidArgument("gen_synthetic_prior: size must be >= 8");
    std::vector<PriorEntry> out;
    RenderOptions opts;
    opts.width = opts.height = size;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int s = 0; s < n_subjects; ++s) {
        Rng rng(seed * 1000003ULL + std::uint64_t(s));
        const BodyShape body = BodyShape::randomized(rng(), 0.1);
        const Gender gender = s % 2 ? Gender::woman : Gender::man;
        const Vec3 skin(0.6 + 0.3 * u(rng), 0.45 + 0.25 * u(rng), 0.35 + 0.2 * u(rng));
        const Vec3 top(u(rng), u(rng), u(rng)), bottom(u(rng), u(rng), u(rng));
        SurfaceMesh mesh = body_mesh(body, 40);
        color_by_part(mesh, body, garment_colors(skin, top, bottom));

        CamConfig body_cams, head_cams;
        body_cams.p_body = 1.0;
        head_cams.p_body = 0.0;
        head_cams.face_target = body.head_center();
        const std::string who = std::string(to_string(gender));
        for (CameraGroup group : {CameraGroup::body, CameraGroup::face}) {
            for (int v = 0; v < 8; ++v) {
                const CameraSample cam = sample_camera(rng, group == CameraGroup::body ? body_cams : head_cams);
                const std::string view = std::string(to_string(cam.view_tag)) + " view";
                const std::string subject =
                    group == CameraGroup::body ? "a " + who + " wearing shirt, wearing pants, " + view
                                               : "the headshot of a " + who + " with face, " + view;
                for (PriorMode mode : {PriorMode::color, PriorMode::normal}) {
                    PriorEntry e;
                    e.mode = mode;
                    e.group = group;
                    e.subject = s;
                    e.image = render(mesh, cam, mode == PriorMode::color ? RenderMode::color : RenderMode::normal, opts);
                    if (mode == PriorMode::color)
                        e.prompt = "a high-resolution DSLR colored image" + std::string(group == CameraGroup::body ? " of " : ", ") + subject;
                    else
                        e.prompt = "a detailed sculpture" + std::string(group == CameraGroup::body ? " of " : ", ") + subject;
                    std::ostringstream name;
                    name << "prior/s" << std::setw(4) << std::setfill('0') << s << '_' << to_string(group) << v << '_'
                         << (mode == PriorMode::color ? "color" : "normal") << ".png";
                    e.path = name.str();
                    out.push_back(std::move(e));
                }
            }
        }
    }
    if (out_dir) {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& e : out) {
            write_png(e.image, *out_dir / e.path);
            j.push_back({{"image", e.path},
                         {"prompt", e.prompt},
                         {"mode", e.mode == PriorMode::color ? "color" : "normal"},
                         {"group", to_string(e.group)},
                         {"subject", e.subject}});
        }
        write_json({{"entries", j}, {"subjects", n_subjects}, {"seed", seed}}, *out_dir / "prior.json");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Config

std::string_view to_string(Preset p) { return p == Preset::desk ? "desk" : "full"; }

Preset parse_preset(std::string_view s) {
    if (s == "desk") return Preset::desk;
    if (s == "full") return Preset::full;
    throw InvalidArgument("unknown preset '" + std::string(s) + "'");
}

RunConfig RunConfig::make(Preset preset, std::uint64_t seed) {
    RunConfig c;
    c.preset = preset;
    c.seed = seed;
    if (preset == Preset::desk) {
        c.booth.stage1_steps = 100;
        c.booth.stage2_steps = 400;
        c.distill.iters_geometry = 400;
        c.distill.iters_color = 400;
        c.distill.render_size = 128;
        c.metrics.render_size = 128;
        c.grid_resolution = 48;
        c.prior_subjects = 2;
        c.prior_size = 64;
    } else {
        c.booth.stage1_steps = 1000;
        c.booth.stage2_steps = 4000;
        c.distill.iters_geometry = 10000;
        c.distill.iters_color = 10000;
        c.distill.render_size = 256;
        c.metrics.render_size = 256;
        c.grid_resolution = 128;
        c.prior_subjects = 525;
        c.prior_size = 128;
    }
    c.distill.weight = WeightMode::one_minus_alpha_bar;
    c.distill.lr_geometry = 1e-3;
    c.set_seed(seed);
    return c;
}

void RunConfig::set_seed(std::uint64_t s) {
    seed = s;
    booth.seed = s;
    denoiser.seed = s;
    distill.seed = s + 1;
    metrics.seed = s + 2;
}

void RunConfig::validate() const {
    if (!(ablation.data_fraction > 0.0 && ablation.data_fraction <= 1.0))
        throw InvalidArgument("data_fraction must be in (0, 1]");
    if (grid_resolution < 4) throw InvalidArgument("grid_resolution must be >= 4");
    if (prior_subjects < 1 || prior_size < 8) throw InvalidArgument("prior needs >= 1 subject of >= 8 px");
    if (metrics.samples < 1 || metrics.render_size < 11) throw InvalidArgument("bad metric config");
    booth.validate();
    distill.validate(1000);
}

void to_json(nlohmann::json& j, const AblationFlags& f) {
    j = {{"view_prompt", f.view_prompt},         {"nfsd", f.nfsd},
         {"synthetic_normal", f.synthetic_normal}, {"synthetic_color", f.synthetic_color},
         {"data_fraction", f.data_fraction},       {"full_body_images", f.full_body_images}};
}

void from_json(const nlohmann::json& j, AblationFlags& f) {
    auto get = [&](const char* k, auto& v) {
        if (j.contains(k)) j.at(k).get_to(v);
    };
    get("view_prompt", f.view_prompt);
    get("nfsd", f.nfsd);
    get("synthetic_normal", f.synthetic_normal);
    get("synthetic_color", f.synthetic_color);
    get("data_fraction", f.data_fraction);
    get("full_body_images", f.full_body_images);
}

void to_json(nlohmann::json& j, const BodyShape& b) {
    j = {{"torso_radius", b.torso_radius},       {"torso_bottom", b.torso_bottom}, {"torso_top", b.torso_top},
         {"head_radius", b.head_radius},         {"head_height", b.head_height},   {"shoulder_offset", b.shoulder_offset},
         {"arm_length", b.arm_length},           {"arm_radius", b.arm_radius},     {"arm_angle_deg", b.arm_angle_deg},
         {"hip_offset", b.hip_offset},           {"leg_length", b.leg_length},     {"leg_radius", b.leg_radius},
         {"leg_spread_deg", b.leg_spread_deg}};
}

void from_json(const nlohmann::json& j, BodyShape& b) {
    auto get = [&](const char* k, double& v) {
        if (j.contains(k)) v = j.at(k).get<double>();
    };
    get("torso_radius", b.torso_radius);
    get("torso_bottom", b.torso_bottom);
    get("torso_top", b.torso_top);
    get("head_radius", b.head_radius);
    get("head_height", b.head_height);
    get("shoulder_offset", b.shoulder_offset);
    get("arm_length", b.arm_length);
    get("arm_radius", b.arm_radius);
    get("arm_angle_deg", b.arm_angle_deg);
    get("hip_offset", b.hip_offset);
    get("leg_length", b.leg_length);
    get("leg_radius", b.leg_radius);
    get("leg_spread_deg", b.leg_spread_deg);
}

void to_json(nlohmann::json& j, const RunConfig& c) {
    j = {{"seed", c.seed},
         {"preset", to_string(c.preset)},
         {"ablation", c.ablation},
         {"booth", c.booth},
         {"denoiser",
          {{"resolution", c.denoiser.resolution},
           {"attn_resolution", c.denoiser.attn_resolution},
           {"channels", c.denoiser.channels},
           {"embed_dim", c.denoiser.embed_dim},
           {"seed", c.denoiser.seed}}},
         {"distill", c.distill},
         {"metrics", {{"samples", c.metrics.samples}, {"render_size", c.metrics.render_size}, {"seed", c.metrics.seed}}},
         {"grid_resolution", c.grid_resolution},
         {"prior_subjects", c.prior_subjects},
         {"prior_size", c.prior_size}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
    const Preset preset = j.contains("preset") ? parse_preset(j.at("preset").get<std::string>()) : c.preset;
    const std::uint64_t seed = j.value("seed", c.seed);
    if (preset != c.preset || seed != c.seed) c = RunConfig::make(preset, seed);
    if (j.contains("ablation")) j.at("ablation").get_to(c.ablation);
    if (j.contains("booth")) from_json(j.at("booth"), c.booth);
    if (j.contains("distill")) from_json(j.at("distill"), c.distill);
    if (j.contains("denoiser")) {
        const auto& d = j.at("denoiser");
        c.denoiser.resolution = d.value("resolution", c.denoiser.resolution);
        c.denoiser.attn_resolution = d.value("attn_resolution", c.denoiser.attn_resolution);
        c.denoiser.channels = d.value("channels", c.denoiser.channels);
        c.denoiser.embed_dim = d.value("embed_dim", c.denoiser.embed_dim);
        c.denoiser.seed = d.value("seed", c.denoiser.seed);
    }
    if (j.contains("metrics")) {
        const auto& m = j.at("metrics");
        c.metrics.samples = m.value("samples", c.metrics.samples);
        c.metrics.render_size = m.value("render_size", c.metrics.render_size);
        c.metrics.seed = m.value("seed", c.metrics.seed);
    }
    c.grid_resolution = j.value("grid_resolution", c.grid_resolution);
    c.prior_subjects = j.value("prior_subjects", c.prior_subjects);
    c.prior_size = j.value("prior_size", c.prior_size);
}

nlohmann::json fingerprint(const RunConfig& cfg) {
    const nlohmann::json j = cfg;
    const std::string text = j.dump();
    std::ostringstream hex;
    hex << std::hex << std::setw(16) << std::setfill('0') << fnv1a(text.data(), text.size());
    return {{"config", j}, {"hash", hex.str()}};
}

// ---------------------------------------------------------------------------
// Pipeline

bool is_full_body(const TrainImage& photo, const PhotoRecord& record) {
    int first = -1, last = -1;
    for (int y = 0; y < photo.image.height; ++y) {
        bool any = false;
        for (const auto& [id, mask] : photo.masks)
            for (int x = 0; x < mask.width && !any; ++x) any = mask.at(x, y) > 0.5;
        if (any) {
            if (first < 0) first = y;
            last = y;
        }
    }
    if (first < 0) return false;
    const double top = record.body_rows ? (*record.body_rows)[0] : 0.0;
    const double bottom = record.body_rows ? (*record.body_rows)[1] : double(photo.image.height);
    const double height = bottom - top;
    if (!(height > 0)) return false;
    const double covered = std::min(double(last + 1), bottom) - std::max(double(first), top);
    return covered / height >= 0.9;
}

std::vector<std::size_t> select_photos(const Subject& subject, const RunConfig& cfg) {
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < subject.photos.size(); ++i)
        if (cfg.ablation.full_body_images || !is_full_body(subject.photos[i], subject.manifest.photos[i])) keep.push_back(i);
    if (cfg.ablation.data_fraction < 1.0 && !keep.empty()) {
        const std::size_t n = std::max<std::size_t>(1, std::size_t(std::llround(cfg.ablation.data_fraction * double(keep.size()))));
        Rng rng(cfg.seed + 4);
        std::shuffle(keep.begin(), keep.end(), rng);
        keep.resize(std::min(n, keep.size()));
        std::sort(keep.begin(), keep.end());
    }
    if (keep.empty()) throw InvalidArgument("no photos left after the ablation filters");
    return keep;
}

PersonalPrior build_personal_prior(const Subject& subject, const std::vector<std::size_t>& photos,
                                   const ToyDenoiser& model, const RunConfig& cfg, bool had_normal_prior) {
    const SubjectManifest& m = subject.manifest;
    PersonalPrior prior;
    prior.template_body = had_normal_prior ? m.body : BodyShape{};

    // Asset colours recalled by the personalised model: one-step x0 estimate
    // on each masked photo, averaged over the asset's mask.
    const int R = model.config().resolution;
    constexpr int kRecallT = 100;
    Rng rng(cfg.seed + 5);
    for (const auto& rec : m.assets) {
        const int id = rec.asset.token_id;
        Vec3 sum = Vec3::Zero(), fallback = Vec3::Zero();
        double weight = 0, fweight = 0;
        for (std::size_t i : photos) {
            const TrainImage& photo = subject.photos[i];
            const auto it = photo.masks.find(id);
            if (it == photo.masks.end() || it->second.data.sum() == 0) continue;
            for (Eigen::Index p = 0; p < photo.image.pixels(); ++p)
                if (it->second.data[p] > 0.5) {
                    fallback += photo.image.data.segment<3>(p * 3);
                    ++fweight;
                }
            const Image mask = mask_to_attention(it->second, R);
            Image img = resize_area(photo.image, R, R);
            for (Eigen::Index p = 0; p < img.pixels(); ++p) img.data.segment<3>(p * 3) *= mask.data[p];
            const Image noise = gaussian_noise(img, rng);
            const Image zt = add_noise(img, noise, model.schedule(), kRecallT);
            const std::optional<ViewTag> view = cfg.ablation.view_prompt ? std::optional<ViewTag>(photo.view) : std::nullopt;
            const DenoiserForward fw = model.forward(zt, kRecallT, build_prompt({rec.asset}, m.gender, view));
            for (Eigen::Index p = 0; p < img.pixels(); ++p)
                if (mask.data[p] > 0.5) {
                    sum += fw.x0.data.segment<3>(p * 3).cwiseMax(0.0).cwiseMin(1.0);
                    ++weight;
                }
        }
        Vec3 c = Vec3::Constant(0.5);
        if (weight > 0 && sum.allFinite())
            c = sum / weight;
        else if (fweight > 0)
            c = fallback / fweight;
        prior.asset_colors[id] = c;
    }

    std::array<Vec3, 6> parts;
    parts.fill(prior.skin);
    for (const auto& rec : m.assets)
        for (const auto& region : rec.regions)
            for (int p : region_parts(region)) parts[std::size_t(p)] = prior.asset_colors[rec.asset.token_id];
    prior.mesh = body_mesh(prior.template_body, std::max(cfg.grid_resolution, 48));
    color_by_part(prior.mesh, prior.template_body, parts);
    return prior;
}

double guided_gain(const DistillConfig& dc, const NoiseSchedule& sched) {
    if (!dc.use_nfsd) return dc.guidance;
    double all = 0.0, low = 0.0;
    for (int t = dc.t_min; t <= dc.t_max; ++t) {
        const double ab = sched.abar(t);
        const double a = weight_at(dc, sched, t) * std::sqrt(ab / (1.0 - ab));
        all += a;
        if (t <= dc.t_threshold) low += a;
    }
    if (!(low > 0.0)) throw InvalidArgument("guided_gain: no timesteps below the NFSD threshold");
    return dc.guidance * all / low;
}

GaussianOracle make_oracle(const PersonalPrior& prior, const FitPrompts& prompts, const RunConfig& cfg) {
    GaussianOracle oracle(0.0);
    const Vec3 uncond = Vec3::Constant(0.5);
    oracle.set_role_mean(PromptRole::unconditional, GaussianOracle::flat(uncond));
    DistillConfig dc = cfg.distill;
    dc.use_nfsd = cfg.ablation.nfsd;
    const double gain = guided_gain(dc, oracle.schedule());
    auto mesh = std::make_shared<const SurfaceMesh>(prior.mesh);

    // Colour means are placed so the estimator's expected fixed point is the
    // template render: mu_p = mu_0 + (render - mu_0) / gain. Normal renders
    // are unit vectors, so the guided overshoot saturates at the target
    // direction and the raw render serves as the mean.
    auto target = [mesh, uncond, gain](RenderMode mode, bool front_only) {
        return [=](const CameraSample* view, int w, int h, int c) {
            if (!view) throw ContractViolation("personal prior needs a camera");
            if (c != 3) throw ContractViolation("personal prior renders RGB only");
            CameraSample cam = *view;
            if (front_only) cam = make_camera(view->target, view->radius, 0.0, view->elevation, view->fov_y, view->group);
            RenderOptions opts;
            opts.width = w;
            opts.height = h;
            Image img = render(*mesh, cam, mode, opts);
            if (mode == RenderMode::color && gain > 0)
                for (Eigen::Index p = 0; p < img.pixels(); ++p)
                    img.data.segment<3>(p * 3) = uncond + (img.data.segment<3>(p * 3) - uncond) / gain;
            return img;
        };
    };
    for (ViewTag tag : {ViewTag::front, ViewTag::side, ViewTag::back, ViewTag::overhead}) {
        FitPrompts on = prompts;
        on.view_prompt = true;
        oracle.set_text_mean(on.with_view(prompts.geometry, tag), target(RenderMode::normal, false));
        oracle.set_text_mean(on.with_view(prompts.color, tag), target(RenderMode::color, false));
    }
    // Without a view word the prior produces its dominant (front) view for every camera.
    oracle.set_text_mean(prompts.geometry, target(RenderMode::normal, true));
    oracle.set_text_mean(prompts.color, target(RenderMode::color, true));
    return oracle;
}

std::vector<PriorImage> prior_for(const RunConfig& cfg) {
    std::vector<PriorImage> out;
    if (!cfg.ablation.synthetic_color && !cfg.ablation.synthetic_normal) return out;
    for (auto& e : gen_synthetic_prior(cfg.prior_subjects, cfg.seed + 3, cfg.prior_size)) {
        if (e.mode == PriorMode::color && !cfg.ablation.synthetic_color) continue;
        if (e.mode == PriorMode::normal && !cfg.ablation.synthetic_normal) continue;
        out.push_back({std::move(e.image), e.prompt});
    }
    return out;
}

BoothStage run_booth(const Subject& subject, const RunConfig& cfg, const std::vector<std::size_t>& photos) {
    const auto assets = subject.manifest.asset_list();
    validate_assets(assets);
    std::vector<TrainImage> train;
    for (std::size_t i : photos) train.push_back(subject.photos.at(i));
    const std::vector<PriorImage> prior = prior_for(cfg);
    BoothStage out{ToyDenoiser(assets, cfg.denoiser), {}};
    BoothSchedule schedule = cfg.booth;
    schedule.view_prompt = cfg.ablation.view_prompt;
    out.result = staged("booth", [&] { return train_personalization(out.model, train, prior, schedule); });
    return out;
}

FitPrompts fit_prompts(const SubjectManifest& m, const RunConfig& cfg) {
    const auto assets = m.asset_list();
    FitPrompts prompts;
    prompts.geometry = build_prompt(assets, m.gender, std::nullopt, PromptStyle::sculpture);
    prompts.color = build_prompt(assets, m.gender, std::nullopt, PromptStyle::color);
    prompts.view_prompt = cfg.ablation.view_prompt;
    return prompts;
}

AvatarStage run_avatar(const Subject& subject, const RunConfig& cfg, const std::vector<std::size_t>& photos,
                       const ToyDenoiser& model) {
    const SubjectManifest& m = subject.manifest;
    const FitPrompts prompts = fit_prompts(m, cfg);
    AvatarStage out;
    out.prior = staged("prior", [&] {
        return build_personal_prior(subject, photos, model, cfg, cfg.ablation.synthetic_normal);
    });
    const GaussianOracle oracle = make_oracle(out.prior, prompts, cfg);

    DistillConfig dc = cfg.distill;
    dc.use_nfsd = cfg.ablation.nfsd;
    dc.cameras.face_target = m.body.head_center();
    auto grid = std::make_shared<const TetGrid>(build_grid(cfg.grid_resolution));
    const AvatarParams init = init_params(grid, [&](const Vec3& x) { return capsule_body_sdf<double>(x, m.body); });
    out.fit = staged("distill", [&] { return fit_avatar(init, oracle, prompts, dc); });
    out.mesh = staged("extract", [&] { return extract_mesh(out.fit.params); });
    return out;
}

MetricReport evaluate_subject(const SurfaceMesh& mesh, const SubjectManifest& m, const SurfaceMesh* reference,
                              const MetricConfig& cfg) {
    return staged("metrics", [&] {
        if (m.gt_mesh) {
            const SurfaceMesh gt = read_mesh(m.root / *m.gt_mesh);
            std::optional<PointCloud> scan;
            if (m.scan) scan = PointCloud{read_mesh(m.root / *m.scan).positions, {}};
            return evaluate(mesh, gt, scan, cfg);
        }
        if (!reference) throw InvalidArgument("no ground truth and no reference mesh to compare against");
        RenderOptions opts;
        opts.width = opts.height = cfg.render_size;
        std::vector<Image> refs;
        for (const auto& cam : metric_views()) refs.push_back(render(*reference, cam, RenderMode::color, opts));
        return evaluate_images(mesh, refs, cfg);
    });
}

void write_booth_artifacts(const BoothStage& booth, const RunConfig& cfg, const fs::path& dir) {
    const nlohmann::json fp = fingerprint(cfg);
    fs::create_directories(dir);
    booth.model.save(dir / "denoiser");
    nlohmann::json j = read_json(dir / "denoiser.json");
    j["fingerprint"] = fp;
    write_json(j, dir / "denoiser.json");
    std::ofstream log(dir / "log.csv");
    log << "# fingerprint " << fp.at("hash").get<std::string>() << "\nstage,step,rec,attn,prior,total\n";
    log << std::setprecision(17);
    for (const auto& r : booth.result.log)
        log << r.stage << ',' << r.step << ',' << r.rec << ',' << r.attn << ',' << r.prior << ',' << r.total << '\n';
    write_json(fp, dir / "fingerprint.json");
}

void write_avatar_artifacts(const AvatarStage& avatar, const RunConfig& cfg, const fs::path& dir) {
    const nlohmann::json fp = fingerprint(cfg);
    fs::create_directories(dir);
    save_params(avatar.fit.params, dir / "params");
    nlohmann::json j = read_json(dir / "params.json");
    j["fingerprint"] = fp;
    write_json(j, dir / "params.json");
    write_trace_csv(avatar.fit.trace, dir / "trace.csv");
    write_ply(avatar.mesh, dir / "mesh.ply");
    write_ply(avatar.prior.mesh, dir / "prior.ply");
    write_json(fp, dir / "fingerprint.json");
}

void write_report(const MetricReport& report, const fs::path& path) { write_json(report, path); }

MetricReport read_report(const fs::path& path) { return read_json(path).get<MetricReport>(); }

RunResult run_pipeline(const Subject& subject, const RunConfig& cfg, const std::optional<fs::path>& out_dir) {
    cfg.validate();
    const SubjectManifest& m = subject.manifest;
    const auto photos = staged("select", [&] { return select_photos(subject, cfg); });
    BoothStage booth = run_booth(subject, cfg, photos);
    AvatarStage avatar = run_avatar(subject, cfg, photos, booth.model);
    MetricReport rep = evaluate_subject(avatar.mesh, m, &avatar.prior.mesh, cfg.metrics);
    rep.fingerprint["run"] = fingerprint(cfg);
    rep.fingerprint["subject"] = m.subject_id;
    rep.fingerprint["photos_used"] = photos.size();

    if (out_dir) {
        fs::create_directories(*out_dir);
        write_json(fingerprint(cfg), *out_dir / "config.json");
        write_booth_artifacts(booth, cfg, *out_dir / "booth");
        write_avatar_artifacts(avatar, cfg, *out_dir / "avatar");
        write_report(rep, *out_dir / "report.json");
    }
    return {std::move(booth.model), std::move(booth.result), std::move(avatar.fit), std::move(avatar.mesh), std::move(rep)};
}

// ---------------------------------------------------------------------------
// Reports

namespace {

struct MetricColumn {
    const char* key;
    const char* title;
    bool lower_is_better;
    std::optional<double> MetricReport::*field;
};

const MetricColumn kColumns[] = {{"chamfer_cm", "Chamfer (cm) ↓", true, &MetricReport::chamfer_cm},
                                 {"p2s_cm", "P2S (cm) ↓", true, &MetricReport::p2s_cm},
                                 {"normal_l2", "Normal ↓", true, &MetricReport::normal_l2},
                                 {"psnr_db", "PSNR ↑", false, &MetricReport::psnr_db},
                                 {"ssim", "SSIM ↑", false, &MetricReport::ssim}};

std::string pct(double d) {
    std::ostringstream os;
    os << std::showpos << std::fixed << std::setprecision(2) << d << '%';
    return os.str();
}

}  // namespace

ReportTables report(const std::vector<LabeledReport>& reports, const std::optional<std::string>& baseline) {
    std::vector<std::string> order;
    std::map<std::string, std::vector<const MetricReport*>> groups;
    for (const auto& r : reports) {
        if (!groups.count(r.label)) order.push_back(r.label);
        groups[r.label].push_back(&r.report);
    }
    if (baseline && !groups.count(*baseline)) throw InvalidArgument("report: baseline '" + *baseline + "' not among the runs");

    std::map<std::string, MetricReport> mean;
    for (const auto& label : order) {
        MetricReport agg;
        for (const auto& col : kColumns) {
            double s = 0;
            int n = 0;
            for (const MetricReport* r : groups[label])
                if (r->*col.field) {
                    s += *(r->*col.field);
                    ++n;
                }
            if (n) agg.*col.field = s / n;
        }
        mean[label] = agg;
    }

    ReportTables t;
    if (baseline)
        for (const auto& label : order) {
            if (label == *baseline) continue;
            for (const auto& col : kColumns) {
                const auto& b = mean[*baseline].*col.field;
                const auto& v = mean[label].*col.field;
                std::optional<double> d;
                if (b && v && *b != 0 && std::isfinite(*b) && std::isfinite(*v)) d = (*v - *b) / *b * 100.0;
                t.deltas[label][col.key] = d;
            }
        }

    std::ostringstream csv, md;
    csv << "label,runs";
    for (const auto& col : kColumns) csv << ',' << col.key;
    csv << ",lpips";
    if (baseline)
        for (const auto& col : kColumns) csv << ",delta_" << col.key << "_pct";
    csv << '\n';
    md << "| Method |";
    for (const auto& col : kColumns) md << ' ' << col.title << " |";
    md << " LPIPS ↓ |\n|---|";
    for (std::size_t i = 0; i < std::size(kColumns); ++i) md << "---|";
    md << "---|\n";

    for (const auto& label : order) {
        const MetricReport& r = mean[label];
        csv << label << ',' << groups[label].size();
        for (const auto& col : kColumns) csv << ',' << format_metric(r.*col.field);
        csv << ",n/a";
        md << "| " << label << " |";
        for (const auto& col : kColumns) {
            md << ' ' << format_metric(r.*col.field);
            if (baseline && label != *baseline) {
                const auto d = t.deltas[label][col.key];
                if (d) {
                    const bool drop = col.lower_is_better ? *d > 0 : *d < 0;
                    const bool gain = col.lower_is_better ? *d < 0 : *d > 0;
                    const std::string cell = pct(*d) + (drop ? " drop" : gain ? " gain" : "");
                    md << " (" << (drop && std::abs(*d) > 20.0 ? "**" + cell + "**" : cell) << ')';
                }
            }
            md << " |";
        }
        md << " n/a |\n";
        if (baseline)
            for (const auto& col : kColumns) {
                if (label == *baseline) {
                    csv << ",n/a";
                    continue;
                }
                const auto d = t.deltas[label][col.key];
                csv << ',' << (d ? pct(*d).substr(0, pct(*d).size() - 1) : std::string("n/a"));
            }
        csv << '\n';
    }
    if (baseline)
        md << "\nDeltas are (ablation - baseline) / baseline x 100 against \"" << *baseline
           << "\"; drops larger than 20% are bold.\n";
    t.csv = csv.str();
    t.markdown = md.str();
    return t;
}

std::vector<std::pair<std::string, RunConfig>> ablation_suite(const RunConfig& base) {
    std::vector<std::pair<std::string, RunConfig>> out;
    auto add = [&](const char* label, auto edit) {
        RunConfig c = base;
        edit(c.ablation);
        out.emplace_back(label, c);
    };
    add("w/o view prompt", [](AblationFlags& f) { f.view_prompt = false; });
    add("w/o NFSD (SDS)", [](AblationFlags& f) { f.nfsd = false; });
    add("w/o synthetic normal", [](AblationFlags& f) { f.synthetic_normal = false; });
    add("w/o synthetic color", [](AblationFlags& f) { f.synthetic_color = false; });
    add("10% data", [](AblationFlags& f) { f.data_fraction = 0.1; });
    add("w/o full-body images", [](AblationFlags& f) { f.full_body_images = false; });
    return out;
}

}  // namespace avk
