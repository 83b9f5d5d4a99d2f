// avk: command-line front end for the avatar pipeline.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "avatarkit/errors.hpp"
#include "avatarkit/harness.hpp"
#include "avatarkit/mesh_io.hpp"

using namespace avk;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    std::string config;
    std::optional<std::string> preset;
    std::string out = "out";
};

nlohmann::json load_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw InvalidArgument(path.string() + ": " + e.what());
    }
}

void save_json(const nlohmann::json& j, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(1) << '\n';
}

// Preset, then the config file (a RunConfig or a run fingerprint), then --seed.
RunConfig resolve_config(const Globals& g) {
    RunConfig cfg = RunConfig::make(g.preset ? parse_preset(*g.preset) : Preset::desk);
    if (!g.config.empty()) {
        nlohmann::json j = load_json(g.config);
        if (j.contains("config") && j.contains("hash")) j = j.at("config");
        if (g.preset) j["preset"] = *g.preset;
        try {
            from_json(j, cfg);
        } catch (const nlohmann::json::exception& e) {
            throw InvalidArgument(g.config + ": " + e.what());
        }
    }
    if (g.seed) cfg.set_seed(*g.seed);
    cfg.validate();
    return cfg;
}

void print_report(const MetricReport& r) {
    std::cout << "chamfer_cm " << format_metric(r.chamfer_cm) << "\np2s_cm " << format_metric(r.p2s_cm) << "\nnormal_l2 "
              << format_metric(r.normal_l2) << "\npsnr_db " << format_metric(r.psnr_db) << "\nssim "
              << format_metric(r.ssim) << '\n';
}

void write_tables(const ReportTables& t, const fs::path& dir) {
    fs::create_directories(dir);
    std::ofstream(dir / "report.csv") << t.csv;
    std::ofstream(dir / "report.md") << t.markdown;
    std::cout << t.markdown;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"avatarkit: personalised avatars from photo collections"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--seed", g.seed, "Master seed; every stage seed derives from it");
    app.add_option("--config", g.config, "RunConfig JSON or a run fingerprint")->check(CLI::ExistingFile);
    app.add_option("--preset", g.preset, "desk or full")->check(CLI::IsMember({"desk", "full"}));
    app.add_option("--out", g.out, "Output directory")->capture_default_str();

    std::string manifest, mesh_path, denoiser, truth, scan, mode = "color", baseline;
    std::vector<std::string> inputs;
    int photos = 24, size = 128, subjects = 0;

    auto* ingest_cmd = app.add_subcommand("ingest", "Validate a subject manifest");
    ingest_cmd->add_option("manifest", manifest)->required()->check(CLI::ExistingFile);

    auto* subject_cmd = app.add_subcommand("gen-subject", "Write a procedural test subject");
    subject_cmd->add_option("--photos", photos)->capture_default_str();
    subject_cmd->add_option("--size", size)->capture_default_str();

    auto* prior_cmd = app.add_subcommand("gen-prior", "Write the synthetic colour/normal prior");
    prior_cmd->add_option("--subjects", subjects, "Defaults to the preset's count");
    prior_cmd->add_option("--size", size, "Defaults to the preset's size");

    auto* booth_cmd = app.add_subcommand("booth-train", "Personalise the denoiser on a subject");
    booth_cmd->add_option("manifest", manifest)->required()->check(CLI::ExistingFile);

    auto* fit_cmd = app.add_subcommand("avatar-fit", "Distil an avatar from a personalised denoiser");
    fit_cmd->add_option("manifest", manifest)->required()->check(CLI::ExistingFile);
    fit_cmd->add_option("--denoiser", denoiser, "Checkpoint stem written by booth-train")->required();

    auto* render_cmd = app.add_subcommand("render", "Render a mesh from the four metric views");
    render_cmd->add_option("mesh", mesh_path)->required()->check(CLI::ExistingFile);
    render_cmd->add_option("--mode", mode)->check(CLI::IsMember({"color", "normal", "mask"}))->capture_default_str();
    render_cmd->add_option("--size", size)->capture_default_str();

    auto* eval_cmd = app.add_subcommand("eval", "Score a mesh against ground truth");
    eval_cmd->add_option("mesh", mesh_path)->required()->check(CLI::ExistingFile);
    auto* truth_opt = eval_cmd->add_option("--truth", truth, "Ground-truth mesh")->check(CLI::ExistingFile);
    eval_cmd->add_option("--manifest", manifest, "Use the manifest's ground truth")
        ->check(CLI::ExistingFile)
        ->excludes(truth_opt);
    eval_cmd->add_option("--scan", scan, "Scan point cloud (PLY/OBJ vertices) for P2S")->check(CLI::ExistingFile);

    auto* run_cmd = app.add_subcommand("run", "Full pipeline on one subject");
    run_cmd->add_option("manifest", manifest)->required()->check(CLI::ExistingFile);

    auto* report_cmd = app.add_subcommand("report", "Tabulate report.json files (label=path or path)");
    report_cmd->add_option("reports", inputs)->required();
    report_cmd->add_option("--baseline", baseline, "Label the deltas are relative to");

    auto* ablate_cmd = app.add_subcommand("ablate", "Baseline plus the six single-flag ablations");
    ablate_cmd->add_option("manifest", manifest)->required()->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        const fs::path out = g.out;
        if (*ingest_cmd) {
            const Subject s = ingest(manifest);
            RunConfig cfg = resolve_config(g);
            int full = 0;
            for (std::size_t i = 0; i < s.photos.size(); ++i) full += is_full_body(s.photos[i], s.manifest.photos[i]);
            const nlohmann::json summary = {{"subject_id", s.manifest.subject_id},
                                            {"photos", s.photos.size()},
                                            {"assets", s.manifest.assets.size()},
                                            {"full_body_photos", full},
                                            {"selected", select_photos(s, cfg).size()},
                                            {"ground_truth", s.manifest.gt_mesh.has_value()}};
            std::cout << summary.dump(1) << '\n';
        } else if (*subject_cmd) {
            std::cout << gen_synthetic_subject(out, g.seed.value_or(0), photos, size).string() << '\n';
        } else if (*prior_cmd) {
            const RunConfig cfg = resolve_config(g);
            const int n = subjects > 0 ? subjects : cfg.prior_subjects;
            const int px = prior_cmd->count("--size") ? size : cfg.prior_size;
            const auto entries = gen_synthetic_prior(n, cfg.seed + 3, px, out);
            std::cout << entries.size() << " images in " << out.string() << '\n';
        } else if (*booth_cmd) {
            const RunConfig cfg = resolve_config(g);
            const Subject s = ingest(manifest);
            const BoothStage booth = run_booth(s, cfg, select_photos(s, cfg));
            write_booth_artifacts(booth, cfg, out);
            std::cout << (out / "denoiser").string() << '\n';
        } else if (*fit_cmd) {
            const RunConfig cfg = resolve_config(g);
            const Subject s = ingest(manifest);
            const ToyDenoiser model = ToyDenoiser::load(denoiser);
            const AvatarStage avatar = run_avatar(s, cfg, select_photos(s, cfg), model);
            write_avatar_artifacts(avatar, cfg, out);
            std::cout << (out / "mesh.ply").string() << '\n';
        } else if (*render_cmd) {
            const SurfaceMesh mesh = read_mesh(mesh_path);
            const RenderMode m = mode == "color" ? RenderMode::color : mode == "normal" ? RenderMode::normal : RenderMode::mask;
            if (m == RenderMode::color && mesh.vertex_colors.rows() == 0)
                throw InvalidArgument(mesh_path + " has no vertex colours");
            RenderOptions opts;
            opts.width = opts.height = size;
            fs::create_directories(out);
            const char* names[] = {"0", "90", "180", "270"};
            const auto views = metric_views();
            for (std::size_t i = 0; i < views.size(); ++i) {
                const fs::path p = out / (mode + "_" + names[i] + ".png");
                write_png(render(mesh, views[i], m, opts), p);
                std::cout << p.string() << '\n';
            }
        } else if (*eval_cmd) {
            const RunConfig cfg = resolve_config(g);
            const SurfaceMesh pred = read_mesh(mesh_path);
            MetricReport rep;
            if (!manifest.empty()) {
                rep = evaluate_subject(pred, read_manifest(manifest), nullptr, cfg.metrics);
            } else {
                if (truth.empty()) throw InvalidArgument("eval needs --truth or --manifest");
                std::optional<PointCloud> cloud;
                if (!scan.empty()) cloud = PointCloud{read_mesh(scan).positions, {}};
                rep = evaluate(pred, read_mesh(truth), cloud, cfg.metrics);
            }
            fs::create_directories(out);
            write_report(rep, out / "report.json");
            print_report(rep);
        } else if (*run_cmd) {
            const RunConfig cfg = resolve_config(g);
            const RunResult r = run_pipeline(ingest(manifest), cfg, out);
            print_report(r.report);
        } else if (*report_cmd) {
            std::vector<LabeledReport> rows;
            for (const std::string& arg : inputs) {
                const auto eq = arg.find('=');
                const fs::path path = eq == std::string::npos ? fs::path(arg) : fs::path(arg.substr(eq + 1));
                std::string label = eq == std::string::npos ? path.parent_path().filename().string() : arg.substr(0, eq);
                if (label.empty()) label = path.stem().string();
                rows.push_back({label, read_report(path)});
            }
            write_tables(report(rows, baseline.empty() ? std::nullopt : std::optional<std::string>(baseline)), out);
        } else if (*ablate_cmd) {
            const RunConfig base = resolve_config(g);
            const Subject s = ingest(manifest);
            std::vector<LabeledReport> rows;
            auto run = [&](const std::string& label, const RunConfig& cfg, const std::string& dir) {
                std::cerr << "[ablate] " << label << '\n';
                rows.push_back({label, run_pipeline(s, cfg, out / dir).report});
            };
            run("ours", base, "ours");
            int k = 0;
            for (const auto& [label, cfg] : ablation_suite(base)) run(label, cfg, "ablation_" + std::to_string(++k));
            write_tables(report(rows, std::string("ours")), out);
        }
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
