#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "avatarkit/booth.hpp"
#include "avatarkit/distill.hpp"
#include "avatarkit/metrics.hpp"

namespace avk {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Manifests

struct PhotoRecord {
    std::string image;               ///< path relative to the manifest
    std::map<int, std::string> masks;  ///< token id -> mask path
    ViewTag view = ViewTag::front;
    std::vector<int> visible;
    /// Top and bottom pixel rows of the whole body in this photo, when known.
    std::optional<std::array<double, 2>> body_rows;
};

struct AssetRecord {
    Asset asset;
    /// Body parts the asset covers ("head", "torso", "arms", "legs"); derived
    /// from the class name when the manifest omits it.
    std::vector<std::string> regions;
};

struct SubjectManifest {
    std::string subject_id;
    Gender gender = Gender::man;
    std::vector<PhotoRecord> photos;
    std::vector<AssetRecord> assets;
    BodyShape body;  ///< fitted body proxy used for initialisation
    std::optional<std::string> gt_mesh;
    std::optional<std::string> scan;
    fs::path root;   ///< directory relative paths resolve against

    std::vector<Asset> asset_list() const;
};

struct Subject {
    SubjectManifest manifest;
    std::vector<TrainImage> photos;
};

/// Default regions for a class name ("shirt" -> torso, arms; "pants" -> legs).
std::vector<std::string> default_regions(const std::string& class_name);

SubjectManifest read_manifest(const fs::path& path);
void write_manifest(const SubjectManifest& m, const fs::path& path);
/// Reads the manifest, decodes every image and mask and validates them.
/// Errors name the offending photo record.
Subject ingest(const fs::path& path);

/// Procedural test subject: capsule body with a "face", "shirt" and "pants"
/// asset, photos from sampled cameras, per-asset masks and a ground-truth
/// mesh. Writes everything under `dir` and returns the manifest path.
fs::path gen_synthetic_subject(const fs::path& dir, std::uint64_t seed, int photos = 24, int size = 128);

// ---------------------------------------------------------------------------
// Synthetic prior

enum class PriorMode { color, normal };

struct PriorEntry {
    Image image;
    std::string prompt;
    PriorMode mode;
    CameraGroup group;
    int subject;
    std::string path;  ///< relative path when written to disk
};

/// 8 body + 8 head views per subject in colour and normal space.
std::vector<PriorEntry> gen_synthetic_prior(int n_subjects, std::uint64_t seed, int size,
                                            const std::optional<fs::path>& out_dir = std::nullopt);

// ---------------------------------------------------------------------------
// Runs

enum class Preset { desk, full };

std::string_view to_string(Preset p);
Preset parse_preset(std::string_view s);

struct AblationFlags {
    bool view_prompt = true;
    bool nfsd = true;
    bool synthetic_normal = true;
    bool synthetic_color = true;
    double data_fraction = 1.0;
    bool full_body_images = true;

    bool operator==(const AblationFlags&) const = default;
};

struct RunConfig {
    std::uint64_t seed = 0;
    Preset preset = Preset::desk;
    AblationFlags ablation;
    BoothSchedule booth;
    DenoiserConfig denoiser;
    DistillConfig distill;
    MetricConfig metrics;
    int grid_resolution = 48;
    int prior_subjects = 2;
    int prior_size = 64;

    /// Preset constants with every stage seed derived from `seed`.
    static RunConfig make(Preset preset, std::uint64_t seed = 0);
    /// Sets `seed` and re-derives every stage seed from it.
    void set_seed(std::uint64_t s);
    void validate() const;
};

void to_json(nlohmann::json& j, const AblationFlags& f);
void from_json(const nlohmann::json& j, AblationFlags& f);
void to_json(nlohmann::json& j, const RunConfig& c);
/// Missing keys keep the values of the preset named in the file.
void from_json(const nlohmann::json& j, RunConfig& c);
void to_json(nlohmann::json& j, const BodyShape& b);
void from_json(const nlohmann::json& j, BodyShape& b);

/// Full config plus a stable hash of it.
nlohmann::json fingerprint(const RunConfig& cfg);

/// Whether the union of the photo's masks spans >= 90% of the body height.
bool is_full_body(const TrainImage& photo, const PhotoRecord& record);

/// Photos that survive the data_fraction and full_body_images flags, in
/// manifest order.
std::vector<std::size_t> select_photos(const Subject& subject, const RunConfig& cfg);

struct RunResult {
    ToyDenoiser denoiser;
    BoothResult booth;
    FitResult fit;
    SurfaceMesh mesh;
    MetricReport report;
};

struct BoothStage {
    ToyDenoiser model;
    BoothResult result;
};

/// Synthetic-prior images the run's flags keep.
std::vector<PriorImage> prior_for(const RunConfig& cfg);

/// Personalisation on the selected photos plus the flag-filtered prior.
BoothStage run_booth(const Subject& subject, const RunConfig& cfg, const std::vector<std::size_t>& photos);

/// Geometry and colour prompts the distillation stage uses.
FitPrompts fit_prompts(const SubjectManifest& m, const RunConfig& cfg);

/// Ground-truth comparison when the manifest has one, else a 2D comparison
/// against renders of `reference`.
MetricReport evaluate_subject(const SurfaceMesh& mesh, const SubjectManifest& m, const SurfaceMesh* reference,
                              const MetricConfig& cfg);

void write_booth_artifacts(const BoothStage& booth, const RunConfig& cfg, const fs::path& dir);
void write_report(const MetricReport& report, const fs::path& path);
MetricReport read_report(const fs::path& path);

/// Booth personalisation, two-stage distillation, mesh extraction, metrics.
/// Artifacts go to `out_dir` when given.
RunResult run_pipeline(const Subject& subject, const RunConfig& cfg,
                       const std::optional<fs::path>& out_dir = std::nullopt);

/// Personalised prior the distillation queries: per-view renders of the
/// body template (normal space) and of the template coloured with the
/// booth-estimated asset colours (colour space).
struct PersonalPrior {
    BodyShape template_body;
    std::map<int, Vec3> asset_colors;
    Vec3 skin = Vec3(0.5, 0.5, 0.5);
    SurfaceMesh mesh;  ///< coloured template
};

PersonalPrior build_personal_prior(const Subject& subject, const std::vector<std::size_t>& photos,
                                   const ToyDenoiser& model, const RunConfig& cfg, bool had_normal_prior);

struct AvatarStage {
    PersonalPrior prior;
    FitResult fit;
    SurfaceMesh mesh;
};

/// Personal prior, oracle, two-stage fit and mesh extraction.
AvatarStage run_avatar(const Subject& subject, const RunConfig& cfg, const std::vector<std::size_t>& photos,
                       const ToyDenoiser& model);
void write_avatar_artifacts(const AvatarStage& avatar, const RunConfig& cfg, const fs::path& dir);

/// Factor relating (mu_p - mu_0) to the expected fixed point (z* - mu_0) of
/// the configured estimator under a sigma = 0 Gaussian oracle: s for SDS,
/// s * sum_t w a_t / sum_{t <= threshold} w a_t for NFSD, a_t = sqrt(ab / (1 - ab)).
double guided_gain(const DistillConfig& dc, const NoiseSchedule& sched);

/// Oracle whose estimator fixed point at each camera is the template render;
/// with view prompts off every camera sees the front-view render.
GaussianOracle make_oracle(const PersonalPrior& prior, const FitPrompts& prompts, const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Reports

struct LabeledReport {
    std::string label;
    MetricReport report;
};

struct ReportTables {
    std::string csv;
    std::string markdown;
    /// label -> metric -> signed percentage relative to the baseline
    std::map<std::string, std::map<std::string, std::optional<double>>> deltas;
};

/// Means per label (first-seen order); with a baseline label every other
/// label gets delta = (value - baseline) / baseline * 100. For lower-is-better
/// metrics a positive delta is a drop, for higher-is-better ones a negative
/// delta is.
ReportTables report(const std::vector<LabeledReport>& reports, const std::optional<std::string>& baseline = std::nullopt);

/// The six single-flag ablations: label and config.
std::vector<std::pair<std::string, RunConfig>> ablation_suite(const RunConfig& base);

}  // namespace avk
