#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "avatarkit/camrig.hpp"
#include "avatarkit/geometry.hpp"
#include "avatarkit/raster.hpp"

namespace avk {

enum class PromptRole { positive, negative, unconditional };

struct PromptSpec {
    std::string text;
    PromptRole role = PromptRole::unconditional;

    static PromptSpec positive(std::string t) { return {std::move(t), PromptRole::positive}; }
    static PromptSpec negative(std::string t) { return {std::move(t), PromptRole::negative}; }
    static PromptSpec unconditional() { return {}; }
    /// Throws InvalidArgument if an unconditional prompt carries text.
    void validate() const;
};

/// Negative prompt used for distillation.
extern const char* const kNegativePrompt;

/// DDPM cumulative schedule, t in 1..T.
struct NoiseSchedule {
    int T = 1000;
    VectorXd alpha_bar;  ///< index t (entry 0 unused, = 1)

    static NoiseSchedule linear(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02);
    double abar(int t) const;
};

/// Noise predictor epsilon(z_t; prompt, t). `view` is the camera the image
/// was rendered from, or null when unknown.
class ScoreOracle {
public:
    virtual ~ScoreOracle() = default;
    virtual Image denoise(const Image& z_t, int t, const PromptSpec& prompt, const CameraSample* view) const = 0;
    virtual const NoiseSchedule& schedule() const = 0;
};

/// Exact posterior-mean noise predictor for x ~ N(mu_p, sigma^2 I):
///   eps = sqrt(1 - ab) (z_t - sqrt(ab) mu_p) / (ab sigma^2 + 1 - ab),
/// which for sigma = 0 is (z_t - sqrt(ab) mu_p) / sqrt(1 - ab).
class GaussianOracle : public ScoreOracle {
public:
    /// Produces the mean image for a camera at the requested size.
    using MeanFn = std::function<Image(const CameraSample* view, int width, int height, int channels)>;

    explicit GaussianOracle(double sigma = 0.0, NoiseSchedule sched = NoiseSchedule::linear());

    static MeanFn constant(Image mean);
    static MeanFn flat(const Vec3& value);

    /// Mean for every prompt of a role. A missing negative mean falls back to
    /// the unconditional one; a missing positive mean is a contract violation.
    void set_role_mean(PromptRole role, MeanFn fn);
    /// Overrides the role mean for one exact prompt text.
    void set_text_mean(const std::string& text, MeanFn fn);

    Image mean_for(const PromptSpec& prompt, const CameraSample* view, int w, int h, int c) const;
    Image denoise(const Image& z_t, int t, const PromptSpec& prompt, const CameraSample* view) const override;
    const NoiseSchedule& schedule() const override { return sched_; }
    double sigma() const { return sigma_; }

private:
    double sigma_;
    NoiseSchedule sched_;
    std::map<PromptRole, MeanFn> by_role_;
    std::map<std::string, MeanFn> by_text_;
};

enum class WeightMode { constant, one_minus_alpha_bar };
enum class Optimizer { gd, adam };

struct DistillConfig {
    double guidance = 7.5;
    int t_threshold = 200;
    int t_min = 20;
    int t_max = 980;
    WeightMode weight = WeightMode::constant;
    int iters_geometry = 10000;
    int iters_color = 10000;
    double lr_geometry = 2e-3;
    double lr_color = 1e-2;
    Optimizer optimizer = Optimizer::adam;
    std::uint64_t seed = 0;
    int batch = 1;
    int render_size = 256;
    bool use_nfsd = true;
    /// Silhouette antialiasing of renders inside the fit (see raster::antialias).
    bool antialias = true;
    /// Linearly shrink t_max toward t_min over each stage.
    bool anneal_t = false;
    /// Jacobi diffusion passes applied to stage-1 gradients over the grid
    /// lattice before the step (0 = raw gradient).
    int smooth_passes = 16;
    CamConfig cameras;

    void validate(int T) const;
};

double weight_at(const DistillConfig& cfg, const NoiseSchedule& s, int t);

/// z_t = sqrt(ab) z + sqrt(1 - ab) noise.
Image add_noise(const Image& z, const Image& noise, const NoiseSchedule& s, int t);
Image gaussian_noise(const Image& like, Rng& rng);

int sample_timestep(Rng& rng, const DistillConfig& cfg);

/// w(t) (delta_D + s delta_C) with
///   delta_C = eps(z_t; p) - eps(z_t; 0),
///   delta_D = eps(z_t; 0) if t <= t_threshold else eps(z_t; 0) - eps(z_t; p_neg).
/// An absent negative prompt makes delta_D zero above the threshold.
Image nfsd_grad(const ScoreOracle& oracle, const Image& z, const PromptSpec& prompt,
                const std::optional<PromptSpec>& negative, int t, const DistillConfig& cfg, const Image& noise,
                const CameraSample* view = nullptr);
Image nfsd_grad(const ScoreOracle& oracle, const Image& z, const PromptSpec& prompt,
                const std::optional<PromptSpec>& negative, int t, const DistillConfig& cfg, Rng& rng,
                const CameraSample* view = nullptr);

/// Classifier-free guided SDS: w(t) (eps(0) + s (eps(p) - eps(0)) - noise).
Image sds_grad(const ScoreOracle& oracle, const Image& z, const PromptSpec& prompt, int t, const DistillConfig& cfg,
               const Image& noise, const CameraSample* view = nullptr);
Image sds_grad(const ScoreOracle& oracle, const Image& z, const PromptSpec& prompt, int t, const DistillConfig& cfg,
               Rng& rng, const CameraSample* view = nullptr);

struct FitPrompts {
    std::string geometry;  ///< without view suffix
    std::string color;
    std::optional<std::string> negative;
    bool view_prompt = true;

    /// "<base>, <tag> view" when view prompts are on.
    std::string with_view(const std::string& base, ViewTag tag) const;
};

struct TraceRow {
    int stage;
    int iteration;
    int t;
    double grad_norm;
    double surrogate;  ///< mean |render - x0_hat| under the positive prompt
};

struct FitResult {
    AvatarParams params;
    std::vector<TraceRow> trace;
    int recoveries = 0;
};

using FitCallback = std::function<void(const TraceRow&, const AvatarParams&)>;

/// Stage 1 distils normal renders into (sdf, deform); stage 2 distils colour
/// renders into the colour field with geometry frozen.
FitResult fit_avatar(const AvatarParams& init, const ScoreOracle& oracle, const FitPrompts& prompts,
                     const DistillConfig& cfg, const FitCallback& callback = {});

void write_trace_csv(const std::vector<TraceRow>& trace, const std::filesystem::path& path);

/// JSON header (<stem>.json) plus raw little-endian float64 arrays (<stem>.bin).
void save_params(const AvatarParams& params, const std::filesystem::path& stem);
AvatarParams load_params(const std::filesystem::path& stem);

void to_json(nlohmann::json& j, const DistillConfig& c);
void from_json(const nlohmann::json& j, DistillConfig& c);

}  // namespace avk
