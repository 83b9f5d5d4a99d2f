#include "avatarkit/distill.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

#include "avatarkit/errors.hpp"

namespace avk {

namespace fs = std::filesystem;

const char* const kNegativePrompt =
    "unrealistic, blurry, low quality, out of focus, ugly, low contrast, dull, dark, low-resolution, gloomy, "
    "shadow, worst quality, jpeg artifacts, poorly drawn, dehydrated, noisy, poorly drawn, bad proportions, "
    "bad anatomy, bad lighting, bad composition, bad framing, fused fingers, noisy, many people, duplicate "
    "characters";

void PromptSpec::validate() const {
    if (role == PromptRole::unconditional && !text.empty())
        throw InvalidArgument("unconditional prompt must not carry text");
}

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
    if (T < 1) throw InvalidArgument("NoiseSchedule: T must be positive");
    NoiseSchedule s;
    s.T = T;
    s.alpha_bar.resize(T + 1);
    s.alpha_bar[0] = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double beta = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
        s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - beta);
    }
    return s;
}

double NoiseSchedule::abar(int t) const {
    if (t < 1 || t > T) throw InvalidArgument("timestep " + std::to_string(t) + " outside [1, T]");
    return alpha_bar[t];
}

// ---------------------------------------------------------------------------

GaussianOracle::GaussianOracle(double sigma, NoiseSchedule sched) : sigma_(sigma), sched_(std::move(sched)) {
    if (!(sigma >= 0)) throw InvalidArgument("GaussianOracle: sigma must be non-negative");
}

GaussianOracle::MeanFn GaussianOracle::constant(Image mean) {
    return [mean = std::move(mean)](const CameraSample*, int w, int h, int c) {
        if (mean.width != w || mean.height != h || mean.channels != c) return resize_area(mean, w, h);
        return mean;
    };
}

GaussianOracle::MeanFn GaussianOracle::flat(const Vec3& value) {
    return [value](const CameraSample*, int w, int h, int c) {
        Image img(w, h, c);
        for (Eigen::Index p = 0; p < img.pixels(); ++p)
            for (int k = 0; k < c; ++k) img.data[p * c + k] = value[std::min(k, 2)];
        return img;
    };
}

void GaussianOracle::set_role_mean(PromptRole role, MeanFn fn) { by_role_[role] = std::move(fn); }

void GaussianOracle::set_text_mean(const std::string& text, MeanFn fn) { by_text_[text] = std::move(fn); }

Image GaussianOracle::mean_for(const PromptSpec& prompt, const CameraSample* view, int w, int h, int c) const {
    const MeanFn* fn = nullptr;
    if (auto it = by_text_.find(prompt.text); it != by_text_.end() && prompt.role != PromptRole::unconditional)
        fn = &it->second;
    if (!fn) {
        auto it = by_role_.find(prompt.role);
        if (it == by_role_.end() && prompt.role == PromptRole::negative) it = by_role_.find(PromptRole::unconditional);
        if (it == by_role_.end()) throw ContractViolation("GaussianOracle: no mean for prompt '" + prompt.text + "'");
        fn = &it->second;
    }
    Image m = (*fn)(view, w, h, c);
    if (m.width != w || m.height != h || m.channels != c)
        throw ContractViolation("GaussianOracle: mean image has the wrong shape");
    return m;
}

Image GaussianOracle::denoise(const Image& z_t, int t, const PromptSpec& prompt, const CameraSample* view) const {
    const double ab = sched_.abar(t);
    const Image mu = mean_for(prompt, view, z_t.width, z_t.height, z_t.channels);
    Image eps(z_t.width, z_t.height, z_t.channels);
    const double scale = std::sqrt(1.0 - ab) / (ab * sigma_ * sigma_ + 1.0 - ab);
    eps.data = scale * (z_t.data - std::sqrt(ab) * mu.data);
    return eps;
}

// ---------------------------------------------------------------------------

void DistillConfig::validate(int T) const {
    if (!(guidance >= 0)) throw InvalidArgument("DistillConfig: guidance must be non-negative");
    if (smooth_passes < 0) throw InvalidArgument("DistillConfig: negative smooth_passes");
    if (t_min < 1 || t_min > t_max || t_max > T) throw InvalidArgument("DistillConfig: need 1 <= t_min <= t_max <= T");
    if (iters_geometry < 0 || iters_color < 0) throw InvalidArgument("DistillConfig: negative iteration count");
    if (batch < 1) throw InvalidArgument("DistillConfig: batch must be >= 1");
    if (render_size < 8) throw InvalidArgument("DistillConfig: render size too small");
    cameras.validate();
}

double weight_at(const DistillConfig& cfg, const NoiseSchedule& s, int t) {
    return cfg.weight == WeightMode::constant ? 1.0 : 1.0 - s.abar(t);
}

Image add_noise(const Image& z, const Image& noise, const NoiseSchedule& s, int t) {
    if (!z.same_shape(noise)) throw InvalidArgument("add_noise: shape mismatch");
    const double ab = s.abar(t);
    Image out(z.width, z.height, z.channels);
    out.data = std::sqrt(ab) * z.data + std::sqrt(1.0 - ab) * noise.data;
    return out;
}

Image gaussian_noise(const Image& like, Rng& rng) {
    Image n(like.width, like.height, like.channels);
    std::normal_distribution<double> g(0.0, 1.0);
    for (Eigen::Index i = 0; i < n.data.size(); ++i) n.data[i] = g(rng);
    return n;
}

int sample_timestep(Rng& rng, const DistillConfig& cfg) {
    return std::uniform_int_distribution<int>(cfg.t_min, cfg.t_max)(rng);
}

namespace {

Image call_oracle(const ScoreOracle& oracle, const Image& z_t, int t, const PromptSpec& p, const CameraSample* view) {
    p.validate();
    Image eps = oracle.denoise(z_t, t, p, view);
    if (!eps.same_shape(z_t)) throw ContractViolation("score oracle returned an image of the wrong shape");
    return eps;
}

void check_input(const Image& z, int t, const NoiseSchedule& s) {
    if (t < 1 || t > s.T) throw InvalidArgument("timestep " + std::to_string(t) + " outside [1, T]");
    if (!z.data.allFinite()) throw NumericError("distillation input contains non-finite values");
}

}  // namespace

Image nfsd_grad(const ScoreOracle& oracle, const Image& z, const PromptSpec& prompt,
                const std::optional<PromptSpec>& negative, int t, const DistillConfig& cfg, const Image& noise,
                const CameraSample* view) {
    const NoiseSchedule& s = oracle.schedule();
    check_input(z, t, s);
    const Image z_t = add_noise(z, noise, s, t);
    const Image e_p = call_oracle(oracle, z_t, t, prompt, view);
    const Image e_u = call_oracle(oracle, z_t, t, PromptSpec::unconditional(), view);
    VectorXd delta_d;
    if (t <= cfg.t_threshold)
        delta_d = e_u.data;
    else if (negative)
        delta_d = e_u.data - call_oracle(oracle, z_t, t, *negative, view).data;
    else
        delta_d = VectorXd::Zero(z.data.size());
    Image g(z.width, z.height, z.channels);
    g.data = weight_at(cfg, s, t) * (delta_d + cfg.guidance * (e_p.data - e_u.data));
    return g;
}

Image nfsd_grad(const ScoreOracle& oracle, const Image& z, const PromptSpec& prompt,
                const std::optional<PromptSpec>& negative, int t, const DistillConfig& cfg, Rng& rng,
                const CameraSample* view) {
    return nfsd_grad(oracle, z, prompt, negative, t, cfg, gaussian_noise(z, rng), view);
}

Image sds_grad(const ScoreOracle& oracle, const Image& z, const PromptSpec& prompt, int t, const DistillConfig& cfg,
               const Image& noise, const CameraSample* view) {
    const NoiseSchedule& s = oracle.schedule();
    check_input(z, t, s);
    const Image z_t = add_noise(z, noise, s, t);
    const Image e_p = call_oracle(oracle, z_t, t, prompt, view);
    const Image e_u = call_oracle(oracle, z_t, t, PromptSpec::unconditional(), view);
    Image g(z.width, z.height, z.channels);
    g.data = weight_at(cfg, s, t) * (e_u.data + cfg.guidance * (e_p.data - e_u.data) - noise.data);
    return g;
}

Image sds_grad(const ScoreOracle& oracle, const Image& z, const PromptSpec& prompt, int t, const DistillConfig& cfg,
               Rng& rng, const CameraSample* view) {
    return sds_grad(oracle, z, prompt, t, cfg, gaussian_noise(z, rng), view);
}

// ---------------------------------------------------------------------------

namespace {

/// Per-array Adam state; plain gradient descent when disabled.
struct Stepper {
    Optimizer kind;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int step = 0;
    std::vector<MatrixXd> m, v;

    explicit Stepper(Optimizer k) : kind(k) {}

    template <typename Derived>
    void apply(int slot, Eigen::MatrixBase<Derived>& param, const MatrixXd& grad, double lr) {
        if (kind == Optimizer::gd) {
            param -= lr * grad;
            return;
        }
        if (m.size() <= std::size_t(slot)) {
            m.resize(std::size_t(slot) + 1);
            v.resize(std::size_t(slot) + 1);
        }
        auto& ms = m[std::size_t(slot)];
        auto& vs = v[std::size_t(slot)];
        if (ms.size() == 0) {
            ms = MatrixXd::Zero(grad.rows(), grad.cols());
            vs = MatrixXd::Zero(grad.rows(), grad.cols());
        }
        ms = beta1 * ms + (1 - beta1) * grad;
        vs = beta2 * vs + (1 - beta2) * grad.cwiseProduct(grad);
        const double c1 = 1 - std::pow(beta1, step), c2 = 1 - std::pow(beta2, step);
        param -= (lr * (ms / c1).array() / ((vs / c2).array().sqrt() + eps)).matrix();
    }
};

}  // namespace

std::string FitPrompts::with_view(const std::string& base, ViewTag tag) const {
    if (!view_prompt) return base;
    return base + ", " + std::string(to_string(tag)) + " view";
}

namespace {

// g <- (g + sum of the six lattice neighbours) / (1 + #neighbours), repeated.
template <typename M>
void smooth_on_lattice(M& g, int res, int passes) {
    const int n = res + 1;
    M tmp = g;
    for (int p = 0; p < passes; ++p) {
        for (int k = 0; k < n; ++k)
            for (int j = 0; j < n; ++j)
                for (int i = 0; i < n; ++i) {
                    const Eigen::Index v = i + n * (j + n * Eigen::Index(k));
                    auto acc = g.row(v).eval();
                    int cnt = 1;
                    if (i > 0) acc += g.row(v - 1), ++cnt;
                    if (i < n - 1) acc += g.row(v + 1), ++cnt;
                    if (j > 0) acc += g.row(v - n), ++cnt;
                    if (j < n - 1) acc += g.row(v + n), ++cnt;
                    if (k > 0) acc += g.row(v - Eigen::Index(n) * n), ++cnt;
                    if (k < n - 1) acc += g.row(v + Eigen::Index(n) * n), ++cnt;
                    tmp.row(v) = acc / cnt;
                }
        g.swap(tmp);
    }
}

}  // namespace

FitResult fit_avatar(const AvatarParams& init, const ScoreOracle& oracle, const FitPrompts& prompts,
                     const DistillConfig& cfg, const FitCallback& callback) {
    const NoiseSchedule& sched = oracle.schedule();
    cfg.validate(sched.T);
    FitResult result{init, {}, 0};
    AvatarParams& p = result.params;
    Rng rng(cfg.seed);
    RenderOptions opts;
    opts.width = opts.height = cfg.render_size;
    const std::optional<PromptSpec> negative =
        prompts.negative ? std::optional<PromptSpec>(PromptSpec::negative(*prompts.negative)) : std::nullopt;

    for (int stage = 1; stage <= 2; ++stage) {
        const int iters = stage == 1 ? cfg.iters_geometry : cfg.iters_color;
        const RenderMode mode = stage == 1 ? RenderMode::normal : RenderMode::color;
        const std::string& base = stage == 1 ? prompts.geometry : prompts.color;
        double lr = stage == 1 ? cfg.lr_geometry : cfg.lr_color;
        Stepper stepper(cfg.optimizer);
        bool halved = false;
        VectorXd valid_sdf = p.sdf;
        Points valid_deform = p.deform;
        SurfaceMesh mesh;
        auto extract = [&]() {
            try {
                mesh = extract_mesh(p);
            } catch (const DegenerateGeometry&) {
                mesh = SurfaceMesh();
            }
        };
        if (iters > 0) extract();

        for (int it = 0; it < iters; ++it) {
            if (it > 0) extract();
            if (mesh.empty()) {
                if (halved || stage == 2)
                    throw NumericError("fit_avatar: empty mesh at stage " + std::to_string(stage) + " iteration " +
                                       std::to_string(it));
                p.sdf = valid_sdf;
                p.deform = valid_deform;
                lr *= 0.5;
                halved = true;
                ++result.recoveries;
                extract();
                if (mesh.empty())
                    throw NumericError("fit_avatar: empty mesh at stage 1 iteration " + std::to_string(it));
            }
            valid_sdf = p.sdf;
            valid_deform = p.deform;

            VectorXd g_sdf = VectorXd::Zero(p.sdf.size());
            Points g_deform = Points::Zero(p.deform.rows(), 3);
            Points g_color = Points::Zero(p.color.rows(), 3);
            TraceRow row{stage, it, 0, 0.0, 0.0};
            for (int b = 0; b < cfg.batch; ++b) {
                const CameraSample cam = sample_camera(rng, cfg.cameras);
                DistillConfig step_cfg = cfg;
                if (cfg.anneal_t && iters > 1)
                    step_cfg.t_max = cfg.t_min + static_cast<int>(std::lround((cfg.t_max - cfg.t_min) *
                                                                             (1.0 - double(it) / (iters - 1))));
                const int t = sample_timestep(rng, step_cfg);
                const Image fwd = render(mesh, cam, mode, opts);
                const Image z = cfg.antialias ? antialias(mesh, cam, fwd, opts) : fwd;
                const Image noise = gaussian_noise(z, rng);
                const PromptSpec prompt = PromptSpec::positive(prompts.with_view(base, cam.view_tag));
                const Image grad = cfg.use_nfsd ? nfsd_grad(oracle, z, prompt, negative, t, cfg, noise, &cam)
                                                : sds_grad(oracle, z, prompt, t, cfg, noise, &cam);

                // Surrogate: distance to the one-step denoised estimate.
                const double ab = sched.abar(t);
                const Image z_t = add_noise(z, noise, sched, t);
                const Image e_p = oracle.denoise(z_t, t, prompt, &cam);
                const VectorXd x0 = (z_t.data - std::sqrt(1.0 - ab) * e_p.data) / std::sqrt(ab);
                row.t = t;
                row.grad_norm += grad.data.norm() / cfg.batch;
                row.surrogate += (z.data - x0).cwiseAbs().mean() / cfg.batch;

                Image g_fwd = grad;
                Points d_pos;
                if (cfg.antialias) {
                    AntialiasGrad ag = antialias_vjp(mesh, cam, fwd, grad, opts);
                    g_fwd = std::move(ag.image);
                    d_pos = std::move(ag.positions);
                }
                const RenderGrad rg = render_vjp(mesh, cam, mode, fwd, g_fwd, opts);
                if (stage == 1) {
                    if (d_pos.rows() == 0) d_pos = Points::Zero(mesh.num_vertices(), 3);
                    const ParamGrad pg = extract_mesh_vjp(p, mesh, rg.positions + d_pos);
                    g_sdf += pg.sdf;
                    g_deform += pg.deform;
                } else {
                    const ParamGrad pg = extract_mesh_vjp(p, mesh, Points::Zero(mesh.num_vertices(), 3), rg.colors);
                    g_color += pg.color;
                }
            }
            const double inv = 1.0 / cfg.batch;
            if (!std::isfinite(row.surrogate) || !std::isfinite(row.grad_norm) || !g_sdf.allFinite() ||
                !g_deform.allFinite() || !g_color.allFinite())
                throw NumericError("fit_avatar: divergence at stage " + std::to_string(stage) + " iteration " +
                                   std::to_string(it));
            ++stepper.step;
            if (stage == 1 && cfg.smooth_passes > 0) {
                smooth_on_lattice(g_sdf, p.grid->resolution, cfg.smooth_passes);
                smooth_on_lattice(g_deform, p.grid->resolution, cfg.smooth_passes);
            }
            if (stage == 1) {
                stepper.apply(0, p.sdf, inv * g_sdf, lr);
                stepper.apply(1, p.deform, inv * MatrixXd(g_deform), lr);
                p.clamp_deform();
            } else {
                stepper.apply(2, p.color, inv * MatrixXd(g_color), lr);
                p.color = p.color.cwiseMax(0.0).cwiseMin(1.0);
            }
            result.trace.push_back(row);
            if (callback) callback(row, p);
        }
    }
    return result;
}

void write_trace_csv(const std::vector<TraceRow>& trace, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "stage,iteration,t,grad_norm,surrogate\n" << std::setprecision(17);
    for (const auto& r : trace)
        out << r.stage << ',' << r.iteration << ',' << r.t << ',' << r.grad_norm << ',' << r.surrogate << '\n';
}

void save_params(const AvatarParams& params, const fs::path& stem) {
    if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
    const auto n = params.sdf.size();
    nlohmann::json h = {{"format", "avatarkit-params"},
                        {"dtype", "float64"},
                        {"byte_order", "little"},
                        {"grid_resolution", params.grid->resolution},
                        {"num_vertices", n},
                        {"arrays",
                         {{{"name", "sdf"}, {"shape", {n}}},
                          {{"name", "deform"}, {"shape", {n, 3}}},
                          {{"name", "color"}, {"shape", {n, 3}}}}}};
    std::ofstream js(fs::path(stem).concat(".json"));
    js << h.dump(2) << '\n';
    std::ofstream bin(fs::path(stem).concat(".bin"), std::ios::binary);
    bin.write(reinterpret_cast<const char*>(params.sdf.data()), std::streamsize(n * sizeof(double)));
    bin.write(reinterpret_cast<const char*>(params.deform.data()), std::streamsize(n * 3 * sizeof(double)));
    bin.write(reinterpret_cast<const char*>(params.color.data()), std::streamsize(n * 3 * sizeof(double)));
    if (!js || !bin) throw IoError("failed writing checkpoint " + stem.string());
}

AvatarParams load_params(const fs::path& stem) {
    std::ifstream js(fs::path(stem).concat(".json"));
    if (!js) throw IoError("cannot open checkpoint header " + stem.string() + ".json");
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(js);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(stem.string() + ".json: " + e.what());
    }
    if (h.value("format", "") != "avatarkit-params") throw IoError(stem.string() + ": not a params checkpoint");
    auto grid = std::make_shared<const TetGrid>(build_grid(h.at("grid_resolution").get<int>()));
    const Eigen::Index n = h.at("num_vertices").get<Eigen::Index>();
    if (n != grid->num_vertices()) throw IoError(stem.string() + ": vertex count does not match grid");
    AvatarParams p = init_params(grid, [](const Vec3&) { return 1.0; });
    std::ifstream bin(fs::path(stem).concat(".bin"), std::ios::binary);
    bin.read(reinterpret_cast<char*>(p.sdf.data()), std::streamsize(n * sizeof(double)));
    bin.read(reinterpret_cast<char*>(p.deform.data()), std::streamsize(n * 3 * sizeof(double)));
    bin.read(reinterpret_cast<char*>(p.color.data()), std::streamsize(n * 3 * sizeof(double)));
    if (!bin) throw IoError(stem.string() + ".bin: truncated");
    return p;
}

void to_json(nlohmann::json& j, const DistillConfig& c) {
    j = {{"guidance", c.guidance},
         {"t_threshold", c.t_threshold},
         {"t_min", c.t_min},
         {"t_max", c.t_max},
         {"weight", c.weight == WeightMode::constant ? "constant" : "one_minus_alpha_bar"},
         {"iters_geometry", c.iters_geometry},
         {"iters_color", c.iters_color},
         {"lr_geometry", c.lr_geometry},
         {"lr_color", c.lr_color},
         {"optimizer", c.optimizer == Optimizer::gd ? "gd" : "adam"},
         {"seed", c.seed},
         {"batch", c.batch},
         {"render_size", c.render_size},
         {"use_nfsd", c.use_nfsd},
         {"antialias", c.antialias},
         {"anneal_t", c.anneal_t},
         {"smooth_passes", c.smooth_passes},
         {"cameras", c.cameras}};
}

void from_json(const nlohmann::json& j, DistillConfig& c) {
    auto get = [&](const char* k, auto& v) {
        if (j.contains(k)) j.at(k).get_to(v);
    };
    get("guidance", c.guidance);
    get("t_threshold", c.t_threshold);
    get("t_min", c.t_min);
    get("t_max", c.t_max);
    if (j.contains("weight")) {
        const auto w = j.at("weight").get<std::string>();
        if (w == "constant")
            c.weight = WeightMode::constant;
        else if (w == "one_minus_alpha_bar")
            c.weight = WeightMode::one_minus_alpha_bar;
        else
            throw InvalidArgument("unknown weight mode '" + w + "'");
    }
    get("iters_geometry", c.iters_geometry);
    get("iters_color", c.iters_color);
    get("lr_geometry", c.lr_geometry);
    get("lr_color", c.lr_color);
    if (j.contains("optimizer")) {
        const auto o = j.at("optimizer").get<std::string>();
        if (o != "gd" && o != "adam") throw InvalidArgument("unknown optimizer '" + o + "'");
        c.optimizer = o == "gd" ? Optimizer::gd : Optimizer::adam;
    }
    get("seed", c.seed);
    get("batch", c.batch);
    get("render_size", c.render_size);
    get("use_nfsd", c.use_nfsd);
    get("antialias", c.antialias);
    get("anneal_t", c.anneal_t);
    get("smooth_passes", c.smooth_passes);
    if (j.contains("cameras")) c.cameras = j.at("cameras").get<CamConfig>();
}

}  // namespace avk
