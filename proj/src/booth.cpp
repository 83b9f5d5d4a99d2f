#include "avatarkit/booth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>

#include "avatarkit/errors.hpp"

namespace avk {

namespace fs = std::filesystem;

std::string_view to_string(AssetKind k) {
    switch (k) {
        case AssetKind::face: return "face";
        case AssetKind::hair: return "hair";
        case AssetKind::garment: return "garment";
        case AssetKind::accessory: return "accessory";
    }
    return "garment";
}

std::string_view to_string(Gender g) { return g == Gender::man ? "man" : "woman"; }

AssetKind parse_asset_kind(std::string_view s) {
    for (AssetKind k : {AssetKind::face, AssetKind::hair, AssetKind::garment, AssetKind::accessory})
        if (s == to_string(k)) return k;
    throw InvalidArgument("unknown asset kind '" + std::string(s) + "'");
}

Gender parse_gender(std::string_view s) {
    if (s == "man") return Gender::man;
    if (s == "woman") return Gender::woman;
    throw InvalidArgument("unknown gender '" + std::string(s) + "'");
}

std::string Asset::token() const { return "<asset" + std::to_string(token_id) + ">"; }

void validate_assets(const std::vector<Asset>& assets) {
    std::vector<int> ids;
    for (const auto& a : assets) {
        if (a.class_name.empty()) throw InvalidArgument("asset " + std::to_string(a.token_id) + " has no class name");
        if (a.token_id < 0) throw InvalidArgument("negative asset token id");
        ids.push_back(a.token_id);
    }
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw InvalidArgument("duplicate asset token id");
}

std::vector<int> TrainImage::visible() const {
    std::vector<int> out;
    for (const auto& [id, m] : masks)
        if (m.data.maxCoeff() > 0) out.push_back(id);
    return out;
}

std::string build_prompt(const std::vector<Asset>& selected, Gender gender, std::optional<ViewTag> view,
                         PromptStyle style, bool with_tokens) {
    std::vector<Asset> sorted = selected;
    std::sort(sorted.begin(), sorted.end(), [](const Asset& a, const Asset& b) { return a.token_id < b.token_id; });
    std::string head;
    switch (style) {
        case PromptStyle::color: head = "a high-resolution DSLR color image of a "; break;
        case PromptStyle::sculpture: head = "a detailed sculpture of a "; break;
        case PromptStyle::headshot: head = "the headshot of a "; break;
    }
    std::vector<std::string> clauses;
    auto noun = [&](const Asset& a) { return with_tokens ? a.token() + " " + a.class_name : a.class_name; };
    for (const auto& a : sorted)
        if (a.kind == AssetKind::face || a.kind == AssetKind::hair) clauses.push_back("with " + noun(a));
    for (const auto& a : sorted)
        if (a.kind == AssetKind::garment || a.kind == AssetKind::accessory) clauses.push_back("wearing " + noun(a));
    if (view) clauses.push_back(std::string(to_string(*view)) + " view");
    std::string out = head + std::string(to_string(gender));
    for (std::size_t i = 0; i < clauses.size(); ++i) out += (i == 0 ? " " : ", ") + clauses[i];
    return out;
}

std::optional<UnionBatch> build_union_batch(const TrainImage& sample, const std::vector<Asset>& assets, Rng& rng,
                                            PromptStyle style, bool view_prompt) {
    std::vector<const Asset*> vis;
    for (int id : sample.visible())
        for (const auto& a : assets)
            if (a.token_id == id) vis.push_back(&a);
    if (vis.empty()) return std::nullopt;
    const int k = static_cast<int>(vis.size());
    if (k > 20) throw InvalidArgument("build_union_batch: too many visible assets");
    // Non-empty strict subsets are the bitmasks 1 .. 2^k - 2.
    const std::uint64_t subsets = k == 1 ? 1 : (std::uint64_t(1) << k) - 2;
    const std::uint64_t pick = k == 1 ? 1 : 1 + std::uniform_int_distribution<std::uint64_t>(0, subsets - 1)(rng);

    UnionBatch b;
    const Image& img = sample.image;
    b.union_mask = Image(img.width, img.height, 1);
    for (int i = 0; i < k; ++i) {
        if (!(pick >> i & 1)) continue;
        b.selected.push_back(*vis[std::size_t(i)]);
        const Image& m = sample.masks.at(vis[std::size_t(i)]->token_id);
        if (m.width != img.width || m.height != img.height)
            throw InvalidArgument("build_union_batch: mask size does not match the image");
        for (Eigen::Index p = 0; p < m.pixels(); ++p)
            if (m.data[p * m.channels] > 0) b.union_mask.data[p] = 1.0;
    }
    b.union_image = img;
    for (Eigen::Index p = 0; p < img.pixels(); ++p)
        for (int c = 0; c < img.channels; ++c) b.union_image.data[p * img.channels + c] *= b.union_mask.data[p];
    b.prompt = build_prompt(b.selected, sample.gender, view_prompt ? std::optional(sample.view) : std::nullopt, style);
    return b;
}

// ---------------------------------------------------------------------------

namespace {

constexpr const char* kViewWords[] = {"front", "side", "back", "overhead"};
// Style words separating normal-space and headshot prompts from colour ones.
constexpr const char* kStyleWords[] = {"sculpture", "headshot"};

/// im2col for a 3x3 zero-padded convolution on a P x C (row = pixel) map.
MatrixXd im2col(const MatrixXd& in, int w, int h) {
    const Eigen::Index c = in.cols();
    MatrixXd col = MatrixXd::Zero(in.rows(), 9 * c);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    const int sx = x + kx - 1, sy = y + ky - 1;
                    if (sx < 0 || sy < 0 || sx >= w || sy >= h) continue;
                    col.block(y * w + x, (ky * 3 + kx) * c, 1, c) = in.row(sy * w + sx);
                }
    return col;
}

MatrixXd col2im(const MatrixXd& col, int w, int h, Eigen::Index c) {
    MatrixXd out = MatrixXd::Zero(Eigen::Index(w) * h, c);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    const int sx = x + kx - 1, sy = y + ky - 1;
                    if (sx < 0 || sy < 0 || sx >= w || sy >= h) continue;
                    out.row(sy * w + sx) += col.block(y * w + x, (ky * 3 + kx) * c, 1, c);
                }
    return out;
}

MatrixXd avg_pool(const MatrixXd& in, int w, int f) {
    const int ow = w / f;
    MatrixXd out = MatrixXd::Zero(Eigen::Index(ow) * ow, in.cols());
    for (int y = 0; y < w; ++y)
        for (int x = 0; x < w; ++x) out.row((y / f) * ow + x / f) += in.row(y * w + x);
    return out / double(f * f);
}

/// Nearest-neighbour upsampling; its adjoint is the block sum.
MatrixXd upsample_rows(const MatrixXd& in, int w, int f) {
    const int ow = w / f;
    MatrixXd out(Eigen::Index(w) * w, in.cols());
    for (int y = 0; y < w; ++y)
        for (int x = 0; x < w; ++x) out.row(y * w + x) = in.row((y / f) * ow + x / f);
    return out;
}

MatrixXd image_rows(const Image& img) {
    return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        img.data.data(), img.pixels(), img.channels);
}

Image rows_image(const MatrixXd& m, int w, int h) {
    Image img(w, h, int(m.cols()));
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(img.data.data(), m.rows(),
                                                                                        m.cols()) = m;
    return img;
}

/// Karras-style preconditioning on x = z_t / sqrt(ab) = x0 + sigma n:
/// D = c_skip x + c_out F, eps = (x - D) / sigma. Keeps d eps / d F bounded.
struct Precond {
    static constexpr double sigma_data = 0.5;
    double c_in, c_noise, c_skip, c_out, eps_x, eps_out;

    explicit Precond(double ab) {
        const double s2 = (1.0 - ab) / ab, s = std::sqrt(s2), d2 = sigma_data * sigma_data;
        c_in = 1.0 / std::sqrt(s2 + d2);
        c_noise = 0.25 * std::log(s);
        c_skip = d2 / (s2 + d2);
        c_out = s * sigma_data / std::sqrt(s2 + d2);
        eps_x = s / (s2 + d2);
        eps_out = -sigma_data / std::sqrt(s2 + d2);
    }
};

VectorXd word_vector(const std::string& word, int dim, std::uint64_t seed) {
    Rng rng(fnv1a(word.data(), word.size(), seed ^ 0x9e3779b97f4a7c15ULL));
    std::normal_distribution<double> g(0.0, 1.0);
    VectorXd v(dim);
    for (int i = 0; i < dim; ++i) v[i] = g(rng);
    return v;
}

}  // namespace

ToyDenoiser::ToyDenoiser(std::vector<Asset> assets, DenoiserConfig cfg, NoiseSchedule sched)
    : assets_(std::move(assets)), cfg_(cfg), sched_(std::move(sched)) {
    validate_assets(assets_);
    if (cfg_.resolution < 4 || cfg_.attn_resolution < 1 || cfg_.resolution % cfg_.attn_resolution)
        throw InvalidArgument("ToyDenoiser: attention resolution must divide the image resolution");
    if (cfg_.channels < 1 || cfg_.embed_dim < 1) throw InvalidArgument("ToyDenoiser: empty layers");
    std::sort(assets_.begin(), assets_.end(), [](const Asset& a, const Asset& b) { return a.token_id < b.token_id; });
    const int C = cfg_.channels, D = cfg_.embed_dim, K = int(assets_.size());

    Eigen::Index off = 0;
    auto slice = [&](Eigen::Index n) {
        ParamSlice s{off, n};
        off += n;
        return s;
    };
    embed_ = slice(Eigen::Index(K) * D);
    w1_ = slice(Eigen::Index(C) * 4 * 9);
    b1_ = slice(C);
    wq_ = slice(Eigen::Index(D) * (C + 4));
    wk_ = slice(Eigen::Index(D) * D);
    wv_ = slice(Eigen::Index(C) * D);
    w2_ = slice(Eigen::Index(3) * C * 9);
    b2_ = slice(3);
    theta_ = VectorXd::Zero(off);

    words_[""] = word_vector("", D, cfg_.seed);
    for (const char* w : kViewWords) words_[w] = word_vector(w, D, cfg_.seed);
    for (const char* w : kStyleWords) words_[w] = word_vector(w, D, cfg_.seed);
    for (const auto& a : assets_) words_[a.class_name] = word_vector(a.class_name, D, cfg_.seed);

    Rng rng(cfg_.seed);
    std::normal_distribution<double> g(0.0, 1.0);
    auto fill = [&](ParamSlice s, double std) {
        for (Eigen::Index i = 0; i < s.size; ++i) theta_[s.offset + i] = std * g(rng);
    };
    fill(w1_, std::sqrt(2.0 / 36.0));
    fill(wq_, std::sqrt(1.0 / (C + 4)));
    fill(wk_, std::sqrt(1.0 / D));
    // Zero-initialised value projection: the attention branch starts as a no-op.
    fill(w2_, std::sqrt(1.0 / (9.0 * C)));
    // Learned tokens start from their class word, as in textual inversion.
    for (int k = 0; k < K; ++k) {
        token_row_[assets_[std::size_t(k)].token_id] = k;
        for (int d = 0; d < D; ++d) theta_[embed_.offset + Eigen::Index(d) * K + k] = words_[assets_[std::size_t(k)].class_name][d];
    }
}

std::vector<PromptToken> ToyDenoiser::tokenize(const std::string& prompt) const {
    std::vector<PromptToken> out{{0, -1, ""}};
    static const std::regex word_re(R"(<asset(\d+)>|[A-Za-z][A-Za-z\-]*)");
    for (auto it = std::sregex_iterator(prompt.begin(), prompt.end(), word_re); it != std::sregex_iterator(); ++it) {
        const std::smatch& m = *it;
        if (m[1].matched) {
            const int id = std::stoi(m[1].str());
            if (!token_row_.count(id)) throw ContractViolation("prompt uses unregistered token " + m.str());
            out.push_back({int(out.size()), id, m.str()});
        } else if (words_.count(m.str())) {
            out.push_back({int(out.size()), -1, m.str()});
        }
    }
    return out;
}

DenoiserForward ToyDenoiser::forward(const Image& z_t, int t, const std::string& prompt) const {
    const int R = cfg_.resolution, A = cfg_.attn_resolution, f = R / A;
    const int C = cfg_.channels, D = cfg_.embed_dim, K = int(assets_.size());
    if (z_t.width != R || z_t.height != R || z_t.channels != 3)
        throw InvalidArgument("ToyDenoiser: expected a " + std::to_string(R) + "x" + std::to_string(R) + " RGB input");
    const double ab = sched_.abar(t);
    DenoiserForward fw;
    fw.t = t;
    fw.tokens = tokenize(prompt);
    const Eigen::Index n = Eigen::Index(fw.tokens.size());

    const Precond pc(ab);
    MatrixXd x(z_t.pixels(), 4);
    x.leftCols(3) = image_rows(z_t) * (pc.c_in / std::sqrt(ab));
    x.col(3).setConstant(pc.c_noise);
    fw.col_x = im2col(x, R, R);
    fw.h1 = (fw.col_x * block(w1_, C, 36).transpose()).rowwise() + block(b1_, 1, C).row(0);
    fw.f1 = fw.h1.cwiseMax(0.0);
    // Queries see the trunk features and the raw input.
    MatrixXd qin(x.rows(), C + 4);
    qin << fw.f1, x;
    fw.pooled = avg_pool(qin, R, f);
    fw.q = fw.pooled * block(wq_, D, C + 4).transpose();

    fw.emb.resize(n, D);
    const auto table = block(embed_, K, D);
    for (const auto& tok : fw.tokens)
        fw.emb.row(tok.slot) = tok.learned >= 0 ? VectorXd(table.row(token_row_.at(tok.learned)).transpose())
                                                : words_.at(tok.text);
    fw.keys = fw.emb * block(wk_, D, D).transpose();
    fw.values = fw.emb * block(wv_, C, D).transpose();
    MatrixXd logits = fw.q * fw.keys.transpose() / std::sqrt(double(D));
    fw.attn.resize(logits.rows(), n);
    for (Eigen::Index p = 0; p < logits.rows(); ++p) {
        const double mx = logits.row(p).maxCoeff();
        const Eigen::RowVectorXd e = (logits.row(p).array() - mx).exp();
        fw.attn.row(p) = e / e.sum();
    }
    const MatrixXd g = upsample_rows(fw.attn * fw.values, R, f) + fw.f1;
    fw.col_g = im2col(g, R, R);
    const MatrixXd head = (fw.col_g * block(w2_, 3, 9 * C).transpose()).rowwise() + block(b2_, 1, 3).row(0);
    const VectorXd xs = z_t.data / std::sqrt(ab);
    const VectorXd out = rows_image(head, R, R).data;
    fw.x0 = Image(R, R, 3);
    fw.x0.data = pc.c_skip * xs + pc.c_out * out;
    fw.eps = Image(R, R, 3);
    fw.eps.data = pc.eps_x * xs + pc.eps_out * out;
    return fw;
}

VectorXd ToyDenoiser::backward(const DenoiserForward& fw, const Image& d_eps, const MatrixXd& d_attn) const {
    const int R = cfg_.resolution, A = cfg_.attn_resolution, f = R / A;
    const int C = cfg_.channels, D = cfg_.embed_dim, K = int(assets_.size());
    if (!d_eps.same_shape(fw.eps)) throw InvalidArgument("ToyDenoiser::backward: cotangent shape mismatch");
    const double ab = sched_.abar(fw.t);
    VectorXd grad = VectorXd::Zero(theta_.size());
    auto gblock = [&](ParamSlice s, Eigen::Index rows, Eigen::Index cols) {
        return Eigen::Map<MatrixXd>(grad.data() + s.offset, rows, cols);
    };

    const MatrixXd dx0 = image_rows(d_eps) * Precond(ab).eps_out;
    gblock(b2_, 1, 3) = dx0.colwise().sum();
    gblock(w2_, 3, 9 * C) = dx0.transpose() * fw.col_g;
    const MatrixXd dg = col2im(dx0 * block(w2_, 3, 9 * C), R, R, C);

    MatrixXd df1 = dg;
    const MatrixXd d_out = avg_pool(dg, R, f) * double(f * f);
    MatrixXd da = d_out * fw.values.transpose();
    if (d_attn.size()) {
        if (d_attn.rows() != da.rows() || d_attn.cols() != da.cols())
            throw InvalidArgument("ToyDenoiser::backward: attention cotangent shape mismatch");
        da += d_attn;
    }
    const MatrixXd dv = fw.attn.transpose() * d_out;
    const VectorXd inner = (fw.attn.array() * da.array()).rowwise().sum();
    const MatrixXd dlog = fw.attn.array() * (da.colwise() - inner).array();
    const double inv = 1.0 / std::sqrt(double(D));
    const MatrixXd dq = dlog * fw.keys * inv;
    const MatrixXd dk = dlog.transpose() * fw.q * inv;

    gblock(wq_, D, C + 4) = dq.transpose() * fw.pooled;
    df1 += upsample_rows(dq * block(wq_, D, C + 4).leftCols(C), R, f) / double(f * f);
    gblock(wk_, D, D) = dk.transpose() * fw.emb;
    gblock(wv_, C, D) = dv.transpose() * fw.emb;
    const MatrixXd demb = dk * block(wk_, D, D) + dv * block(wv_, C, D);
    auto gtable = gblock(embed_, K, D);
    for (const auto& tok : fw.tokens)
        if (tok.learned >= 0) gtable.row(token_row_.at(tok.learned)) += demb.row(tok.slot);

    const MatrixXd dh1 = (fw.h1.array() > 0).select(df1, 0.0);
    gblock(b1_, 1, C) = dh1.colwise().sum();
    gblock(w1_, C, 36) = dh1.transpose() * fw.col_x;
    return grad;
}

Image ToyDenoiser::attention_map(const DenoiserForward& fw, int token_id) const {
    const int A = cfg_.attn_resolution;
    for (const auto& tok : fw.tokens)
        if (tok.learned == token_id) {
            Image m(A, A, 1);
            m.data = fw.attn.col(tok.slot);
            return m;
        }
    throw ContractViolation("token <asset" + std::to_string(token_id) + "> is not in the prompt");
}

void ToyDenoiser::save(const fs::path& stem) const {
    if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
    nlohmann::json assets = nlohmann::json::array();
    for (const auto& a : assets_)
        assets.push_back({{"token_id", a.token_id}, {"class_name", a.class_name}, {"kind", to_string(a.kind)}});
    const nlohmann::json h = {{"format", "avatarkit-denoiser"},
                              {"resolution", cfg_.resolution},
                              {"attn_resolution", cfg_.attn_resolution},
                              {"channels", cfg_.channels},
                              {"embed_dim", cfg_.embed_dim},
                              {"seed", cfg_.seed},
                              {"schedule_T", sched_.T},
                              {"assets", assets},
                              {"num_params", theta_.size()}};
    std::ofstream js(fs::path(stem).concat(".json"));
    js << h.dump(2) << '\n';
    std::ofstream bin(fs::path(stem).concat(".bin"), std::ios::binary);
    bin.write(reinterpret_cast<const char*>(theta_.data()), std::streamsize(theta_.size() * sizeof(double)));
    if (!js || !bin) throw IoError("failed writing denoiser checkpoint " + stem.string());
}

ToyDenoiser ToyDenoiser::load(const fs::path& stem) {
    std::ifstream js(fs::path(stem).concat(".json"));
    if (!js) throw IoError("cannot open " + stem.string() + ".json");
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(js);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(stem.string() + ".json: " + e.what());
    }
    if (h.value("format", "") != "avatarkit-denoiser") throw IoError(stem.string() + ": not a denoiser checkpoint");
    std::vector<Asset> assets;
    for (const auto& a : h.at("assets"))
        assets.push_back({a.at("token_id").get<int>(), a.at("class_name").get<std::string>(),
                          parse_asset_kind(a.at("kind").get<std::string>())});
    DenoiserConfig cfg;
    cfg.resolution = h.at("resolution");
    cfg.attn_resolution = h.at("attn_resolution");
    cfg.channels = h.at("channels");
    cfg.embed_dim = h.at("embed_dim");
    cfg.seed = h.at("seed");
    ToyDenoiser m(std::move(assets), cfg, NoiseSchedule::linear(h.at("schedule_T").get<int>()));
    if (h.at("num_params").get<Eigen::Index>() != m.theta_.size()) throw IoError(stem.string() + ": size mismatch");
    std::ifstream bin(fs::path(stem).concat(".bin"), std::ios::binary);
    bin.read(reinterpret_cast<char*>(m.theta_.data()), std::streamsize(m.theta_.size() * sizeof(double)));
    if (!bin) throw IoError(stem.string() + ".bin: truncated");
    return m;
}

// ---------------------------------------------------------------------------

double masked_diffusion_loss(const Image& eps_pred, const Image& eps_true, const Image& mask) {
    if (!eps_pred.same_shape(eps_true) || mask.width != eps_pred.width || mask.height != eps_pred.height ||
        mask.channels != 1)
        throw InvalidArgument("masked_diffusion_loss: shape mismatch");
    double s = 0;
    const int c = eps_pred.channels;
    for (Eigen::Index i = 0; i < eps_pred.data.size(); ++i) {
        const double r = (eps_pred.data[i] - eps_true.data[i]) * mask.data[i / c];
        s += r * r;
    }
    return s / double(eps_pred.data.size());
}

Image mask_to_attention(const Image& mask, int size) {
    if (mask.channels != 1) throw InvalidArgument("mask_to_attention: masks are single channel");
    Image m = resize_area(mask, size, size);
    for (Eigen::Index i = 0; i < m.data.size(); ++i) m.data[i] = m.data[i] >= 0.5 ? 1.0 : 0.0;
    return m;
}

double cross_attention_loss(const ToyDenoiser& model, const DenoiserForward& fwd, const std::vector<Asset>& selected,
                            const std::vector<Image>& masks) {
    if (selected.size() != masks.size()) throw InvalidArgument("cross_attention_loss: one mask per selected asset");
    if (selected.empty()) return 0.0;
    const int A = model.config().attn_resolution;
    double total = 0;
    for (std::size_t j = 0; j < selected.size(); ++j) {
        const Image ca = model.attention_map(fwd, selected[j].token_id);
        const Image m = masks[j].width == A && masks[j].height == A ? masks[j] : mask_to_attention(masks[j], A);
        total += (ca.data - m.data).squaredNorm() / double(ca.data.size());
    }
    return total / double(selected.size());
}

double prior_preservation_loss(const ToyDenoiser& model, const PriorSample& sample) {
    if (sample.prompt.find("<asset") != std::string::npos)
        throw InvalidArgument("prior prompt must not contain learned tokens: '" + sample.prompt + "'");
    const DenoiserForward fw = model.forward(sample.z_t, sample.t, sample.prompt);
    if (!fw.eps.same_shape(sample.eps)) throw InvalidArgument("prior_preservation_loss: shape mismatch");
    return (fw.eps.data - sample.eps.data).squaredNorm() / double(fw.eps.data.size());
}

double total_loss(double rec, double attn, double prior, double lambda_attn) { return rec + lambda_attn * attn + prior; }

// ---------------------------------------------------------------------------

void BoothSchedule::validate() const {
    if (stage1_steps < 0 || stage2_steps < 0) throw InvalidArgument("BoothSchedule: negative step count");
    if (lr_stage1 < 0 || lr_stage2 < 0) throw InvalidArgument("BoothSchedule: negative learning rate");
    if (lambda_attn < 0 || prior_ratio < 0) throw InvalidArgument("BoothSchedule: negative weight");
    if (t_min < 1 || t_min > t_max) throw InvalidArgument("BoothSchedule: bad timestep range");
}

namespace {

struct Adam {
    VectorXd m, v;
    int step = 0;

    explicit Adam(Eigen::Index n) : m(VectorXd::Zero(n)), v(VectorXd::Zero(n)) {}

    void apply(VectorXd& theta, const VectorXd& g, double lr, ParamSlice range) {
        ++step;
        if (lr == 0) return;
        const double c1 = 1 - std::pow(0.9, step), c2 = 1 - std::pow(0.999, step);
        auto mm = m.segment(range.offset, range.size);
        auto vv = v.segment(range.offset, range.size);
        const auto gg = g.segment(range.offset, range.size);
        mm = 0.9 * mm + 0.1 * gg;
        vv = 0.999 * vv + 0.001 * gg.cwiseProduct(gg);
        theta.segment(range.offset, range.size).array() -=
            lr * (mm.array() / c1) / ((vv.array() / c2).sqrt() + 1e-8);
    }
};

Image to_model_image(const Image& img, int res) {
    if (img.channels != 3) throw InvalidArgument("booth: training images must be RGB");
    return resize_area(img, res, res);
}

TrainImage to_model(const TrainImage& s, int res) {
    TrainImage o;
    o.image = to_model_image(s.image, res);
    for (const auto& [id, m] : s.masks) {
        if (m.channels != 1) throw InvalidArgument("booth: masks must be single channel");
        if (m.width != s.image.width || m.height != s.image.height)
            throw InvalidArgument("booth: mask size does not match its image");
        o.masks[id] = mask_to_attention(m, res);
    }
    o.view = s.view;
    o.gender = s.gender;
    return o;
}

}  // namespace

BoothResult train_personalization(ToyDenoiser& model, const std::vector<TrainImage>& dataset,
                                  const std::vector<PriorImage>& prior, const BoothSchedule& sch) {
    sch.validate();
    if (dataset.empty()) throw InvalidArgument("train_personalization: empty dataset");
    if (sch.t_max > model.schedule().T) throw InvalidArgument("BoothSchedule: t_max beyond the noise schedule");
    const int R = model.config().resolution, A = model.config().attn_resolution;
    std::vector<TrainImage> data;
    for (const auto& s : dataset) {
        data.push_back(to_model(s, R));
        if (data.back().visible().empty()) data.pop_back();
    }
    if (data.empty()) throw InvalidArgument("train_personalization: no sample has a visible asset");
    std::vector<PriorImage> pri;
    if (sch.prior_ratio > 0)
        for (const auto& p : prior) pri.push_back({to_model_image(p.image, R), p.prompt});

    Rng rng(sch.seed);
    BoothResult result;
    Adam adam(model.num_params());
    const ParamSlice all{0, model.num_params()};
    const NoiseSchedule& ns = model.schedule();
    std::uniform_int_distribution<int> tdist(sch.t_min, sch.t_max);

    for (int stage = 1; stage <= 2; ++stage) {
        const int steps = stage == 1 ? sch.stage1_steps : sch.stage2_steps;
        const double lr = stage == 1 ? sch.lr_stage1 : sch.lr_stage2;
        const ParamSlice range = stage == 1 ? model.embedding_slice() : all;
        for (int step = 0; step < steps; ++step) {
            const TrainImage& s = data[std::uniform_int_distribution<std::size_t>(0, data.size() - 1)(rng)];
            const UnionBatch b = *build_union_batch(s, model.assets(), rng, PromptStyle::color, sch.view_prompt);
            const int t = tdist(rng);
            const Image noise = gaussian_noise(b.union_image, rng);
            const DenoiserForward fw = model.forward(add_noise(b.union_image, noise, ns, t), t, b.prompt);

            // Eq. 1 and its gradient.
            const double rec = masked_diffusion_loss(fw.eps, noise, b.union_mask);
            Image d_eps(R, R, 3);
            const double n_el = double(fw.eps.data.size());
            for (Eigen::Index i = 0; i < d_eps.data.size(); ++i) {
                const double m = b.union_mask.data[i / 3];
                d_eps.data[i] = 2.0 * (fw.eps.data[i] - noise.data[i]) * m * m / n_el;
            }
            // Eq. 2 on the selected tokens.
            std::vector<Image> masks;
            for (const auto& a : b.selected) masks.push_back(mask_to_attention(s.masks.at(a.token_id), A));
            const double attn = cross_attention_loss(model, fw, b.selected, masks);
            MatrixXd d_attn = MatrixXd::Zero(fw.attn.rows(), fw.attn.cols());
            for (std::size_t j = 0; j < b.selected.size(); ++j)
                for (const auto& tok : fw.tokens)
                    if (tok.learned == b.selected[j].token_id)
                        d_attn.col(tok.slot) += sch.lambda_attn * 2.0 * (fw.attn.col(tok.slot) - masks[j].data) /
                                                (double(fw.attn.rows()) * double(b.selected.size()));
            VectorXd grad = model.backward(fw, d_eps, d_attn);

            // Eq. 3 on prior images with token-free prompts.
            double prior_loss = 0;
            for (int r = 0; r < (pri.empty() ? 0 : sch.prior_ratio); ++r) {
                const PriorImage& pi = pri[std::uniform_int_distribution<std::size_t>(0, pri.size() - 1)(rng)];
                const int tp = tdist(rng);
                const Image pn = gaussian_noise(pi.image, rng);
                const PriorSample ps{add_noise(pi.image, pn, ns, tp), pn, tp, pi.prompt};
                if (ps.prompt.find("<asset") != std::string::npos)
                    throw InvalidArgument("prior prompt must not contain learned tokens: '" + ps.prompt + "'");
                const DenoiserForward pf = model.forward(ps.z_t, tp, ps.prompt);
                const double l = (pf.eps.data - pn.data).squaredNorm() / n_el;
                prior_loss += l / sch.prior_ratio;
                Image dp(R, R, 3);
                dp.data = 2.0 * (pf.eps.data - pn.data) / (n_el * sch.prior_ratio);
                grad += model.backward(pf, dp);
            }

            const double total = total_loss(rec, attn, prior_loss, sch.lambda_attn);
            if (!std::isfinite(total) || !grad.allFinite())
                throw NumericError("booth: non-finite loss at stage " + std::to_string(stage) + " step " +
                                   std::to_string(step));
            adam.apply(model.params(), grad, lr, range);
            result.log.push_back({stage, step, rec, attn, prior_loss, total});
        }
    }
    return result;
}

double attention_iou(const ToyDenoiser& model, const std::vector<TrainImage>& dataset, bool joint, int t,
                     std::uint64_t seed) {
    const int R = model.config().resolution, A = model.config().attn_resolution;
    Rng rng(seed);
    double sum = 0;
    int count = 0;
    for (const auto& raw : dataset) {
        const TrainImage s = to_model(raw, R);
        std::vector<Asset> vis;
        for (int id : s.visible())
            for (const auto& a : model.assets())
                if (a.token_id == id) vis.push_back(a);
        if (vis.empty()) continue;
        // Inputs are built as in training: the image under the union of the
        // queried assets' masks with their tokens in the prompt.
        std::vector<std::vector<Asset>> groups;
        if (joint)
            groups.push_back(vis);
        else
            for (const auto& a : vis) groups.push_back({a});
        for (const auto& group : groups) {
            Image masked = s.image;
            for (Eigen::Index p = 0; p < masked.pixels(); ++p) {
                bool in = false;
                for (const auto& a : group) in = in || s.masks.at(a.token_id).data[p] > 0;
                if (!in) masked.data.segment(p * 3, 3).setZero();
            }
            const Image noise = gaussian_noise(masked, rng);
            const DenoiserForward fw = model.forward(add_noise(masked, noise, model.schedule(), t), t,
                                                     build_prompt(group, s.gender, s.view));
            for (const auto& a : group) {
                const Image ca = model.attention_map(fw, a.token_id);
                const Image m = mask_to_attention(s.masks.at(a.token_id), A);
                const double thr = 0.5 * ca.data.maxCoeff();
                int inter = 0, uni = 0;
                for (Eigen::Index i = 0; i < ca.data.size(); ++i) {
                    const bool p = ca.data[i] >= thr, q = m.data[i] > 0.5;
                    inter += p && q;
                    uni += p || q;
                }
                sum += uni ? double(inter) / uni : 1.0;
                ++count;
            }
        }
    }
    if (!count) throw InvalidArgument("attention_iou: no visible assets");
    return sum / count;
}

std::vector<Asset> two_asset_registry() {
    return {{0, "square", AssetKind::garment}, {1, "circle", AssetKind::accessory}};
}

std::vector<TrainImage> two_asset_scene(int count, int size, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<TrainImage> out;
    for (int n = 0; n < count; ++n) {
        TrainImage s;
        s.image = Image(size, size, 3, 1.0);
        Image ma(size, size, 1), mb(size, size, 1);
        const double half = size * (0.14 + 0.06 * u(rng)), rad = size * (0.14 + 0.06 * u(rng));
        double ax, ay, bx, by;
        do {
            ax = half + u(rng) * (size - 2 * half);
            ay = half + u(rng) * (size - 2 * half);
            bx = rad + u(rng) * (size - 2 * rad);
            by = rad + u(rng) * (size - 2 * rad);
        } while (std::max(std::abs(ax - bx), std::abs(ay - by)) < half + rad + 1);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const double px = x + 0.5, py = y + 0.5;
                if (std::abs(px - ax) <= half && std::abs(py - ay) <= half) {
                    ma.at(x, y) = 1;
                    s.image.at(x, y, 0) = 0.9, s.image.at(x, y, 1) = 0.1, s.image.at(x, y, 2) = 0.1;
                } else if ((px - bx) * (px - bx) + (py - by) * (py - by) <= rad * rad) {
                    mb.at(x, y) = 1;
                    s.image.at(x, y, 0) = 0.1, s.image.at(x, y, 1) = 0.15, s.image.at(x, y, 2) = 0.9;
                }
            }
        s.masks[0] = ma;
        s.masks[1] = mb;
        s.view = ViewTag::front;
        out.push_back(std::move(s));
    }
    return out;
}

void to_json(nlohmann::json& j, const BoothSchedule& s) {
    j = {{"stage1_steps", s.stage1_steps}, {"stage2_steps", s.stage2_steps}, {"lr_stage1", s.lr_stage1},
         {"lr_stage2", s.lr_stage2},       {"lambda_attn", s.lambda_attn},   {"prior_ratio", s.prior_ratio},
         {"t_min", s.t_min},               {"t_max", s.t_max},               {"view_prompt", s.view_prompt},
         {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, BoothSchedule& s) {
    auto get = [&](const char* k, auto& v) {
        if (j.contains(k)) j.at(k).get_to(v);
    };
    get("stage1_steps", s.stage1_steps);
    get("stage2_steps", s.stage2_steps);
    get("lr_stage1", s.lr_stage1);
    get("lr_stage2", s.lr_stage2);
    get("lambda_attn", s.lambda_attn);
    get("prior_ratio", s.prior_ratio);
    get("t_min", s.t_min);
    get("t_max", s.t_max);
    get("view_prompt", s.view_prompt);
    get("seed", s.seed);
}

}  // namespace avk
