#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "avatarkit/camrig.hpp"
#include "avatarkit/distill.hpp"
#include "avatarkit/raster.hpp"

namespace avk {

enum class AssetKind { face, hair, garment, accessory };
enum class Gender { man, woman };
enum class PromptStyle { color, sculpture, headshot };

std::string_view to_string(AssetKind k);
std::string_view to_string(Gender g);
AssetKind parse_asset_kind(std::string_view s);
Gender parse_gender(std::string_view s);

struct Asset {
    int token_id = 0;
    std::string class_name;
    AssetKind kind = AssetKind::garment;

    /// "<assetN>"
    std::string token() const;
};

/// Throws InvalidArgument on duplicate token ids or empty class names.
void validate_assets(const std::vector<Asset>& assets);

struct TrainImage {
    Image image;                  ///< RGB in [0,1]
    std::map<int, Image> masks;   ///< token id -> single-channel 0/1 mask
    ViewTag view = ViewTag::front;
    Gender gender = Gender::man;

    /// Token ids whose mask has positive area, ascending.
    std::vector<int> visible() const;
};

struct UnionBatch {
    Image union_mask;   ///< single channel, OR of the selected masks
    Image union_image;  ///< image with pixels outside the union zeroed
    std::string prompt;
    std::vector<Asset> selected;
    bool prior_flag = false;
};

/// Uniform over non-empty strict subsets of the visible assets (the single
/// visible asset when only one is). Empty optional when nothing is visible.
std::optional<UnionBatch> build_union_batch(const TrainImage& sample, const std::vector<Asset>& assets, Rng& rng,
                                            PromptStyle style = PromptStyle::color, bool view_prompt = true);

/// "a high-resolution DSLR color image of a man with <asset1> face, wearing
/// <asset0> shirt, front view". `with_tokens = false` drops the learned
/// tokens, giving the class-only prompt used for prior preservation.
std::string build_prompt(const std::vector<Asset>& selected, Gender gender, std::optional<ViewTag> view,
                         PromptStyle style = PromptStyle::color, bool with_tokens = true);

// ---------------------------------------------------------------------------
// Toy denoiser

struct DenoiserConfig {
    int resolution = 32;
    int attn_resolution = 16;
    int channels = 32;
    int embed_dim = 16;
    std::uint64_t seed = 0;
};

/// Named slice of the flat parameter vector.
struct ParamSlice {
    Eigen::Index offset = 0;
    Eigen::Index size = 0;
};

struct PromptToken {
    int slot;          ///< row in the token matrix fed to attention
    int learned = -1;  ///< token id for learned tokens, else -1
    std::string text;
};

/// Activations kept for the backward pass.
struct DenoiserForward {
    Image eps;
    Image x0;
    std::vector<PromptToken> tokens;  ///< tokens[0] is the always-present null token
    MatrixXd attn;                    ///< attn_res^2 x tokens, rows sum to one
    int t = 0;
    // caches
    MatrixXd col_x, h1, f1, pooled, q, emb, keys, values, col_g;
};

/// Pixel-space denoiser: conv trunk, one cross-attention block over prompt
/// tokens at attention resolution, conv head, with input/output scaling so
/// the head output has bounded influence on eps at every noise level.
class ToyDenoiser {
public:
    ToyDenoiser(std::vector<Asset> assets, DenoiserConfig cfg = {}, NoiseSchedule sched = NoiseSchedule::linear());

    const DenoiserConfig& config() const { return cfg_; }
    const NoiseSchedule& schedule() const { return sched_; }
    const std::vector<Asset>& assets() const { return assets_; }

    /// Learned tokens "<assetN>", registered class names, view words and the
    /// style words "sculpture" and "headshot"; the rest of the prompt is
    /// ignored. Unknown asset tokens are a contract violation.
    std::vector<PromptToken> tokenize(const std::string& prompt) const;

    DenoiserForward forward(const Image& z_t, int t, const std::string& prompt) const;
    /// Parameter gradient for cotangents on eps and on the attention matrix
    /// (the latter may be empty).
    VectorXd backward(const DenoiserForward& fwd, const Image& d_eps, const MatrixXd& d_attn = MatrixXd()) const;

    /// Attention map of learned token `token_id` (attn_res square, one
    /// channel); ContractViolation if the token is not in the forward's prompt.
    Image attention_map(const DenoiserForward& fwd, int token_id) const;

    VectorXd& params() { return theta_; }
    const VectorXd& params() const { return theta_; }
    /// Token embeddings: the "text" part. Everything else is the visual part.
    ParamSlice embedding_slice() const { return embed_; }
    Eigen::Index num_params() const { return theta_.size(); }

    void save(const std::filesystem::path& stem) const;
    static ToyDenoiser load(const std::filesystem::path& stem);

private:
    std::vector<Asset> assets_;
    DenoiserConfig cfg_;
    NoiseSchedule sched_;
    VectorXd theta_;
    ParamSlice embed_, w1_, b1_, wq_, wk_, wv_, w2_, b2_;
    std::map<std::string, VectorXd> words_;  ///< fixed word embeddings, index 0 = null
    std::map<int, int> token_row_;           ///< token id -> row of the embedding table

    auto block(ParamSlice s, Eigen::Index rows, Eigen::Index cols) const {
        return Eigen::Map<const MatrixXd>(theta_.data() + s.offset, rows, cols);
    }
};

// ---------------------------------------------------------------------------
// Losses

/// Mean over pixels and channels of ((pred - true) * M)^2, M broadcast over channels.
double masked_diffusion_loss(const Image& eps_pred, const Image& eps_true, const Image& mask);

/// Box-average to `size` then threshold at 0.5.
Image mask_to_attention(const Image& mask, int size);

/// Mean over selected tokens of MSE(CA_j, M_j); masks are given per selected
/// asset at any resolution divisible down to the attention grid.
double cross_attention_loss(const ToyDenoiser& model, const DenoiserForward& fwd, const std::vector<Asset>& selected,
                            const std::vector<Image>& masks);

struct PriorSample {
    Image z_t;
    Image eps;
    int t = 1;
    std::string prompt;
};

/// Unmasked MSE; InvalidArgument if the prompt carries a learned token.
double prior_preservation_loss(const ToyDenoiser& model, const PriorSample& sample);

double total_loss(double rec, double attn, double prior, double lambda_attn = 0.01);

// ---------------------------------------------------------------------------
// Training

struct BoothSchedule {
    int stage1_steps = 1000;
    int stage2_steps = 4000;
    double lr_stage1 = 3e-2;
    double lr_stage2 = 1e-3;
    double lambda_attn = 0.01;
    /// Prior samples per subject sample; 0 disables prior preservation.
    int prior_ratio = 1;
    int t_min = 20;
    int t_max = 980;
    bool view_prompt = true;
    std::uint64_t seed = 0;

    void validate() const;
};

struct PriorImage {
    Image image;
    std::string prompt;  ///< no learned tokens
};

struct BoothLogRow {
    int stage;
    int step;
    double rec;
    double attn;
    double prior;
    double total;
};

struct BoothResult {
    std::vector<BoothLogRow> log;
};

/// Stage 1 updates token embeddings only (Adam, lr_stage1), stage 2 all
/// parameters (Adam, lr_stage2). Images are resampled to the model resolution.
BoothResult train_personalization(ToyDenoiser& model, const std::vector<TrainImage>& dataset,
                                  const std::vector<PriorImage>& prior, const BoothSchedule& schedule);

/// Mean IoU between attention maps thresholded at half their maximum and
/// the attention-resolution masks, over every visible asset of every sample.
/// `joint` queries all visible assets in one prompt; otherwise each asset is
/// queried alone on its own masked image.
double attention_iou(const ToyDenoiser& model, const std::vector<TrainImage>& dataset, bool joint = false,
                     int t = 50, std::uint64_t seed = 0);

/// Generated scene: red square (token 0, "square") and blue circle
/// (token 1, "circle") on white at random non-overlapping placements.
std::vector<TrainImage> two_asset_scene(int count, int size, std::uint64_t seed);
std::vector<Asset> two_asset_registry();

void to_json(nlohmann::json& j, const BoothSchedule& s);
void from_json(const nlohmann::json& j, BoothSchedule& s);

}  // namespace avk
