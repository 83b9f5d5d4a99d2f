#include <doctest.h>

#include <filesystem>
#include <set>

#include "avatarkit/booth.hpp"
#include "avatarkit/errors.hpp"
#include "support.hpp"

using namespace avk;

namespace {

Image random_image(int w, int h, int c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Image img(w, h, c);
    for (Eigen::Index i = 0; i < img.data.size(); ++i) img.data[i] = u(rng);
    return img;
}

Image binary_mask(int w, int h, std::mt19937_64& rng, double density = 0.5) {
    std::bernoulli_distribution b(density);
    Image m(w, h, 1);
    for (Eigen::Index i = 0; i < m.data.size(); ++i) m.data[i] = b(rng) ? 1.0 : 0.0;
    return m;
}

std::vector<Asset> four_assets() {
    return {{0, "shirt", AssetKind::garment},
            {1, "face", AssetKind::face},
            {2, "pants", AssetKind::garment},
            {3, "hair", AssetKind::hair}};
}

}  // namespace

TEST_CASE("build_prompt") {
    const std::vector<Asset> sel = {{0, "shirt", AssetKind::garment}, {1, "face", AssetKind::face}};
    CHECK(build_prompt(sel, Gender::man, ViewTag::front) ==
          "a high-resolution DSLR color image of a man with <asset1> face, wearing <asset0> shirt, front view");
    CHECK(build_prompt({sel[1]}, Gender::woman, ViewTag::side) ==
          "a high-resolution DSLR color image of a woman with <asset1> face, side view");
    const std::string sculpt = build_prompt(sel, Gender::man, ViewTag::back, PromptStyle::sculpture);
    CHECK(sculpt.rfind("a detailed sculpture of", 0) == 0);
    CHECK(build_prompt(sel, Gender::man, ViewTag::front, PromptStyle::headshot).rfind("the headshot of", 0) == 0);
    CHECK(build_prompt(sel, Gender::man, std::nullopt) ==
          "a high-resolution DSLR color image of a man with <asset1> face, wearing <asset0> shirt");
    CHECK(build_prompt(sel, Gender::man, ViewTag::front, PromptStyle::color, false) ==
          "a high-resolution DSLR color image of a man with face, wearing shirt, front view");
    CHECK(build_prompt(sel, Gender::man, ViewTag::front) == build_prompt({sel[1], sel[0]}, Gender::man, ViewTag::front));
}

TEST_CASE("union batches") {
    std::mt19937_64 g(1);
    const auto assets = four_assets();
    TrainImage s;
    s.image = random_image(12, 10, 3, g, 0, 1);

    SUBCASE("nothing visible") {
        Rng rng(0);
        CHECK_FALSE(build_union_batch(s, assets, rng).has_value());
    }
    SUBCASE("one visible asset is always chosen") {
        s.masks[2] = binary_mask(12, 10, g);
        s.masks[1] = Image(12, 10, 1);  // present but empty
        Rng rng(3);
        for (int i = 0; i < 50; ++i) {
            const auto b = build_union_batch(s, assets, rng);
            REQUIRE(b);
            REQUIRE(b->selected.size() == 1);
            CHECK(b->selected[0].token_id == 2);
        }
    }
    SUBCASE("disjoint union, image union and determinism") {
        Image a(12, 10, 1), c(12, 10, 1);
        for (int y = 0; y < 10; ++y)
            for (int x = 0; x < 12; ++x) (x < 5 ? a : c).at(x, y) = (x + y) % 3 == 0 ? 1.0 : 0.0;
        s.masks[0] = a;
        s.masks[3] = c;
        Rng r1(9), r2(9);
        for (int i = 0; i < 20; ++i) {
            const auto b = build_union_batch(s, assets, r1);
            const auto b2 = build_union_batch(s, assets, r2);
            REQUIRE(b);
            CHECK(b->prompt == b2->prompt);
            CHECK(b->selected.size() == 1);  // strict subset of two
            double expect = 0;
            for (const auto& as : b->selected) expect += s.masks[as.token_id].data.sum();
            CHECK(b->union_mask.data.sum() == expect);
            for (Eigen::Index p = 0; p < s.image.pixels(); ++p)
                for (int ch = 0; ch < 3; ++ch)
                    CHECK(b->union_image.data[p * 3 + ch] == s.image.data[p * 3 + ch] * b->union_mask.data[p]);
        }
        // Explicit two-mask union when three assets are visible.
        s.masks[1] = binary_mask(12, 10, g, 0.0);
        s.masks[1].at(11, 9) = 1;
        bool saw_pair = false;
        for (int i = 0; i < 100 && !saw_pair; ++i) {
            const auto b = build_union_batch(s, assets, r1);
            if (b->selected.size() != 2) continue;
            saw_pair = true;
            for (Eigen::Index p = 0; p < s.image.pixels(); ++p) {
                double want = 0;
                for (const auto& as : b->selected) want = std::max(want, s.masks[as.token_id].data[p]);
                CHECK(b->union_mask.data[p] == want);
            }
        }
        CHECK(saw_pair);
    }
    SUBCASE("subset coverage with four visible assets") {
        for (int k = 0; k < 4; ++k) s.masks[k] = binary_mask(12, 10, g, 0.3);
        Rng rng(2024);
        std::set<std::size_t> sizes;
        std::set<std::vector<int>> subsets;
        for (int i = 0; i < 1000; ++i) {
            const auto b = build_union_batch(s, assets, rng);
            sizes.insert(b->selected.size());
            std::vector<int> ids;
            for (const auto& a : b->selected) ids.push_back(a.token_id);
            subsets.insert(ids);
        }
        CHECK(sizes == std::set<std::size_t>{1, 2, 3});
        CHECK(subsets.size() == 14);
    }
    SUBCASE("mask size mismatch") {
        s.masks[0] = Image(6, 5, 1, 1.0);
        Rng rng(0);
        CHECK_THROWS_AS(build_union_batch(s, assets, rng), InvalidArgument);
    }
}

TEST_CASE("masked diffusion loss") {
    std::mt19937_64 g(5);
    const Image p = random_image(4, 4, 3, g), q = random_image(4, 4, 3, g);
    CHECK(masked_diffusion_loss(p, q, Image(4, 4, 1, 0.0)) == 0.0);
    const double mse = (p.data - q.data).squaredNorm() / 48.0;
    CHECK(masked_diffusion_loss(p, q, Image(4, 4, 1, 1.0)) == doctest::Approx(mse).epsilon(1e-14));
    const Image m = binary_mask(4, 4, g);
    double ref = 0;
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
            for (int c = 0; c < 3; ++c) {
                const double r = (p.at(x, y, c) - q.at(x, y, c)) * m.at(x, y);
                ref += r * r;
            }
    ref /= 48.0;
    CHECK(std::abs(masked_diffusion_loss(p, q, m) - ref) < 1e-12);
    CHECK_THROWS_AS(masked_diffusion_loss(p, Image(4, 3, 3), m), InvalidArgument);
    CHECK_THROWS_AS(masked_diffusion_loss(p, q, Image(4, 4, 3)), InvalidArgument);
}

TEST_CASE("denoiser structure") {
    ToyDenoiser m(four_assets());
    CHECK(m.num_params() <= 100000);
    std::mt19937_64 g(2);
    const Image z = random_image(32, 32, 3, g);
    const std::string prompt = build_prompt(four_assets(), Gender::man, ViewTag::front);
    const DenoiserForward fw = m.forward(z, 400, prompt);
    CHECK(fw.attn.rows() == 256);
    CHECK(fw.tokens.size() == 1 + 4 + 4 + 1);  // null, tokens, class words, view word
    CHECK((fw.attn.array() >= 0).all());
    for (Eigen::Index p = 0; p < fw.attn.rows(); ++p) CHECK(std::abs(fw.attn.row(p).sum() - 1.0) < 1e-12);
    CHECK_THROWS_AS(m.forward(z, 400, "a man with <asset9> hat"), ContractViolation);
    CHECK_THROWS_AS(m.forward(Image(16, 16, 3), 400, prompt), InvalidArgument);
    CHECK_THROWS_AS(m.attention_map(m.forward(z, 400, "a man wearing shirt"), 0), ContractViolation);
    CHECK_THROWS_AS(ToyDenoiser({{0, "a", AssetKind::face}, {0, "b", AssetKind::face}}), InvalidArgument);
}

TEST_CASE("denoiser gradient matches finite differences") {
    ToyDenoiser m(four_assets(), {16, 8, 8, 8, 3});
    std::mt19937_64 g(8);
    // Non-zero value projection so every path is exercised.
    Rng r(4);
    std::normal_distribution<double> n(0.0, 0.3);
    for (Eigen::Index i = 0; i < m.num_params(); ++i) m.params()[i] += n(r);
    const Image z = random_image(16, 16, 3, g);
    const std::string prompt = "a man with <asset1> face, wearing <asset2> pants, side view";
    const DenoiserForward fw = m.forward(z, 250, prompt);
    const Image ce = random_image(16, 16, 3, g);
    const MatrixXd ca = MatrixXd::Random(fw.attn.rows(), fw.attn.cols());
    const VectorXd grad = m.backward(fw, ce, ca);
    auto objective = [&]() {
        const DenoiserForward f = m.forward(z, 250, prompt);
        return f.eps.data.dot(ce.data) + (f.attn.array() * ca.array()).sum();
    };
    test::GradCheck check;
    for (Eigen::Index i = 0; i < m.num_params(); ++i) {
        const double v = m.params()[i];
        m.params()[i] = v + 1e-5;
        const double a = objective();
        m.params()[i] = v - 1e-5;
        const double b = objective();
        m.params()[i] = v;
        if (std::abs(a - b) < 1e-13 && grad[i] == 0) continue;
        check.add(grad[i], (a - b) / 2e-5, 1e-4);
    }
    CHECK(check.checked > 500);
    CHECK(check.ratio() >= 0.99);
    // Unused tokens receive no embedding gradient.
    const ParamSlice e = m.embedding_slice();
    const Eigen::Map<const MatrixXd> ge(grad.data() + e.offset, 4, 8);
    CHECK(ge.row(0).norm() == 0.0);
    CHECK(ge.row(3).norm() == 0.0);
    CHECK(ge.row(1).norm() > 0.0);
}

TEST_CASE("cross attention loss") {
    const auto assets = four_assets();
    ToyDenoiser m(assets);
    std::mt19937_64 g(6);
    const Image z = random_image(32, 32, 3, g);
    const std::vector<Asset> sel = {assets[0], assets[2]};
    const DenoiserForward fw = m.forward(z, 300, build_prompt(sel, Gender::man, ViewTag::front));

    std::vector<Image> same = {m.attention_map(fw, 0), m.attention_map(fw, 2)};
    CHECK(cross_attention_loss(m, fw, sel, same) == 0.0);

    std::vector<Image> masks = {binary_mask(16, 16, g, 0.3), binary_mask(16, 16, g, 0.6)};
    double ref = 0;
    for (std::size_t j = 0; j < 2; ++j) {
        const Image ca = m.attention_map(fw, sel[j].token_id);
        double s = 0;
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) s += (ca.at(x, y) - masks[j].at(x, y)) * (ca.at(x, y) - masks[j].at(x, y));
        ref += s / 256.0;
    }
    ref /= 2.0;
    CHECK(std::abs(cross_attention_loss(m, fw, sel, masks) - ref) < 1e-12);

    // Uniform maps: zero query weights give 1/#tokens everywhere.
    ToyDenoiser flat(assets);
    flat.params().setZero();
    const DenoiserForward ff = flat.forward(z, 300, build_prompt(sel, Gender::man, ViewTag::front));
    const double u = 1.0 / double(ff.tokens.size());
    const Image m0 = masks[0];
    double rho = m0.data.mean();
    const double closed = rho * (u - 1) * (u - 1) + (1 - rho) * u * u;
    CHECK(std::abs(cross_attention_loss(flat, ff, {sel[0]}, {m0}) - closed) < 1e-12);

    // Full-resolution masks are box-averaged and thresholded.
    Image big(32, 32, 1);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) big.at(x, y) = m0.at(x / 2, y / 2);
    CHECK(std::abs(cross_attention_loss(flat, ff, {sel[0]}, {big}) - closed) < 1e-12);

    CHECK_THROWS_AS(cross_attention_loss(m, fw, {assets[1]}, {masks[0]}), ContractViolation);
    CHECK_THROWS_AS(cross_attention_loss(m, fw, sel, {masks[0]}), InvalidArgument);
}

TEST_CASE("prior preservation loss and total loss") {
    const auto assets = four_assets();
    ToyDenoiser m(assets);
    std::mt19937_64 g(12);
    const Image z = random_image(32, 32, 3, g);
    const std::string prompt = build_prompt(assets, Gender::woman, ViewTag::side, PromptStyle::color, false);
    const DenoiserForward fw = m.forward(z, 500, prompt);
    CHECK(prior_preservation_loss(m, {z, fw.eps, 500, prompt}) == 0.0);
    Image off = fw.eps;
    off.data.array() -= 0.3;
    CHECK(prior_preservation_loss(m, {z, off, 500, prompt}) == doctest::Approx(0.09).epsilon(1e-12));
    const Image e = random_image(32, 32, 3, g);
    double ref = 0;
    for (Eigen::Index i = 0; i < e.data.size(); ++i) ref += (fw.eps.data[i] - e.data[i]) * (fw.eps.data[i] - e.data[i]);
    ref /= double(e.data.size());
    CHECK(std::abs(prior_preservation_loss(m, {z, e, 500, prompt}) - ref) < 1e-12);
    // The masked loss with a full mask is the prior loss.
    CHECK(std::abs(masked_diffusion_loss(fw.eps, e, Image(32, 32, 1, 1.0)) - ref) < 1e-12);
    CHECK_THROWS_AS(prior_preservation_loss(m, {z, e, 500, build_prompt(assets, Gender::man, ViewTag::front)}),
                    InvalidArgument);

    CHECK(total_loss(1, 0, 0) == 1.0);
    CHECK(total_loss(0, 1, 0) == 0.01);
    CHECK(total_loss(0.5, 2.0, 0.25) == doctest::Approx(0.77).epsilon(1e-15));
    CHECK(total_loss(0, 1, 0, 0.5) == 0.5);
    std::mt19937_64 r(1);
    std::uniform_real_distribution<double> u(0, 2);
    for (int i = 0; i < 200; ++i) {
        const double a = u(r), b = u(r), c = u(r), d = u(r);
        CHECK(total_loss(a + d, b, c) >= total_loss(a, b, c));
        CHECK(total_loss(a, b + d, c) >= total_loss(a, b, c));
        CHECK(total_loss(a, b, c + d) >= total_loss(a, b, c));
    }
}

TEST_CASE("training schedule contracts") {
    const auto assets = two_asset_registry();
    const auto data = two_asset_scene(8, 32, 1);
    BoothSchedule s;
    s.stage1_steps = 5;
    s.stage2_steps = 5;

    SUBCASE("zero learning rates keep every parameter") {
        ToyDenoiser m(assets);
        const VectorXd before = m.params();
        s.lr_stage1 = s.lr_stage2 = 0;
        const BoothResult r = train_personalization(m, data, {}, s);
        CHECK(r.log.size() == 10);
        CHECK(m.params() == before);
    }
    SUBCASE("stage 1 touches only the embeddings") {
        ToyDenoiser m(assets);
        const VectorXd before = m.params();
        s.stage2_steps = 0;
        train_personalization(m, data, {}, s);
        const ParamSlice e = m.embedding_slice();
        CHECK(m.params().segment(e.offset, e.size) != before.segment(e.offset, e.size));
        CHECK(m.params().head(e.offset) == before.head(e.offset));
        const Eigen::Index tail = m.num_params() - e.offset - e.size;
        CHECK(m.params().tail(tail) == before.tail(tail));
    }
    SUBCASE("deterministic per seed, prior batches mixed in") {
        std::vector<PriorImage> prior;
        for (const auto& d : two_asset_scene(3, 32, 9))
            prior.push_back({d.image, build_prompt(assets, Gender::man, ViewTag::front, PromptStyle::color, false)});
        ToyDenoiser a(assets), b(assets);
        const BoothResult ra = train_personalization(a, data, prior, s);
        train_personalization(b, data, prior, s);
        CHECK(a.params() == b.params());
        for (const auto& row : ra.log) {
            CHECK(row.prior > 0);
            CHECK(row.total == doctest::Approx(row.rec + 0.01 * row.attn + row.prior).epsilon(1e-14));
        }
        std::vector<PriorImage> bad = {{prior[0].image, build_prompt(assets, Gender::man, ViewTag::front)}};
        ToyDenoiser c(assets);
        CHECK_THROWS_AS(train_personalization(c, data, bad, s), InvalidArgument);
    }
    SUBCASE("validation") {
        ToyDenoiser m(assets);
        CHECK_THROWS_AS(train_personalization(m, {}, {}, s), InvalidArgument);
        s.t_max = 2000;
        CHECK_THROWS_AS(train_personalization(m, data, {}, s), InvalidArgument);
    }
}

TEST_CASE("desk schedule disentangles the two-asset scene") {
    const auto assets = two_asset_registry();
    const auto data = two_asset_scene(64, 64, 3);
    ToyDenoiser m(assets);
    BoothSchedule s;
    s.stage1_steps = 100;
    s.stage2_steps = 400;
    s.seed = 3;
    train_personalization(m, data, {}, s);
    CHECK(attention_iou(m, data) > 0.6);

    // Swapping the token in the prompt swaps which region is denoised better.
    Rng rng(77);
    double err[2][2] = {{0, 0}, {0, 0}};  // [prompt token][region]
    for (int i = 0; i < 16; ++i) {
        const TrainImage& raw = data[std::size_t(i)];
        Image img = resize_area(raw.image, 32, 32);
        const Image ma = mask_to_attention(raw.masks.at(0), 32), mb = mask_to_attention(raw.masks.at(1), 32);
        for (Eigen::Index p = 0; p < img.pixels(); ++p)
            if (ma.data[p] + mb.data[p] == 0) img.data.segment(p * 3, 3).setZero();
        for (int t : {100, 300, 500}) {
            const Image noise = gaussian_noise(img, rng);
            const Image zt = add_noise(img, noise, m.schedule(), t);
            for (int k = 0; k < 2; ++k) {
                const DenoiserForward fw = m.forward(zt, t, build_prompt({assets[std::size_t(k)]}, Gender::man, ViewTag::front));
                err[k][0] += masked_diffusion_loss(fw.eps, noise, ma);
                err[k][1] += masked_diffusion_loss(fw.eps, noise, mb);
            }
        }
    }
    CHECK(err[0][0] < err[1][0]);
    CHECK(err[1][1] < err[0][1]);
}

TEST_CASE("checkpoint and schedule json") {
    ToyDenoiser m(four_assets(), {32, 16, 16, 8, 42});
    m.params()[3] = 1.25;
    const auto stem = std::filesystem::temp_directory_path() / "avk_test_booth" / "den";
    m.save(stem);
    const ToyDenoiser back = ToyDenoiser::load(stem);
    CHECK(back.params() == m.params());
    CHECK(back.config().seed == 42);
    CHECK(back.assets().size() == 4);
    std::mt19937_64 g(1);
    const Image z = random_image(32, 32, 3, g);
    CHECK(back.forward(z, 10, "a man wearing <asset0> shirt").eps.data == m.forward(z, 10, "a man wearing <asset0> shirt").eps.data);
    CHECK_THROWS_AS(ToyDenoiser::load(stem.parent_path() / "nope"), IoError);

    BoothSchedule s;
    s.stage1_steps = 7;
    s.lr_stage2 = 0.5;
    const nlohmann::json j = s;
    const BoothSchedule r = j.get<BoothSchedule>();
    CHECK(r.stage1_steps == 7);
    CHECK(r.lr_stage2 == 0.5);
}
