#include "doctest.h"

#include "explicd/model.hpp"
#include "explicd/rng.hpp"
#include "explicd/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>
#include <vector>

using namespace explicd;
using namespace explicd::model;
using ad::Shape;

namespace {

using Mat = std::vector<std::vector<double>>;

Tensor random_tensor(SplitMix64& rng, Shape shape, double scale = 1.0) {
    std::vector<double> v(ad::shape_numel(shape));
    for (double& x : v) x = scale * rng.uniform_signed();
    return Tensor::parameter(std::move(shape), std::move(v));
}

// Rows of a tensor viewed as [rows, last-extent], starting at row `first`.
Mat rows_of(const Tensor& t, std::size_t first = 0, std::size_t count = 0) {
    const std::size_t cols = t.shape().back();
    const std::size_t total = t.size() / cols;
    if (count == 0) count = total - first;
    Mat m(count, std::vector<double>(cols));
    auto v = t.values();
    for (std::size_t r = 0; r < count; ++r) {
        for (std::size_t c = 0; c < cols; ++c) m[r][c] = v[(first + r) * cols + c];
    }
    return m;
}

Mat mm(const Mat& a, const Mat& b) {
    Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < b[0].size(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < b.size(); ++k) s += a[i][k] * b[k][j];
            out[i][j] = s;
        }
    }
    return out;
}

std::vector<double> softmax_loop(std::vector<double> x) {
    const double mx = *std::max_element(x.begin(), x.end());
    double z = 0.0;
    for (double& v : x) z += (v = std::exp(v - mx));
    for (double& v : x) v /= z;
    return x;
}

struct AttentionOracle {
    Mat attention; // K x S
    Mat concepts;  // K x d
};

// Cross-attention written directly from its definition with scalar loops.
AttentionOracle attention_loop(const ConceptModuleParams& cm, const Mat& fmap) {
    const std::size_t d = fmap[0].size();
    const Mat q = mm(rows_of(cm.tokens), rows_of(cm.query));
    const Mat k = mm(fmap, rows_of(cm.key));
    const Mat v = mm(fmap, rows_of(cm.value));
    AttentionOracle o;
    for (const auto& qi : q) {
        std::vector<double> logits;
        for (const auto& ks : k) {
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) s += qi[j] * ks[j];
            logits.push_back(s / std::sqrt(static_cast<double>(d)));
        }
        o.attention.push_back(softmax_loop(logits));
    }
    const Mat ctx = mm(o.attention, v);
    o.concepts = mm(ctx, rows_of(cm.output));
    return o;
}

ConceptModuleParams random_concepts(SplitMix64& rng, std::size_t k, std::size_t d) {
    ConceptModuleParams cm;
    cm.tokens = random_tensor(rng, {k, d});
    cm.query = random_tensor(rng, {d, d});
    cm.key = random_tensor(rng, {d, d});
    cm.value = random_tensor(rng, {d, d});
    cm.output = random_tensor(rng, {d, d});
    return cm;
}

// Scalar reference for the vision transformer encoder.
double gelu_ref(double x) {
    const double c = std::sqrt(2.0 / std::numbers::pi);
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

Mat layer_norm_ref(const Mat& x, const Tensor& gain, const Tensor& bias) {
    Mat out = x;
    for (auto& row : out) {
        const double n = static_cast<double>(row.size());
        double mu = 0.0;
        for (double v : row) mu += v;
        mu /= n;
        double var = 0.0;
        for (double v : row) var += (v - mu) * (v - mu);
        var /= n;
        for (std::size_t i = 0; i < row.size(); ++i) {
            row[i] = (row[i] - mu) / std::sqrt(var + 1e-5) * gain[i] + bias[i];
        }
    }
    return out;
}

Mat add_bias(Mat x, const Tensor& bias) {
    for (auto& row : x) {
        for (std::size_t i = 0; i < row.size(); ++i) row[i] += bias[i];
    }
    return x;
}

Mat encoder_ref(const VisualEncoderParams& p, const ModelConfig& cfg, const Image& img) {
    const std::size_t gw = cfg.grid_w(), ps = cfg.patch, d = cfg.dim, h = cfg.heads, hd = d / h;
    Mat patches;
    for (std::size_t gy = 0; gy < cfg.grid_h(); ++gy) {
        for (std::size_t gx = 0; gx < gw; ++gx) {
            std::vector<double> row;
            for (std::size_t c = 0; c < cfg.channels; ++c) {
                for (std::size_t py = 0; py < ps; ++py) {
                    for (std::size_t px = 0; px < ps; ++px) row.push_back(img.at(c, gy * ps + py, gx * ps + px));
                }
            }
            patches.push_back(row);
        }
    }
    Mat x = add_bias(mm(patches, rows_of(p.patch_weight)), p.patch_bias);
    const Mat pos = rows_of(p.pos_embed);
    for (std::size_t s = 0; s < x.size(); ++s) {
        for (std::size_t i = 0; i < d; ++i) x[s][i] += pos[s][i];
    }
    const std::size_t seq = x.size();
    for (const auto& b : p.blocks) {
        const Mat qkv = add_bias(mm(layer_norm_ref(x, b.ln1_gain, b.ln1_bias), rows_of(b.qkv_weight)), b.qkv_bias);
        Mat o(seq, std::vector<double>(d, 0.0));
        for (std::size_t head = 0; head < h; ++head) {
            for (std::size_t i = 0; i < seq; ++i) {
                std::vector<double> logits(seq);
                for (std::size_t j = 0; j < seq; ++j) {
                    double s = 0.0;
                    for (std::size_t t = 0; t < hd; ++t) s += qkv[i][head * hd + t] * qkv[j][d + head * hd + t];
                    logits[j] = s / std::sqrt(static_cast<double>(hd));
                }
                const auto a = softmax_loop(logits);
                for (std::size_t j = 0; j < seq; ++j) {
                    for (std::size_t t = 0; t < hd; ++t) o[i][head * hd + t] += a[j] * qkv[j][2 * d + head * hd + t];
                }
            }
        }
        const Mat proj = add_bias(mm(o, rows_of(b.proj_weight)), b.proj_bias);
        for (std::size_t s = 0; s < seq; ++s) {
            for (std::size_t i = 0; i < d; ++i) x[s][i] += proj[s][i];
        }
        Mat hid = add_bias(mm(layer_norm_ref(x, b.ln2_gain, b.ln2_bias), rows_of(b.fc1_weight)), b.fc1_bias);
        for (auto& row : hid) {
            for (double& v : row) v = gelu_ref(v);
        }
        const Mat out = add_bias(mm(hid, rows_of(b.fc2_weight)), b.fc2_bias);
        for (std::size_t s = 0; s < seq; ++s) {
            for (std::size_t i = 0; i < d; ++i) x[s][i] += out[s][i];
        }
    }
    return layer_norm_ref(x, p.final_gain, p.final_bias);
}

knowledge::KnowledgeBase small_kb() {
    knowledge::CriteriaAxis a{"tone", {"pale tone", "dark tone", "mixed tone"}, {0, 1, 2, 0}};
    knowledge::CriteriaAxis b{"edge", {"smooth edge", "jagged edge"}, {0, 0, 1, 1}};
    return knowledge::KnowledgeBase({"c0", "c1", "c2", "c3"}, {a, b});
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.height = 8;
    cfg.width = 8;
    cfg.dim = 8;
    cfg.depth = 1;
    cfg.heads = 2;
    return cfg;
}

Image random_image(SplitMix64& rng, std::size_t h, std::size_t w) {
    Image img(3, h, w);
    for (double& v : img.pixels) v = rng.uniform();
    return img;
}

void perturb(const std::vector<NamedTensor>& params, SplitMix64& rng, double scale) {
    for (const auto& p : params) {
        for (double& v : Tensor(p.tensor).mutable_values()) v += scale * rng.normal();
    }
}

} // namespace

TEST_CASE("cross-attention matches the loop oracle on random instances") {
    SplitMix64 rng(2024);
    int cases = 0;
    for (std::size_t k = 1; k <= 3; ++k) {
        for (std::size_t s = 1; s <= 5; ++s) {
            for (std::size_t d = 1; d <= 8; ++d) {
                const ConceptModuleParams cm = random_concepts(rng, k, d);
                const Tensor fmap = random_tensor(rng, {s, d});
                const ConceptEncoding enc = encode_concepts(cm, fmap);
                const AttentionOracle ref = attention_loop(cm, rows_of(fmap));
                REQUIRE(enc.attention.shape() == Shape{k, s});
                REQUIRE(enc.concepts.shape() == Shape{k, d});
                const Mat att = rows_of(enc.attention);
                const Mat con = rows_of(enc.concepts);
                for (std::size_t i = 0; i < k; ++i) {
                    double row_sum = 0.0;
                    for (std::size_t j = 0; j < s; ++j) {
                        CHECK(std::abs(att[i][j] - ref.attention[i][j]) <= 1e-12);
                        row_sum += att[i][j];
                    }
                    CHECK(std::abs(row_sum - 1.0) <= 1e-9);
                    for (std::size_t j = 0; j < d; ++j) CHECK(std::abs(con[i][j] - ref.concepts[i][j]) <= 1e-12);
                }
                ++cases;
            }
        }
    }
    CHECK(cases >= 100);
}

TEST_CASE("batched cross-attention equals per-sample attention") {
    SplitMix64 rng(5);
    const ConceptModuleParams cm = random_concepts(rng, 3, 6);
    const Tensor fmap = random_tensor(rng, {4, 5, 6});
    const ConceptEncoding enc = encode_concepts(cm, fmap);
    REQUIRE(enc.attention.shape() == Shape{4, 3, 5});
    for (std::size_t b = 0; b < 4; ++b) {
        const AttentionOracle ref = attention_loop(cm, rows_of(fmap, b * 5, 5));
        const Mat att = rows_of(enc.attention, b * 3, 3);
        const Mat con = rows_of(enc.concepts, b * 3, 3);
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < 5; ++j) CHECK(std::abs(att[i][j] - ref.attention[i][j]) <= 1e-12);
            for (std::size_t j = 0; j < 6; ++j) CHECK(std::abs(con[i][j] - ref.concepts[i][j]) <= 1e-12);
        }
    }
}

TEST_CASE("cross-attention degenerate cases are exact") {
    SplitMix64 rng(11);
    SUBCASE("single patch") {
        const ConceptModuleParams cm = random_concepts(rng, 3, 4);
        const Tensor fmap = random_tensor(rng, {1, 4});
        const ConceptEncoding enc = encode_concepts(cm, fmap);
        for (double a : enc.attention.values()) CHECK(a == 1.0);
        const Mat expected = mm(mm(rows_of(fmap), rows_of(cm.value)), rows_of(cm.output));
        const Mat con = rows_of(enc.concepts);
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < 4; ++j) CHECK(con[i][j] == doctest::Approx(expected[0][j]).epsilon(1e-14));
        }
    }
    SUBCASE("identical keys give uniform attention") {
        const ConceptModuleParams cm = random_concepts(rng, 2, 5);
        const Tensor row = random_tensor(rng, {1, 5});
        std::vector<double> tiled;
        for (int s = 0; s < 4; ++s) tiled.insert(tiled.end(), row.values().begin(), row.values().end());
        const ConceptEncoding enc = encode_concepts(cm, Tensor::from({4, 5}, tiled));
        for (double a : enc.attention.values()) CHECK(a == 0.25);
    }
}

TEST_CASE("encoder matches the scalar reference") {
    SplitMix64 rng(77);
    for (std::size_t depth : {1u, 2u}) {
        ModelConfig cfg = tiny_config();
        cfg.depth = depth;
        VisualEncoderParams p = init_encoder(cfg, 3);
        std::vector<NamedTensor> named;
        collect(p, named);
        perturb(named, rng, 0.3);
        const Image img = random_image(rng, 8, 8);
        const Tensor f = encode_image(p, cfg, img);
        REQUIRE(f.shape() == Shape{4, 8});
        const Mat ref = encoder_ref(p, cfg, img);
        const Mat got = rows_of(f);
        for (std::size_t s = 0; s < 4; ++s) {
            for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(got[s][i] - ref[s][i]) <= 1e-12);
        }
    }
}

TEST_CASE("patchify orders channel, row, column inside each patch") {
    ModelConfig cfg = tiny_config();
    Image img(3, 8, 8);
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = 0; y < 8; ++y) {
            for (std::size_t x = 0; x < 8; ++x) img.at(c, y, x) = static_cast<double>(c * 100 + y * 10 + x);
        }
    }
    const Image* one[] = {&img};
    const Tensor p = patchify(cfg, one);
    REQUIRE(p.shape() == Shape{4, 48});
    // Patch 3 is the bottom-right 4x4 block.
    CHECK(p.values()[3 * 48 + 0] == 44.0);
    CHECK(p.values()[3 * 48 + 1] == 45.0);
    CHECK(p.values()[3 * 48 + 4] == 54.0);
    CHECK(p.values()[3 * 48 + 16] == 144.0);
    CHECK(p.values()[1 * 48 + 0] == 4.0);

    Image wrong(3, 16, 16);
    const Image* bad[] = {&wrong};
    CHECK_THROWS_AS(patchify(cfg, bad), ad::ShapeError);
}

TEST_CASE("anchor loss on uniform scores is ln n") {
    for (std::size_t n : {2u, 3u, 4u, 7u}) {
        const Tensor scores = Tensor::from({n}, std::vector<double>(n, 0.3));
        const int pos[] = {1};
        for (double tau : {1.0, 0.07}) CHECK(anchor_loss(scores, pos, tau).item() == std::log(static_cast<double>(n)));
    }
}

TEST_CASE("anchor loss matches closed forms") {
    const int pos[] = {0};
    const Tensor s = Tensor::from({3}, {2.0, 0.0, 0.0});
    // ln(1 + 2 e^-2)
    CHECK(std::abs(anchor_loss(s, pos, 1.0).item() - 0.2395447662218845) <= 1e-12);

    const Tensor t = Tensor::from({3}, {0.9, 0.1, -0.2});
    const double l1 = anchor_loss(t, pos, 1.0).item();
    const double l05 = anchor_loss(t, pos, 0.5).item();
    const double l01 = anchor_loss(t, pos, 0.1).item();
    CHECK(std::abs(l1 - 0.5778485830258508) <= 1e-12);
    CHECK(std::abs(l05 - 0.2720858382796124) <= 1e-12);
    CHECK(std::abs(l01 - 3.521023333901514e-4) <= 1e-12);
    CHECK(l1 > l05);
    CHECK(l05 > l01);
    CHECK(l01 < 1e-3);

    CHECK_THROWS_AS(anchor_loss(t, pos, 0.0), ConfigError);
    CHECK_THROWS_AS(anchor_loss(t, pos, -1.0), ConfigError);
}

TEST_CASE("anchor loss is invariant to permuting negatives") {
    SplitMix64 rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform_int(0, 5));
        std::vector<double> v(n);
        for (double& x : v) x = rng.uniform_signed();
        const int pos[] = {0};
        const double base = anchor_loss(Tensor::from({n}, v), pos, 0.2).item();
        std::reverse(v.begin() + 1, v.end());
        CHECK(anchor_loss(Tensor::from({n}, v), pos, 0.2).item() == doctest::Approx(base).epsilon(1e-14));
        std::rotate(v.begin() + 1, v.begin() + 2, v.end());
        CHECK(anchor_loss(Tensor::from({n}, v), pos, 0.2).item() == doctest::Approx(base).epsilon(1e-14));
    }
}

TEST_CASE("anchor loss decreases toward zero as tau shrinks when the positive leads") {
    SplitMix64 rng(9);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform_int(0, 4));
        std::vector<double> v(n);
        for (double& x : v) x = rng.uniform_signed();
        const auto best = static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
        v[static_cast<std::size_t>(best)] += 0.05;
        const int pos[] = {best};
        const Tensor t = Tensor::from({n}, v);
        double prev = anchor_loss(t, pos, 1.0).item();
        for (double tau : {0.5, 0.1, 0.01}) {
            const double cur = anchor_loss(t, pos, tau).item();
            CHECK(cur < prev);
            prev = cur;
        }
        CHECK(prev < 0.01);
    }
}

TEST_CASE("similarity profile gives cosine scores against anchors") {
    const knowledge::KnowledgeBase kb = small_kb();
    const knowledge::AnchorSet anchors = knowledge::embed_anchors(kb, 8);
    const AnchorBank bank(anchors);
    SplitMix64 rng(4);
    const Tensor concepts = random_tensor(rng, {3, 2, 8}, 2.0);
    const auto scores = similarity_profile(concepts, bank, true);
    REQUIRE(scores.size() == 2);
    for (std::size_t axis = 0; axis < 2; ++axis) {
        const std::size_t n = anchors.option_count(axis);
        REQUIRE(scores[axis].shape() == Shape{3, n});
        for (std::size_t b = 0; b < 3; ++b) {
            const auto c = rows_of(concepts, b * 2 + axis, 1)[0];
            double cn = 0.0;
            for (double v : c) cn += v * v;
            for (std::size_t o = 0; o < n; ++o) {
                double dot = 0.0;
                for (std::size_t i = 0; i < 8; ++i) dot += c[i] * anchors.matrix(axis)[o * 8 + i];
                const double cosine = dot / std::sqrt(cn);
                const double got = scores[axis].values()[b * n + o];
                CHECK(std::abs(got - cosine) <= 1e-12);
                CHECK(got >= -1.0);
                CHECK(got <= 1.0);
            }
        }
    }
    const auto raw = similarity_profile(concepts, bank, false);
    const auto c0 = rows_of(concepts, 0, 1)[0];
    double dot = 0.0;
    for (std::size_t i = 0; i < 8; ++i) dot += c0[i] * anchors.matrix(0)[i];
    CHECK(std::abs(raw[0].values()[0] - dot) <= 1e-12);
}

TEST_CASE("classify is an affine map of the concatenated profile") {
    SplitMix64 rng(12);
    HeadParams head{random_tensor(rng, {4, 5}), random_tensor(rng, {4})};
    const Tensor p1 = random_tensor(rng, {2, 3});
    const Tensor p2 = random_tensor(rng, {2, 2});
    const Tensor logits = classify(head, {p1, p2});
    REQUIRE(logits.shape() == Shape{2, 4});
    for (std::size_t b = 0; b < 2; ++b) {
        std::vector<double> profile;
        for (std::size_t i = 0; i < 3; ++i) profile.push_back(p1.values()[b * 3 + i]);
        for (std::size_t i = 0; i < 2; ++i) profile.push_back(p2.values()[b * 2 + i]);
        for (std::size_t c = 0; c < 4; ++c) {
            double z = head.bias[c];
            for (std::size_t j = 0; j < 5; ++j) z += head.weight.values()[c * 5 + j] * profile[j];
            CHECK(std::abs(logits.values()[b * 4 + c] - z) <= 1e-12);
        }
    }
    CHECK_THROWS_AS(classify(head, {p1}), ad::ShapeError);
}

TEST_CASE("total loss combines cross-entropy and averaged anchor losses") {
    const Tensor logits = Tensor::from({2, 3}, {1.0, 2.0, 0.5, -1.0, 0.0, 3.0});
    const int labels[] = {1, 2};
    const std::vector<Tensor> scores = {Tensor::from({2, 2}, {0.5, -0.5, 0.2, 0.1}),
                                        Tensor::from({2, 3}, {0.1, 0.9, 0.3, -0.4, 0.0, 0.6})};
    const std::vector<std::vector<int>> positives = {{0, 1}, {1, 2}};
    auto ce_row = [](std::vector<double> z, int y) {
        double mx = *std::max_element(z.begin(), z.end()), s = 0.0;
        for (double v : z) s += std::exp(v - mx);
        return mx + std::log(s) - z[static_cast<std::size_t>(y)];
    };
    const double ce = 0.5 * (ce_row({1.0, 2.0, 0.5}, 1) + ce_row({-1.0, 0.0, 3.0}, 2));
    const double tau = 0.5;
    const double a0 = 0.5 * (ce_row({1.0, -1.0}, 0) + ce_row({0.4, 0.2}, 1));
    const double a1 = 0.5 * (ce_row({0.2, 1.8, 0.6}, 1) + ce_row({-0.8, 0.0, 1.2}, 2));
    const double lambda = 0.7;

    const LossParts parts = total_loss(logits, labels, scores, positives, tau, lambda);
    CHECK(std::abs(parts.ce - ce) <= 1e-12);
    CHECK(std::abs(parts.anchor - lambda * 0.5 * (a0 + a1)) <= 1e-12);
    CHECK(std::abs(parts.total.item() - (ce + lambda * 0.5 * (a0 + a1))) <= 1e-12);

    const LossParts off = total_loss(logits, labels, scores, positives, tau, 0.0);
    CHECK(off.anchor == 0.0);
    CHECK(off.total.item() == off.ce);
    CHECK_THROWS_AS(total_loss(logits, labels, scores, positives, tau, -1.0), ConfigError);
}

TEST_CASE("initialization is deterministic and follows the stated scheme") {
    const knowledge::KnowledgeBase kb = small_kb();
    ModelConfig cfg;
    const ExplicdModel a = ExplicdModel::init(cfg, kb, 5);
    const ExplicdModel b = ExplicdModel::init(cfg, kb, 5);
    const ExplicdModel c = ExplicdModel::init(cfg, kb, 6);
    const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    REQUIRE(pa.size() == pb.size());
    std::set<std::string> names;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(names.insert(pa[i].name).second);
        CHECK(pa[i].tensor.to_vector() == pb[i].tensor.to_vector());
    }
    CHECK(pa[0].tensor.to_vector() != pc[0].tensor.to_vector());
    CHECK(names.size() == 3 + 12 * cfg.depth + 2 + 5 + 2);
    CHECK(a.head.weight.shape() == Shape{4, 5});

    for (const auto& p : pa) {
        const auto v = p.tensor.to_vector();
        if (p.name.ends_with(".bias")) {
            CHECK(std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; }));
        } else if (p.name.ends_with(".gain")) {
            CHECK(std::all_of(v.begin(), v.end(), [](double x) { return x == 1.0; }));
        }
    }
    const auto w = a.encoder.blocks[0].qkv_weight.to_vector();
    double mean = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
    double var = 0.0;
    for (double x : w) var += (x - mean) * (x - mean);
    const double sd = std::sqrt(var / static_cast<double>(w.size()));
    CHECK(std::abs(mean) < 1e-3);
    CHECK(sd == doctest::Approx(0.02).epsilon(0.05));
}

TEST_CASE("model configuration is validated") {
    ModelConfig cfg;
    cfg.heads = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = ModelConfig{};
    cfg.patch = 5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = ModelConfig{};
    cfg.tau = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = ModelConfig{};
    cfg.lambda_anchor = -0.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_NOTHROW(ModelConfig{}.validate());
}

TEST_CASE("forward produces consistent shapes and rejects mismatched anchors") {
    const knowledge::KnowledgeBase kb = small_kb();
    const ModelConfig cfg = tiny_config();
    const ExplicdModel m = ExplicdModel::init(cfg, kb, 1);
    SplitMix64 rng(3);
    std::vector<Image> images = {random_image(rng, 8, 8), random_image(rng, 8, 8), random_image(rng, 8, 8)};
    const std::vector<const Image*> batch = {&images[0], &images[1], &images[2]};
    const AnchorBank bank(knowledge::embed_anchors(kb, 8));
    const ForwardResult fr = forward(m, bank, batch);
    CHECK(fr.features.shape() == Shape{3, 4, 8});
    CHECK(fr.encoding.attention.shape() == Shape{3, 2, 4});
    CHECK(fr.scores[0].shape() == Shape{3, 3});
    CHECK(fr.scores[1].shape() == Shape{3, 2});
    CHECK(fr.logits.shape() == Shape{3, 4});

    // Batch results equal single-image results.
    const Image* one[] = {&images[1]};
    const ForwardResult single = forward(m, bank, one);
    for (std::size_t c = 0; c < 4; ++c) {
        CHECK(single.logits.values()[c] == doctest::Approx(fr.logits.values()[4 + c]).epsilon(1e-12));
    }

    CHECK_THROWS_AS(forward(m, AnchorBank(knowledge::embed_anchors(kb, 16)), batch), ad::ShapeError);
    knowledge::CriteriaAxis other{"tone", {"pale tone", "dark tone"}, {0, 1, 1, 0}};
    knowledge::CriteriaAxis edge{"edge", {"smooth edge", "jagged edge"}, {0, 0, 1, 1}};
    const knowledge::KnowledgeBase kb2({"c0", "c1", "c2", "c3"}, {other, edge});
    CHECK_THROWS_AS(forward(m, AnchorBank(knowledge::embed_anchors(kb2, 8)), batch), ad::ShapeError);

    const BlackBoxModel bb = BlackBoxModel::init(cfg, 4, 1);
    CHECK(forward(bb, batch).shape() == Shape{3, 4});
    for (const auto& p : bb.parameters()) CHECK(p.name.find("concept") == std::string::npos);
}

TEST_CASE("full model gradients pass the finite-difference check") {
    const auto report = train::micro_gradcheck(1, 1e-5, 1e-4);
    INFO("worst ", report.worst().name, " rel ", report.worst().rel_error);
    CHECK(report.passed);
    CHECK(report.entries.size() == 24);

    ad::debug::set_fault_injection(true);
    const auto broken = train::micro_gradcheck(1, 1e-5, 1e-4);
    ad::debug::set_fault_injection(false);
    CHECK_FALSE(broken.passed);
}

TEST_CASE("black-box gradients pass the finite-difference check") {
    const ModelConfig cfg = tiny_config();
    BlackBoxModel m = BlackBoxModel::init(cfg, 3, 2);
    SplitMix64 rng(21);
    perturb(m.parameters(), rng, 0.3);
    std::vector<Image> images = {random_image(rng, 8, 8), random_image(rng, 8, 8)};
    const std::vector<const Image*> batch = {&images[0], &images[1]};
    const int labels[] = {2, 0};
    auto loss = [&] { return ad::cross_entropy(forward(m, batch), labels); };
    const auto report = ad::finite_diff_check(loss, m.parameters(), 1e-5, 1e-4);
    INFO("worst ", report.worst().name, " rel ", report.worst().rel_error);
    CHECK(report.passed);
}

TEST_CASE("explanation contributions reproduce the predicted logit") {
    const knowledge::KnowledgeBase kb = small_kb();
    const ModelConfig cfg = tiny_config();
    ExplicdModel m = ExplicdModel::init(cfg, kb, 4);
    SplitMix64 rng(31);
    perturb(m.parameters(), rng, 0.5);
    const AnchorBank bank(knowledge::embed_anchors(kb, 8));
    for (int trial = 0; trial < 20; ++trial) {
        const Image img = random_image(rng, 8, 8);
        const ExplanationReport rep = explain(m, bank, kb, img);
        REQUIRE(rep.axes.size() == 2);
        CHECK(rep.axes[0].scores.size() == 3);
        CHECK(rep.axes[1].scores.size() == 2);
        double total = rep.bias;
        for (double c : rep.contributions) total += c;
        CHECK(std::abs(total - rep.logits[rep.predicted]) <= 1e-9);
        CHECK(rep.predicted == argmax(rep.logits));
        CHECK(rep.predicted_name == kb.classes()[rep.predicted]);
        for (const auto& ax : rep.axes) {
            for (double s : ax.scores) {
                CHECK(s >= -1.0);
                CHECK(s <= 1.0);
            }
            CHECK(ax.best == argmax(ax.scores));
            CHECK(std::accumulate(ax.attention.begin(), ax.attention.end(), 0.0) == doctest::Approx(1.0));
        }
        CHECK(rep.mean_attention.size() == 4);
        CHECK(std::accumulate(rep.mean_attention.begin(), rep.mean_attention.end(), 0.0) ==
              doctest::Approx(1.0));
    }
    const std::string json = report_json(explain(m, bank, kb, random_image(rng, 8, 8)), "s-1");
    CHECK(json.find("\"sample_id\": \"s-1\"") != std::string::npos);
    CHECK(json.find("\"best_option\"") != std::string::npos);
    CHECK(json.find("\"contribution_sum\"") != std::string::npos);
}

TEST_CASE("heatmaps upsample by nearest neighbour and rescale to bytes") {
    const std::vector<double> grid = {0.0, 1.0, 2.0, 4.0};
    const GrayImage img = heatmap(grid, 2, 2, 8, 6);
    CHECK(img.height == 8);
    CHECK(img.width == 6);
    REQUIRE(img.pixels.size() == 48);
    CHECK(img.pixels[0] == 0);
    CHECK(img.pixels[2] == 0);
    CHECK(img.pixels[3] == 64);
    CHECK(img.pixels[5 * 6 + 0] == 128);
    CHECK(img.pixels[7 * 6 + 5] == 255);
    const GrayImage flat = heatmap(std::vector<double>(4, 0.25), 2, 2, 4, 4);
    CHECK(std::all_of(flat.pixels.begin(), flat.pixels.end(), [](std::uint8_t v) { return v == 0; }));
    CHECK_THROWS_AS(heatmap(grid, 3, 2, 8, 8), std::invalid_argument);
}

TEST_CASE("argmax breaks ties toward the lowest index") {
    const std::vector<double> v = {0.1, 0.7, 0.7, -1.0};
    CHECK(argmax(v) == 1);
    CHECK_THROWS_AS(argmax(std::vector<double>{}), std::invalid_argument);
}
