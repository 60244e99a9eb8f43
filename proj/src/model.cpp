#include "explicd/model.hpp"

#include "explicd/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace explicd::model {

using namespace explicd::ad;

void ModelConfig::validate() const {
    if (channels == 0 || height == 0 || width == 0) throw ConfigError("image dimensions must be positive");
    if (patch == 0 || height % patch != 0 || width % patch != 0) {
        throw ConfigError("image " + std::to_string(height) + "x" + std::to_string(width) +
                          " is not divisible by patch size " + std::to_string(patch));
    }
    if (dim == 0 || heads == 0 || dim % heads != 0) {
        throw ConfigError("dim " + std::to_string(dim) + " must be a positive multiple of heads " + std::to_string(heads));
    }
    if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be > 0");
    if (!(lambda_anchor >= 0.0) || !std::isfinite(lambda_anchor)) throw ConfigError("lambda_anchor must be >= 0");
}

// ---------------------------------------------------------------------------
// Initialization

namespace {

Tensor normal_param(const std::string& name, Shape shape, std::uint64_t seed, double std_dev = 0.02) {
    SplitMix64 g(mix_seed(seed, fnv1a64(name)));
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = std_dev * g.normal();
    return Tensor::parameter(std::move(shape), std::move(v));
}

Tensor const_param(Shape shape, double value) {
    const std::size_t n = shape_numel(shape);
    return Tensor::parameter(std::move(shape), std::vector<double>(n, value));
}

void check_images(const ModelConfig& cfg, std::span<const Image* const> images) {
    if (images.empty()) throw ShapeError("patchify", "empty image batch");
    for (const Image* img : images) {
        if (img->channels != cfg.channels || img->height != cfg.height || img->width != cfg.width ||
            img->pixels.size() != cfg.channels * cfg.height * cfg.width) {
            throw ShapeError("patchify", Shape{img->channels, img->height, img->width},
                             Shape{cfg.channels, cfg.height, cfg.width});
        }
    }
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    return add_trailing(matmul(x, weight), bias);
}

// [B*S, d] -> [B*H, S, d/H]
Tensor split_heads(const Tensor& x, std::size_t batch, std::size_t seq, std::size_t heads, std::size_t head_dim) {
    return reshape(permute(reshape(x, {batch, seq, heads, head_dim}), {0, 2, 1, 3}), {batch * heads, seq, head_dim});
}

// [B*H, S, d/H] -> [B*S, d]
Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t seq, std::size_t heads, std::size_t head_dim) {
    return reshape(permute(reshape(x, {batch, heads, seq, head_dim}), {0, 2, 1, 3}), {batch * seq, heads * head_dim});
}

} // namespace

VisualEncoderParams init_encoder(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const std::size_t d = cfg.dim, hidden = cfg.dim * cfg.mlp_ratio;
    VisualEncoderParams p;
    p.patch_weight = normal_param("encoder.patch.weight", {cfg.patch_pixels(), d}, seed);
    p.patch_bias = const_param({d}, 0.0);
    p.pos_embed = normal_param("encoder.pos_embed", {cfg.num_patches(), d}, seed);
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        const std::string pre = "encoder.block" + std::to_string(i) + ".";
        TransformerBlock b;
        b.ln1_gain = const_param({d}, 1.0);
        b.ln1_bias = const_param({d}, 0.0);
        b.qkv_weight = normal_param(pre + "attn.qkv.weight", {d, 3 * d}, seed);
        b.qkv_bias = const_param({3 * d}, 0.0);
        b.proj_weight = normal_param(pre + "attn.proj.weight", {d, d}, seed);
        b.proj_bias = const_param({d}, 0.0);
        b.ln2_gain = const_param({d}, 1.0);
        b.ln2_bias = const_param({d}, 0.0);
        b.fc1_weight = normal_param(pre + "mlp.fc1.weight", {d, hidden}, seed);
        b.fc1_bias = const_param({hidden}, 0.0);
        b.fc2_weight = normal_param(pre + "mlp.fc2.weight", {hidden, d}, seed);
        b.fc2_bias = const_param({d}, 0.0);
        p.blocks.push_back(std::move(b));
    }
    p.final_gain = const_param({d}, 1.0);
    p.final_bias = const_param({d}, 0.0);
    return p;
}

ConceptModuleParams init_concepts(const ModelConfig& cfg, std::size_t axes, std::uint64_t seed) {
    if (axes == 0) throw ConfigError("concept module needs at least one axis");
    const std::size_t d = cfg.dim;
    ConceptModuleParams c;
    c.tokens = normal_param("concept.tokens", {axes, d}, seed);
    c.query = normal_param("concept.query", {d, d}, seed);
    c.key = normal_param("concept.key", {d, d}, seed);
    c.value = normal_param("concept.value", {d, d}, seed);
    c.output = normal_param("concept.output", {d, d}, seed);
    return c;
}

HeadParams init_head(std::size_t classes, std::size_t inputs, std::uint64_t seed, const std::string& prefix) {
    HeadParams h;
    h.weight = normal_param(prefix + ".weight", {classes, inputs}, seed);
    h.bias = const_param({classes}, 0.0);
    return h;
}

void collect(const VisualEncoderParams& p, std::vector<NamedTensor>& out) {
    out.push_back({"encoder.patch.weight", p.patch_weight});
    out.push_back({"encoder.patch.bias", p.patch_bias});
    out.push_back({"encoder.pos_embed", p.pos_embed});
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        const std::string pre = "encoder.block" + std::to_string(i) + ".";
        const auto& b = p.blocks[i];
        out.push_back({pre + "ln1.gain", b.ln1_gain});
        out.push_back({pre + "ln1.bias", b.ln1_bias});
        out.push_back({pre + "attn.qkv.weight", b.qkv_weight});
        out.push_back({pre + "attn.qkv.bias", b.qkv_bias});
        out.push_back({pre + "attn.proj.weight", b.proj_weight});
        out.push_back({pre + "attn.proj.bias", b.proj_bias});
        out.push_back({pre + "ln2.gain", b.ln2_gain});
        out.push_back({pre + "ln2.bias", b.ln2_bias});
        out.push_back({pre + "mlp.fc1.weight", b.fc1_weight});
        out.push_back({pre + "mlp.fc1.bias", b.fc1_bias});
        out.push_back({pre + "mlp.fc2.weight", b.fc2_weight});
        out.push_back({pre + "mlp.fc2.bias", b.fc2_bias});
    }
    out.push_back({"encoder.final.gain", p.final_gain});
    out.push_back({"encoder.final.bias", p.final_bias});
}

ExplicdModel ExplicdModel::init(const ModelConfig& cfg, const knowledge::KnowledgeBase& kb, std::uint64_t seed) {
    ExplicdModel m;
    m.config = cfg;
    m.encoder = init_encoder(cfg, seed);
    m.concepts = init_concepts(cfg, kb.axis_count(), seed);
    m.head = init_head(kb.class_count(), kb.total_options(), seed);
    for (const auto& axis : kb.axes()) m.option_counts.push_back(axis.option_count());
    return m;
}

std::vector<NamedTensor> ExplicdModel::parameters() const {
    std::vector<NamedTensor> out;
    collect(encoder, out);
    out.push_back({"concept.tokens", concepts.tokens});
    out.push_back({"concept.query", concepts.query});
    out.push_back({"concept.key", concepts.key});
    out.push_back({"concept.value", concepts.value});
    out.push_back({"concept.output", concepts.output});
    out.push_back({"head.weight", head.weight});
    out.push_back({"head.bias", head.bias});
    return out;
}

BlackBoxModel BlackBoxModel::init(const ModelConfig& cfg, std::size_t classes, std::uint64_t seed) {
    BlackBoxModel m;
    m.config = cfg;
    m.encoder = init_encoder(cfg, seed);
    m.head = init_head(classes, cfg.dim, seed, "linear_head");
    return m;
}

std::vector<NamedTensor> BlackBoxModel::parameters() const {
    std::vector<NamedTensor> out;
    collect(encoder, out);
    out.push_back({"linear_head.weight", head.weight});
    out.push_back({"linear_head.bias", head.bias});
    return out;
}

AnchorBank::AnchorBank(const knowledge::AnchorSet& anchors) : dim_(anchors.dim()) {
    for (std::size_t a = 0; a < anchors.axis_count(); ++a) {
        const std::size_t n = anchors.option_count(a);
        const auto& m = anchors.matrix(a);
        std::vector<double> t(dim_ * n);
        for (std::size_t o = 0; o < n; ++o) {
            for (std::size_t i = 0; i < dim_; ++i) t[i * n + o] = m[o * dim_ + i];
        }
        transposed_.push_back(Tensor::from({dim_, n}, std::move(t)));
    }
}

// ---------------------------------------------------------------------------
// Forward pieces

Tensor patchify(const ModelConfig& cfg, std::span<const Image* const> images) {
    check_images(cfg, images);
    const std::size_t p = cfg.patch, gh = cfg.grid_h(), gw = cfg.grid_w(), cols = cfg.patch_pixels();
    const std::size_t s = cfg.num_patches();
    std::vector<double> rows(images.size() * s * cols);
    for (std::size_t b = 0; b < images.size(); ++b) {
        const Image& img = *images[b];
        for (std::size_t gy = 0; gy < gh; ++gy) {
            for (std::size_t gx = 0; gx < gw; ++gx) {
                double* dst = rows.data() + ((b * s) + gy * gw + gx) * cols;
                for (std::size_t c = 0; c < cfg.channels; ++c) {
                    for (std::size_t py = 0; py < p; ++py) {
                        for (std::size_t px = 0; px < p; ++px) *dst++ = img.at(c, gy * p + py, gx * p + px);
                    }
                }
            }
        }
    }
    return Tensor::from({images.size() * s, cols}, std::move(rows));
}

Tensor encode_patches(const VisualEncoderParams& params, const ModelConfig& cfg, const Tensor& patches,
                      std::size_t batch) {
    const std::size_t s = cfg.num_patches(), d = cfg.dim, h = cfg.heads, hd = d / h;
    if (patches.rank() != 2 || patches.dim(0) != batch * s || patches.dim(1) != cfg.patch_pixels()) {
        throw ShapeError("encode_patches", patches.shape(), Shape{batch * s, cfg.patch_pixels()});
    }
    Tensor x = linear(patches, params.patch_weight, params.patch_bias);
    x = reshape(add_trailing(reshape(x, {batch, s, d}), params.pos_embed), {batch * s, d});
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (const auto& blk : params.blocks) {
        Tensor y = layer_norm(x, blk.ln1_gain, blk.ln1_bias);
        Tensor qkv = linear(y, blk.qkv_weight, blk.qkv_bias);
        Tensor q = split_heads(scale(slice(qkv, 1, 0, d), att_scale), batch, s, h, hd);
        Tensor k = split_heads(slice(qkv, 1, d, 2 * d), batch, s, h, hd);
        Tensor v = split_heads(slice(qkv, 1, 2 * d, 3 * d), batch, s, h, hd);
        Tensor att = softmax(bmm(q, k, true));
        Tensor o = merge_heads(bmm(att, v), batch, s, h, hd);
        x = add(x, linear(o, blk.proj_weight, blk.proj_bias));
        Tensor m = gelu(linear(layer_norm(x, blk.ln2_gain, blk.ln2_bias), blk.fc1_weight, blk.fc1_bias));
        x = add(x, linear(m, blk.fc2_weight, blk.fc2_bias));
    }
    x = layer_norm(x, params.final_gain, params.final_bias);
    return reshape(x, {batch, s, d});
}

Tensor encode_image(const VisualEncoderParams& params, const ModelConfig& cfg, const Image& image) {
    const Image* one[] = {&image};
    Tensor f = encode_patches(params, cfg, patchify(cfg, one), 1);
    return reshape(f, {cfg.num_patches(), cfg.dim});
}

ConceptEncoding encode_concepts(const ConceptModuleParams& cm, const Tensor& fmap) {
    if (fmap.rank() == 2) {
        auto batched = encode_concepts(cm, reshape(fmap, {1, fmap.dim(0), fmap.dim(1)}));
        const std::size_t k = cm.tokens.dim(0);
        return {reshape(batched.concepts, {k, fmap.dim(1)}), reshape(batched.attention, {k, fmap.dim(0)})};
    }
    if (fmap.rank() != 3) throw ShapeError("encode_concepts", "feature map must be [S,d] or [B,S,d], got " + shape_str(fmap.shape()));
    const std::size_t b = fmap.dim(0), s = fmap.dim(1), d = fmap.dim(2), k = cm.tokens.dim(0);
    if (cm.tokens.dim(1) != d) throw ShapeError("encode_concepts", cm.tokens.shape(), fmap.shape());
    Tensor queries = matmul(cm.tokens, cm.query);
    Tensor flat = reshape(fmap, {b * s, d});
    Tensor keys = reshape(matmul(flat, cm.key), {b, s, d});
    Tensor values = reshape(matmul(flat, cm.value), {b, s, d});
    Tensor logits = scale(bmm(broadcast_batch(queries, b), keys, true), 1.0 / std::sqrt(static_cast<double>(d)));
    Tensor attention = softmax(logits);
    Tensor context = reshape(bmm(attention, values), {b * k, d});
    Tensor concepts = reshape(matmul(context, cm.output), {b, k, d});
    return {concepts, attention};
}

std::vector<Tensor> similarity_profile(const Tensor& concepts, const AnchorBank& anchors, bool cosine) {
    if (concepts.rank() == 2) {
        auto batched = similarity_profile(reshape(concepts, {1, concepts.dim(0), concepts.dim(1)}), anchors, cosine);
        for (auto& t : batched) t = reshape(t, {t.dim(1)});
        return batched;
    }
    if (concepts.rank() != 3) throw ShapeError("similarity_profile", "concepts must be [K,d] or [B,K,d], got " + shape_str(concepts.shape()));
    const std::size_t b = concepts.dim(0), k = concepts.dim(1), d = concepts.dim(2);
    if (k != anchors.axis_count() || d != anchors.dim()) {
        throw ShapeError("similarity_profile", concepts.shape(),
                         Shape{anchors.axis_count(), anchors.dim()});
    }
    Tensor c = cosine ? l2_normalize(concepts) : concepts;
    std::vector<Tensor> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        Tensor row = k == 1 ? reshape(c, {b, d}) : reshape(slice(c, 1, i, i + 1), {b, d});
        out.push_back(matmul(row, anchors.transposed(i)));
    }
    return out;
}

Tensor anchor_loss(const Tensor& scores, std::span<const int> positives, double tau) {
    if (!(tau > 0.0)) throw ConfigError("anchor_loss: tau must be > 0");
    Tensor s = scores.rank() == 1 ? reshape(scores, {1, scores.dim(0)}) : scores;
    return cross_entropy(scale(s, 1.0 / tau), positives);
}

Tensor classify(const HeadParams& head, const std::vector<Tensor>& profiles) {
    if (profiles.empty()) throw ShapeError("classify", "no similarity profiles");
    const bool single = profiles[0].rank() == 1;
    std::vector<Tensor> rows;
    rows.reserve(profiles.size());
    for (const auto& p : profiles) rows.push_back(single ? reshape(p, {1, p.dim(0)}) : p);
    Tensor joined = concat(rows, 1);
    if (joined.dim(1) != head.weight.dim(1)) throw ShapeError("classify", joined.shape(), head.weight.shape());
    Tensor logits = add_trailing(matmul(joined, transpose(head.weight)), head.bias);
    return single ? reshape(logits, {head.bias.dim(0)}) : logits;
}

LossParts total_loss(const Tensor& logits, std::span<const int> labels, const std::vector<Tensor>& axis_scores,
                     const std::vector<std::vector<int>>& positives, double tau, double lambda_anchor) {
    if (!(lambda_anchor >= 0.0)) throw ConfigError("lambda_anchor must be >= 0");
    Tensor l = logits.rank() == 1 ? reshape(logits, {1, logits.dim(0)}) : logits;
    Tensor ce = cross_entropy(l, labels);
    LossParts parts;
    parts.ce = ce.item();
    if (lambda_anchor == 0.0) {
        parts.total = ce;
        return parts;
    }
    if (axis_scores.empty() || axis_scores.size() != positives.size()) {
        throw ShapeError("total_loss", "need one positive list per axis");
    }
    Tensor anchor_sum;
    for (std::size_t i = 0; i < axis_scores.size(); ++i) {
        Tensor li = anchor_loss(axis_scores[i], positives[i], tau);
        anchor_sum = anchor_sum.defined() ? add(anchor_sum, li) : li;
    }
    Tensor weighted = scale(anchor_sum, lambda_anchor / static_cast<double>(axis_scores.size()));
    parts.anchor = weighted.item();
    parts.total = add(ce, weighted);
    return parts;
}

namespace {

void check_anchor_bank(const std::vector<std::size_t>& option_counts, std::size_t dim, const AnchorBank& anchors) {
    if (anchors.dim() != dim || anchors.axis_count() != option_counts.size()) {
        throw ShapeError("forward", "anchor bank " + std::to_string(anchors.axis_count()) + " axes x d=" +
                                        std::to_string(anchors.dim()) + " does not match model " +
                                        std::to_string(option_counts.size()) + " axes x d=" + std::to_string(dim));
    }
    for (std::size_t i = 0; i < option_counts.size(); ++i) {
        if (anchors.transposed(i).dim(1) != option_counts[i]) {
            throw ShapeError("forward", "axis " + std::to_string(i) + " has " +
                                            std::to_string(anchors.transposed(i).dim(1)) + " anchors, model expects " +
                                            std::to_string(option_counts[i]));
        }
    }
}

} // namespace

ForwardResult forward(const ExplicdModel& model, const AnchorBank& anchors, std::span<const Image* const> images) {
    check_anchor_bank(model.option_counts, model.config.dim, anchors);
    ForwardResult r;
    r.features = encode_patches(model.encoder, model.config, patchify(model.config, images), images.size());
    r.encoding = encode_concepts(model.concepts, r.features);
    r.scores = similarity_profile(r.encoding.concepts, anchors, model.config.cosine_similarity);
    r.logits = classify(model.head, r.scores);
    return r;
}

Tensor forward(const BlackBoxModel& model, std::span<const Image* const> images) {
    Tensor f = encode_patches(model.encoder, model.config, patchify(model.config, images), images.size());
    Tensor pooled = mean_axis(f, 1);
    return add_trailing(matmul(pooled, transpose(model.head.weight)), model.head.bias);
}

std::vector<std::vector<int>> positives_for(const knowledge::KnowledgeBase& kb, std::span<const int> labels) {
    std::vector<std::vector<int>> out(kb.axis_count());
    for (std::size_t i = 0; i < kb.axis_count(); ++i) {
        out[i].reserve(labels.size());
        for (int label : labels) {
            if (label < 0 || static_cast<std::size_t>(label) >= kb.class_count()) {
                throw std::out_of_range("label " + std::to_string(label) + " is not a class index");
            }
            out[i].push_back(kb.axes()[i].class_to_option[static_cast<std::size_t>(label)]);
        }
    }
    return out;
}

std::size_t argmax(std::span<const double> values) {
    if (values.empty()) throw std::invalid_argument("argmax of empty range");
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) best = i;
    }
    return best;
}

} // namespace explicd::model
