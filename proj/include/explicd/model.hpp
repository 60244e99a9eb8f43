#pragma once

// The concept-bottleneck network: a small vision transformer producing a
// patch feature map, K learnable concept tokens that read the map through one
// cross-attention layer, per-axis similarity to frozen text anchors, and a
// linear head over the concatenated similarity profile.

#include "explicd/autodiff.hpp"
#include "explicd/gradcheck.hpp"
#include "explicd/image_io.hpp"
#include "explicd/knowledge.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace explicd::model {

using ad::NamedTensor;
using ad::Tensor;

/// Raised for inconsistent model or training configuration.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
    std::size_t channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t patch = 4;
    std::size_t dim = 64;
    std::size_t depth = 2;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 2;
    double tau = 0.07;
    double lambda_anchor = 1.0;
    /// Normalize concept tokens before the anchor dot product (cosine scores).
    /// false selects the raw dot-product variant.
    bool cosine_similarity = true;

    std::size_t grid_h() const { return height / patch; }
    std::size_t grid_w() const { return width / patch; }
    std::size_t num_patches() const { return grid_h() * grid_w(); }
    std::size_t patch_pixels() const { return channels * patch * patch; }

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct TransformerBlock {
    Tensor ln1_gain, ln1_bias;
    Tensor qkv_weight, qkv_bias;
    Tensor proj_weight, proj_bias;
    Tensor ln2_gain, ln2_bias;
    Tensor fc1_weight, fc1_bias;
    Tensor fc2_weight, fc2_bias;
};

struct VisualEncoderParams {
    Tensor patch_weight; // patch_pixels x d
    Tensor patch_bias;   // d
    Tensor pos_embed;    // S x d
    std::vector<TransformerBlock> blocks;
    Tensor final_gain, final_bias;
};

struct ConceptModuleParams {
    Tensor tokens; // K x d
    Tensor query, key, value, output; // d x d each
};

struct HeadParams {
    Tensor weight; // N x (sum n_i)
    Tensor bias;   // N
};

/// Deterministic per-tensor initialization: each weight tensor draws normals
/// (std 0.02) from a splitmix64 stream seeded by (seed, tensor name);
/// biases are zero and layer-norm gains one.
VisualEncoderParams init_encoder(const ModelConfig& cfg, std::uint64_t seed);
ConceptModuleParams init_concepts(const ModelConfig& cfg, std::size_t axes, std::uint64_t seed);
HeadParams init_head(std::size_t classes, std::size_t inputs, std::uint64_t seed, const std::string& prefix = "head");

void collect(const VisualEncoderParams& p, std::vector<NamedTensor>& out);

class ExplicdModel {
public:
    static ExplicdModel init(const ModelConfig& cfg, const knowledge::KnowledgeBase& kb, std::uint64_t seed);

    ModelConfig config;
    VisualEncoderParams encoder;
    ConceptModuleParams concepts;
    HeadParams head;
    /// Options per axis, in knowledge-base order.
    std::vector<std::size_t> option_counts;

    /// Every trainable tensor, in a fixed order, with stable names.
    std::vector<NamedTensor> parameters() const;
};

class BlackBoxModel {
public:
    static BlackBoxModel init(const ModelConfig& cfg, std::size_t classes, std::uint64_t seed);

    ModelConfig config;
    VisualEncoderParams encoder;
    HeadParams head; // N x d

    std::vector<NamedTensor> parameters() const;
};

/// Frozen anchors as constant tensors, one [d, n_i] matrix per axis.
/// Built once; never part of any parameter list.
class AnchorBank {
public:
    explicit AnchorBank(const knowledge::AnchorSet& anchors);
    std::size_t dim() const noexcept { return dim_; }
    std::size_t axis_count() const noexcept { return transposed_.size(); }
    const Tensor& transposed(std::size_t axis) const { return transposed_.at(axis); }

private:
    std::size_t dim_;
    std::vector<Tensor> transposed_;
};

/// Flattens a batch of images into [B*S, patch_pixels] rows (patch-major,
/// channel then row then column inside a patch).
Tensor patchify(const ModelConfig& cfg, std::span<const Image* const> images);

/// Patch rows [B*S, P] -> feature map [B, S, d].
Tensor encode_patches(const VisualEncoderParams& params, const ModelConfig& cfg, const Tensor& patches,
                      std::size_t batch);
/// Single image -> feature map [S, d].
Tensor encode_image(const VisualEncoderParams& params, const ModelConfig& cfg, const Image& image);

struct ConceptEncoding {
    Tensor concepts;  // [B, K, d] (or [K, d] for a rank-2 feature map)
    Tensor attention; // [B, K, S] (or [K, S])
};

/// Single-head cross-attention: queries = tokens*W_q, keys/values = fmap*W_k,
/// fmap*W_v, attention = softmax(QK^T / sqrt(d)), concepts = (attention V) W_o.
ConceptEncoding encode_concepts(const ConceptModuleParams& cm, const Tensor& fmap);

/// Per-axis scores [B, n_i] (or [n_i] for rank-2 concepts):
/// score(i,j) = <normalize(concept_i), anchor_ij>, or the raw dot product
/// when cosine is false.
std::vector<Tensor> similarity_profile(const Tensor& concepts, const AnchorBank& anchors, bool cosine = true);

/// -log softmax(scores / tau)[positive], averaged over rows. Accepts [n] or [B, n].
Tensor anchor_loss(const Tensor& scores, std::span<const int> positives, double tau);

/// logits = W concat(profiles) + bias. Profiles are [B, n_i] or [n_i].
Tensor classify(const HeadParams& head, const std::vector<Tensor>& profiles);

struct LossParts {
    Tensor total;
    double ce = 0.0;
    double anchor = 0.0; // lambda * (1/K) * sum of per-axis anchor losses
};

/// CE(logits, labels) + lambda * (1/K) * sum_i anchor_loss_i.
/// positives[i][b] is the ground-truth option of row b on axis i.
LossParts total_loss(const Tensor& logits, std::span<const int> labels, const std::vector<Tensor>& axis_scores,
                     const std::vector<std::vector<int>>& positives, double tau, double lambda_anchor);

struct ForwardResult {
    Tensor features;  // [B, S, d]
    ConceptEncoding encoding;
    std::vector<Tensor> scores; // [B, n_i] per axis
    Tensor logits;    // [B, N]
};

ForwardResult forward(const ExplicdModel& model, const AnchorBank& anchors, std::span<const Image* const> images);
/// Black-box logits [B, N] from mean-pooled features.
Tensor forward(const BlackBoxModel& model, std::span<const Image* const> images);

/// Positive option per axis for each label: out[i][b].
std::vector<std::vector<int>> positives_for(const knowledge::KnowledgeBase& kb, std::span<const int> labels);

/// Lowest index among the maxima.
std::size_t argmax(std::span<const double> values);

// ---------------------------------------------------------------------------
// Explanations

struct AxisExplanation {
    std::string name;
    std::vector<std::string> options;
    std::vector<double> scores;
    std::size_t best = 0;
    std::vector<double> attention; // S weights of this axis' concept token
};

struct ExplanationReport {
    std::vector<AxisExplanation> axes;
    std::vector<double> logits;
    std::size_t predicted = 0;
    std::string predicted_name;
    std::vector<double> profile;
    /// W[predicted] (elementwise) profile; sums with bias[predicted] to the logit.
    std::vector<double> contributions;
    double bias = 0.0;
    std::vector<double> mean_attention; // mean over axes, S weights
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
};

ExplanationReport explain(const ExplicdModel& model, const AnchorBank& anchors, const knowledge::KnowledgeBase& kb,
                          const Image& image);

/// Nearest-neighbour upsampling of a patch-grid map to height x width, then
/// min-max scaling to [0, 255] (a constant map becomes all zeros).
GrayImage heatmap(std::span<const double> grid_values, std::size_t grid_h, std::size_t grid_w, std::size_t height,
                  std::size_t width);

/// JSON document for a report (scores, options, contributions, prediction).
std::string report_json(const ExplanationReport& report, const std::string& sample_id = "");

} // namespace explicd::model
