#pragma once

#include "explicd/model.hpp"
#include "explicd/synthdata.hpp"

#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace explicd::train {

using model::NamedTensor;

/// Non-finite loss or gradient during optimization.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    std::size_t batch_size = 32;
    std::size_t max_steps = 2000;
    std::size_t eval_interval = 200;
    std::uint64_t seed = 1;

    void validate() const;
};

/// First/second moment buffers keyed by parameter name. Only tensors handed
/// to the optimizer get buffers.
struct OptimizerState {
    std::vector<std::string> names;
    std::vector<std::vector<double>> first;
    std::vector<std::vector<double>> second;
    std::size_t step = 0;

    bool has(const std::string& name) const;
};

/// One AdamW update: decoupled decay p -= lr*wd*p, then bias-corrected Adam
/// step. Parameters without an accumulated gradient use a zero gradient.
/// Throws NumericError on a non-finite gradient.
void adamw_step(std::span<NamedTensor> params, OptimizerState& state, const TrainConfig& cfg);

struct Metrics {
    std::size_t step = 0;
    double train_loss = 0.0;
    double train_ce = 0.0;
    double train_anchor = 0.0;
    double accuracy = 0.0;
    std::optional<std::vector<double>> alignment; // per axis; absent for the black-box baseline
    double macro_alignment = 0.0;
    double wall_seconds = 0.0;
};

/// One JSON object on one line; wall time is deliberately omitted so reruns
/// are byte-identical.
std::string metrics_json(const Metrics& m, const std::vector<std::string>& axis_names = {});

struct StepLoss {
    double total = 0.0;
    double ce = 0.0;
    double anchor = 0.0;
};

struct TrainResult {
    std::vector<StepLoss> steps;
    std::vector<Metrics> log;
    OptimizerState optimizer;
};

using EvalCallback = std::function<void(const Metrics&)>;

/// AdamW on CE + lambda*(1/K)*sum anchor losses. Anchors are constants of the
/// graph and never reach the optimizer.
TrainResult train_explicd(model::ExplicdModel& model, const model::AnchorBank& anchors,
                          const knowledge::KnowledgeBase& kb, const synth::Dataset& data, const TrainConfig& cfg,
                          const EvalCallback& on_eval = {});

/// Same encoder, mean-pooled features, N-way linear head, CE only.
TrainResult train_blackbox(model::BlackBoxModel& model, const synth::Dataset& data, const TrainConfig& cfg,
                           const EvalCallback& on_eval = {});

/// Classification accuracy plus per-axis alignment accuracy (argmax cosine
/// option vs ground-truth option). Throws std::invalid_argument on an empty set.
Metrics evaluate(const model::ExplicdModel& model, const model::AnchorBank& anchors,
                 const knowledge::KnowledgeBase& kb, std::span<const synth::SyntheticSample> samples);
Metrics evaluate(const model::BlackBoxModel& model, std::span<const synth::SyntheticSample> samples);

/// Per-class anchor: hash embedding of the class's "axis: option" texts joined.
std::vector<std::vector<double>> class_anchors(const knowledge::KnowledgeBase& kb, std::size_t dim);

/// Predicts argmax cosine between the L2-normalized mean-pooled feature and
/// each class anchor; returns accuracy.
double zero_shot_eval(const model::VisualEncoderParams& encoder, const model::ModelConfig& cfg,
                      const std::vector<std::vector<double>>& class_anchor_rows,
                      std::span<const synth::SyntheticSample> samples);

/// Finite-difference check of the full Explicd loss on a micro-model
/// (N=2, K=2, n=[2,2], d=8, S=4, depth 1, batch of 2 random 3x8x8 images),
/// one entry per parameter tensor.
ad::GradCheckReport micro_gradcheck(std::uint64_t seed = 1, double step = 1e-5, double tol = 1e-4);

/// Worker count for evaluation: EXPLICD_THREADS if set (>= 1), else hardware concurrency.
std::size_t eval_threads();

} // namespace explicd::train
