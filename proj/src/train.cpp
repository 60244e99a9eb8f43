#include "explicd/train.hpp"

#include "explicd/rng.hpp"

#include <json.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <mutex>
#include <thread>

namespace explicd::train {

using ad::Tape;
using ad::Tensor;

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw model::ConfigError("learning rate must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw model::ConfigError("betas must be in [0,1)");
    if (!(eps > 0.0)) throw model::ConfigError("eps must be > 0");
    if (!(weight_decay >= 0.0)) throw model::ConfigError("weight decay must be >= 0");
    if (batch_size == 0) throw model::ConfigError("batch size must be >= 1");
    if (eval_interval == 0) throw model::ConfigError("eval interval must be >= 1");
}

bool OptimizerState::has(const std::string& name) const {
    return std::find(names.begin(), names.end(), name) != names.end();
}

void adamw_step(std::span<NamedTensor> params, OptimizerState& state, const TrainConfig& cfg) {
    if (state.names.empty()) {
        for (const auto& p : params) {
            state.names.push_back(p.name);
            state.first.emplace_back(p.tensor.size(), 0.0);
            state.second.emplace_back(p.tensor.size(), 0.0);
        }
    }
    if (state.names.size() != params.size()) throw std::logic_error("optimizer state does not match parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.names[i] != params[i].name || state.first[i].size() != params[i].tensor.size()) {
            throw std::logic_error("optimizer state mismatch for " + params[i].name);
        }
        if (!params[i].tensor.has_grad()) continue;
        for (double g : params[i].tensor.grad()) {
            if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + params[i].name);
        }
    }

    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    const double decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i].tensor;
        auto values = p.mutable_values();
        const bool has_grad = p.has_grad();
        auto grad = p.grad();
        auto& m = state.first[i];
        auto& v = state.second[i];
        for (std::size_t j = 0; j < values.size(); ++j) {
            const double g = has_grad ? grad[j] : 0.0;
            values[j] *= decay;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            values[j] -= cfg.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
        }
    }
}

std::string metrics_json(const Metrics& m, const std::vector<std::string>& axis_names) {
    nlohmann::ordered_json j;
    j["step"] = m.step;
    j["train_loss"] = m.train_loss;
    j["train_ce"] = m.train_ce;
    j["train_anchor"] = m.train_anchor;
    j["accuracy"] = m.accuracy;
    if (m.alignment) {
        if (axis_names.size() == m.alignment->size()) {
            nlohmann::ordered_json per_axis;
            for (std::size_t i = 0; i < axis_names.size(); ++i) per_axis[axis_names[i]] = (*m.alignment)[i];
            j["alignment"] = per_axis;
        } else {
            j["alignment"] = *m.alignment;
        }
        j["macro_alignment"] = m.macro_alignment;
    }
    return j.dump();
}

std::size_t eval_threads() {
    if (const char* env = std::getenv("EXPLICD_THREADS")) {
        char* end = nullptr;
        const long n = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && n >= 1) return static_cast<std::size_t>(n);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

constexpr std::size_t kEvalChunk = 64;

// Runs fn(begin, end) over fixed chunks of [0, n) on up to eval_threads()
// workers. Each chunk writes only its own output slots, so results do not
// depend on scheduling.
template <typename Fn>
void for_chunks(std::size_t n, Fn fn) {
    const std::size_t chunks = (n + kEvalChunk - 1) / kEvalChunk;
    const std::size_t workers = std::min(eval_threads(), chunks);
    auto run_chunk = [&](std::size_t c) { fn(c * kEvalChunk, std::min(n, (c + 1) * kEvalChunk)); };
    if (workers <= 1) {
        for (std::size_t c = 0; c < chunks; ++c) run_chunk(c);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr failure;
    std::mutex failure_mutex;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            try {
                for (std::size_t c = next++; c < chunks; c = next++) run_chunk(c);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

std::vector<const Image*> image_ptrs(std::span<const synth::SyntheticSample> samples, std::size_t begin,
                                     std::size_t end) {
    std::vector<const Image*> out;
    for (std::size_t i = begin; i < end; ++i) out.push_back(&samples[i].image);
    return out;
}

// Draws batches from per-epoch permutations of the training set using a
// stream that is independent of model initialization.
class BatchSampler {
public:
    BatchSampler(std::size_t n, std::uint64_t seed) : rng_(mix_seed(seed, 0x53485546464c45ULL)), order_(n) {
        if (n == 0) throw std::invalid_argument("training set is empty");
        reshuffle();
    }

    std::vector<std::size_t> next(std::size_t batch) {
        std::vector<std::size_t> out;
        out.reserve(batch);
        while (out.size() < batch) {
            if (pos_ == order_.size()) reshuffle();
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    void reshuffle() {
        std::iota(order_.begin(), order_.end(), 0);
        for (std::size_t i = order_.size(); i-- > 1;) {
            const auto j = static_cast<std::size_t>(rng_.uniform_int(0, static_cast<std::int64_t>(i)));
            std::swap(order_[i], order_[j]);
        }
        pos_ = 0;
    }

    SplitMix64 rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

// Keeps large activation buffers on the heap instead of mapping and
// unmapping them on every step.
void retain_freed_memory() {
#if defined(__GLIBC__)
    static const bool done = [] {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
        mallopt(M_TOP_PAD, 64 << 20);
        return true;
    }();
    (void)done;
#endif
}

void check_loss(double total, double ce, double anchor, std::size_t step) {
    if (!std::isfinite(total)) {
        throw NumericError("non-finite loss at step " + std::to_string(step) + ": total=" + std::to_string(total) +
                           " ce=" + std::to_string(ce) + " anchor=" + std::to_string(anchor));
    }
}

// Shared optimization loop; step_fn builds the loss for one batch on the
// active tape and returns its parts.
template <typename StepFn, typename EvalFn>
TrainResult optimize(std::vector<NamedTensor> params, const synth::Dataset& data, const TrainConfig& cfg,
                     StepFn step_fn, EvalFn eval_fn, const EvalCallback& on_eval) {
    cfg.validate();
    retain_freed_memory();
    TrainResult result;
    const auto start = std::chrono::steady_clock::now();
    if (cfg.max_steps == 0) return result;
    BatchSampler sampler(data.train.size(), cfg.seed);
    StepLoss window;
    std::size_t window_n = 0;
    for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
        const auto idx = sampler.next(cfg.batch_size);
        std::vector<const Image*> images;
        std::vector<int> labels;
        for (std::size_t i : idx) {
            images.push_back(&data.train[i].image);
            labels.push_back(data.train[i].label);
        }
        for (auto& p : params) p.tensor.zero_grad();
        StepLoss loss;
        {
            Tape tape;
            model::LossParts parts = step_fn(images, labels);
            loss = {parts.total.item(), parts.ce, parts.anchor};
            check_loss(loss.total, loss.ce, loss.anchor, step);
            tape.backward(parts.total);
        }
        adamw_step(params, result.optimizer, cfg);
        result.steps.push_back(loss);
        window.total += loss.total;
        window.ce += loss.ce;
        window.anchor += loss.anchor;
        ++window_n;

        if (step % cfg.eval_interval == 0 || step == cfg.max_steps) {
            Metrics m = eval_fn();
            m.step = step;
            const double inv = 1.0 / static_cast<double>(window_n);
            m.train_loss = window.total * inv;
            m.train_ce = window.ce * inv;
            m.train_anchor = window.anchor * inv;
            m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            result.log.push_back(m);
            if (on_eval) on_eval(m);
            window = {};
            window_n = 0;
        }
    }
    return result;
}

} // namespace

TrainResult train_explicd(model::ExplicdModel& model, const model::AnchorBank& anchors,
                          const knowledge::KnowledgeBase& kb, const synth::Dataset& data, const TrainConfig& cfg,
                          const EvalCallback& on_eval) {
    model.config.validate();
    auto step_fn = [&](const std::vector<const Image*>& images, const std::vector<int>& labels) {
        model::ForwardResult fr = model::forward(model, anchors, images);
        return model::total_loss(fr.logits, labels, fr.scores, model::positives_for(kb, labels), model.config.tau,
                                 model.config.lambda_anchor);
    };
    auto eval_fn = [&] { return data.test.empty() ? Metrics{} : evaluate(model, anchors, kb, data.test); };
    return optimize(model.parameters(), data, cfg, step_fn, eval_fn, on_eval);
}

TrainResult train_blackbox(model::BlackBoxModel& model, const synth::Dataset& data, const TrainConfig& cfg,
                           const EvalCallback& on_eval) {
    model.config.validate();
    auto step_fn = [&](const std::vector<const Image*>& images, const std::vector<int>& labels) {
        Tensor logits = model::forward(model, images);
        model::LossParts parts;
        parts.total = ad::cross_entropy(logits, labels);
        parts.ce = parts.total.item();
        return parts;
    };
    auto eval_fn = [&] { return data.test.empty() ? Metrics{} : evaluate(model, data.test); };
    return optimize(model.parameters(), data, cfg, step_fn, eval_fn, on_eval);
}

Metrics evaluate(const model::ExplicdModel& model, const model::AnchorBank& anchors,
                 const knowledge::KnowledgeBase& kb, std::span<const synth::SyntheticSample> samples) {
    if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
    const std::size_t k = kb.axis_count();
    std::vector<int> correct(samples.size(), 0);
    std::vector<int> aligned(samples.size() * k, 0);
    for_chunks(samples.size(), [&](std::size_t begin, std::size_t end) {
        const auto images = image_ptrs(samples, begin, end);
        model::ForwardResult fr = model::forward(model, anchors, images);
        const std::size_t n_cls = fr.logits.dim(1);
        auto logits = fr.logits.values();
        for (std::size_t r = 0; r < end - begin; ++r) {
            const auto& s = samples[begin + r];
            correct[begin + r] = model::argmax(logits.subspan(r * n_cls, n_cls)) == static_cast<std::size_t>(s.label);
            for (std::size_t i = 0; i < k; ++i) {
                const std::size_t n = fr.scores[i].dim(1);
                const auto best = model::argmax(fr.scores[i].values().subspan(r * n, n));
                aligned[(begin + r) * k + i] = best == static_cast<std::size_t>(s.axis_labels.at(i));
            }
        }
    });
    Metrics m;
    const double inv = 1.0 / static_cast<double>(samples.size());
    m.accuracy = std::accumulate(correct.begin(), correct.end(), 0) * inv;
    std::vector<double> per_axis(k, 0.0);
    for (std::size_t s = 0; s < samples.size(); ++s) {
        for (std::size_t i = 0; i < k; ++i) per_axis[i] += aligned[s * k + i];
    }
    for (double& a : per_axis) a *= inv;
    m.macro_alignment = std::accumulate(per_axis.begin(), per_axis.end(), 0.0) / static_cast<double>(k);
    m.alignment = std::move(per_axis);
    return m;
}

Metrics evaluate(const model::BlackBoxModel& model, std::span<const synth::SyntheticSample> samples) {
    if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
    std::vector<int> correct(samples.size(), 0);
    for_chunks(samples.size(), [&](std::size_t begin, std::size_t end) {
        const auto images = image_ptrs(samples, begin, end);
        Tensor logits = model::forward(model, images);
        const std::size_t n_cls = logits.dim(1);
        for (std::size_t r = 0; r < end - begin; ++r) {
            correct[begin + r] = model::argmax(logits.values().subspan(r * n_cls, n_cls)) ==
                                 static_cast<std::size_t>(samples[begin + r].label);
        }
    });
    Metrics m;
    m.accuracy = std::accumulate(correct.begin(), correct.end(), 0) / static_cast<double>(samples.size());
    return m;
}

std::vector<std::vector<double>> class_anchors(const knowledge::KnowledgeBase& kb, std::size_t dim) {
    std::vector<std::vector<double>> rows;
    for (std::size_t c = 0; c < kb.class_count(); ++c) {
        std::string text;
        for (std::size_t a = 0; a < kb.axis_count(); ++a) {
            if (a) text += "; ";
            text += kb.anchor_text(a, static_cast<std::size_t>(kb.axes()[a].class_to_option[c]));
        }
        rows.push_back(knowledge::hash_embed_text(text, dim));
    }
    return rows;
}

double zero_shot_eval(const model::VisualEncoderParams& encoder, const model::ModelConfig& cfg,
                      const std::vector<std::vector<double>>& class_anchor_rows,
                      std::span<const synth::SyntheticSample> samples) {
    if (samples.empty()) throw std::invalid_argument("zero_shot_eval: no samples");
    if (class_anchor_rows.empty()) throw std::invalid_argument("zero_shot_eval: no class anchors");
    for (const auto& row : class_anchor_rows) {
        if (row.size() != cfg.dim) throw ad::ShapeError("zero_shot_eval", "class anchor dimension differs from encoder");
    }
    std::vector<int> correct(samples.size(), 0);
    for_chunks(samples.size(), [&](std::size_t begin, std::size_t end) {
        const auto images = image_ptrs(samples, begin, end);
        Tensor f = model::encode_patches(encoder, cfg, model::patchify(cfg, images), images.size());
        Tensor pooled = ad::l2_normalize(ad::mean_axis(f, 1));
        auto pv = pooled.values();
        for (std::size_t r = 0; r < end - begin; ++r) {
            std::vector<double> sims;
            for (const auto& row : class_anchor_rows) {
                double d = 0.0;
                for (std::size_t i = 0; i < cfg.dim; ++i) d += pv[r * cfg.dim + i] * row[i];
                sims.push_back(d);
            }
            correct[begin + r] = model::argmax(sims) == static_cast<std::size_t>(samples[begin + r].label);
        }
    });
    return std::accumulate(correct.begin(), correct.end(), 0) / static_cast<double>(samples.size());
}

ad::GradCheckReport micro_gradcheck(std::uint64_t seed, double step, double tol) {
    knowledge::CriteriaAxis first{"tone", {"pale tone", "dark tone"}, {0, 1}};
    knowledge::CriteriaAxis second{"edge", {"smooth edge", "jagged edge"}, {1, 0}};
    const knowledge::KnowledgeBase kb({"alpha", "beta"}, {first, second});
    model::ModelConfig cfg;
    cfg.height = 8;
    cfg.width = 8;
    cfg.dim = 8;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.tau = 0.5;
    model::ExplicdModel m = model::ExplicdModel::init(cfg, kb, seed);
    const model::AnchorBank anchors(knowledge::embed_anchors(kb, cfg.dim));

    // Perturb every parameter away from the small default initialization.
    SplitMix64 rng(mix_seed(seed, 0x4752414443484bULL));
    for (auto& p : m.parameters()) {
        for (double& v : ad::Tensor(p.tensor).mutable_values()) v += 0.3 * rng.normal();
    }
    std::vector<Image> images(2, Image(3, 8, 8));
    for (auto& img : images) {
        for (double& v : img.pixels) v = rng.uniform();
    }
    const std::vector<const Image*> batch = {&images[0], &images[1]};
    const std::vector<int> labels = {0, 1};
    const auto positives = model::positives_for(kb, labels);
    auto loss_fn = [&] {
        model::ForwardResult fr = model::forward(m, anchors, batch);
        return model::total_loss(fr.logits, labels, fr.scores, positives, cfg.tau, 1.0).total;
    };
    return ad::finite_diff_check(loss_fn, m.parameters(), step, tol);
}

} // namespace explicd::train
