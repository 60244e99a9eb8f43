#include "explicd/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

namespace explicd::model {

ExplanationReport explain(const ExplicdModel& model, const AnchorBank& anchors, const knowledge::KnowledgeBase& kb,
                          const Image& image) {
    if (kb.axis_count() != model.option_counts.size() || kb.class_count() != model.head.bias.dim(0)) {
        throw ad::ShapeError("explain", "knowledge base does not match the model");
    }
    const Image* one[] = {&image};
    ForwardResult fr = forward(model, anchors, one);

    ExplanationReport rep;
    rep.grid_h = model.config.grid_h();
    rep.grid_w = model.config.grid_w();
    const std::size_t s = model.config.num_patches();
    const std::size_t k = kb.axis_count();
    auto attention = fr.encoding.attention.values(); // [1, K, S]
    rep.mean_attention.assign(s, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        AxisExplanation ax;
        ax.name = kb.axes()[i].name;
        ax.options = kb.axes()[i].options;
        ax.scores = fr.scores[i].to_vector();
        ax.best = argmax(ax.scores);
        ax.attention.assign(attention.begin() + static_cast<std::ptrdiff_t>(i * s),
                            attention.begin() + static_cast<std::ptrdiff_t>((i + 1) * s));
        for (std::size_t j = 0; j < s; ++j) rep.mean_attention[j] += ax.attention[j] / static_cast<double>(k);
        rep.profile.insert(rep.profile.end(), ax.scores.begin(), ax.scores.end());
        rep.axes.push_back(std::move(ax));
    }
    rep.logits = fr.logits.to_vector();
    rep.predicted = argmax(rep.logits);
    rep.predicted_name = kb.classes()[rep.predicted];
    const std::size_t cols = rep.profile.size();
    auto w = model.head.weight.values();
    rep.contributions.resize(cols);
    for (std::size_t j = 0; j < cols; ++j) rep.contributions[j] = w[rep.predicted * cols + j] * rep.profile[j];
    rep.bias = model.head.bias[rep.predicted];
    return rep;
}

GrayImage heatmap(std::span<const double> grid_values, std::size_t grid_h, std::size_t grid_w, std::size_t height,
                  std::size_t width) {
    if (grid_values.size() != grid_h * grid_w || grid_h == 0 || grid_w == 0 || height == 0 || width == 0) {
        throw std::invalid_argument("heatmap: grid of " + std::to_string(grid_values.size()) + " values is not " +
                                    std::to_string(grid_h) + "x" + std::to_string(grid_w));
    }
    const auto [lo_it, hi_it] = std::minmax_element(grid_values.begin(), grid_values.end());
    const double lo = *lo_it, range = *hi_it - *lo_it;
    GrayImage out{height, width, std::vector<std::uint8_t>(height * width, 0)};
    for (std::size_t y = 0; y < height; ++y) {
        const std::size_t gy = y * grid_h / height;
        for (std::size_t x = 0; x < width; ++x) {
            const std::size_t gx = x * grid_w / width;
            const double v = range > 0.0 ? (grid_values[gy * grid_w + gx] - lo) / range : 0.0;
            out.pixels[y * width + x] = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
    }
    return out;
}

std::string report_json(const ExplanationReport& report, const std::string& sample_id) {
    using json = nlohmann::ordered_json;
    json doc;
    if (!sample_id.empty()) doc["sample_id"] = sample_id;
    doc["predicted_class"] = report.predicted_name;
    doc["predicted_index"] = report.predicted;
    doc["logits"] = report.logits;
    doc["bias"] = report.bias;
    double total = report.bias;
    for (double c : report.contributions) total += c;
    doc["contribution_sum"] = total;
    json axes = json::array();
    std::size_t offset = 0;
    for (const auto& ax : report.axes) {
        json ja;
        ja["name"] = ax.name;
        json options = json::array();
        for (std::size_t o = 0; o < ax.options.size(); ++o) {
            options.push_back({{"text", ax.options[o]},
                               {"score", ax.scores[o]},
                               {"contribution", report.contributions[offset + o]}});
        }
        ja["options"] = options;
        ja["best_index"] = ax.best;
        ja["best_option"] = ax.options[ax.best];
        axes.push_back(ja);
        offset += ax.options.size();
    }
    doc["axes"] = axes;
    doc["contributions"] = report.contributions;
    doc["grid"] = {report.grid_h, report.grid_w};
    return doc.dump(2) + "\n";
}

} // namespace explicd::model
