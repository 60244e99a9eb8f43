#include "explicd/synthdata.hpp"

#include "explicd/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace explicd::synth {

using knowledge::ValidationError;

const std::vector<std::vector<std::string>>& axis_options() {
    static const std::vector<std::vector<std::string>> options = {
        {"red", "green", "blue"},
        {"circle", "square", "triangle"},
        {"solid", "striped"},
        {"small", "large"},
    };
    return options;
}

const std::vector<std::string>& axis_names() {
    static const std::vector<std::string> names = {"color", "shape", "texture", "size"};
    return names;
}

const std::string& option_phrase(std::size_t axis, std::size_t option) {
    static const std::vector<std::vector<std::string>> phrases = {
        {"uniform red region", "uniform green region", "uniform blue region"},
        {"circular boundary", "square boundary with straight edges", "triangular boundary with a pointed apex"},
        {"solid homogeneous fill", "striped pattern of alternating rows"},
        {"small compact object", "large extended object"},
    };
    return phrases.at(axis).at(option);
}

SynthSpec SynthSpec::defaults() {
    SynthSpec s;
    //            color shape texture size
    s.classes = {
        {"red_circle", {0, 0, 0, 0}},   {"red_square", {0, 1, 1, 1}},   {"red_triangle", {0, 2, 0, 1}},
        {"green_circle", {1, 0, 1, 1}}, {"green_square", {1, 1, 0, 0}}, {"green_triangle", {1, 2, 1, 0}},
        {"blue_circle", {2, 0, 0, 1}},  {"blue_square", {2, 1, 1, 0}},
    };
    return s;
}

void SynthSpec::validate() const {
    if (classes.size() < 2) throw ValidationError("synthetic spec needs at least 2 classes");
    if (height < 8 || width < 8) throw ValidationError("synthetic images must be at least 8x8");
    if (!(noise_std >= 0.0)) throw ValidationError("noise_std must be >= 0");
    if (center_jitter < 0 || radius_jitter < 0) throw ValidationError("jitter must be >= 0");
    std::set<std::array<int, kAxisCount>> tuples;
    std::set<std::string> names;
    for (const auto& c : classes) {
        if (!names.insert(c.name).second) throw ValidationError("duplicate class name '" + c.name + "'");
        if (!tuples.insert(c.options).second) throw ValidationError("class '" + c.name + "' repeats another binding");
        for (std::size_t a = 0; a < kAxisCount; ++a) {
            if (c.options[a] < 0 || static_cast<std::size_t>(c.options[a]) >= axis_options()[a].size()) {
                throw ValidationError("class '" + c.name + "' has invalid option on axis " + axis_names()[a]);
            }
        }
    }
    for (std::size_t a = 0; a < kAxisCount; ++a) {
        for (std::size_t o = 0; o < axis_options()[a].size(); ++o) {
            const bool used = std::any_of(classes.begin(), classes.end(),
                                          [&](const ClassBinding& c) { return c.options[a] == static_cast<int>(o); });
            if (!used) {
                throw ValidationError("axis '" + axis_names()[a] + "' option '" + axis_options()[a][o] +
                                      "' is bound to no class");
            }
        }
    }
}

namespace {

bool inside(int shape, int x, int y, int cx, int cy, int r) {
    const int dx = x - cx, dy = y - cy;
    switch (shape) {
    case 0:
        return dx * dx + dy * dy <= r * r;
    case 1:
        return std::abs(dx) <= r && std::abs(dy) <= r;
    default: {
        // Apex at (cx, cy - r), base on row cy + r with half-width r.
        if (dy < -r || dy > r) return false;
        const double half = static_cast<double>(r) * static_cast<double>(dy + r) / (2.0 * r);
        return std::abs(dx) <= half;
    }
    }
}

} // namespace

SyntheticSample render_sample(const SynthSpec& spec, int class_index, std::uint64_t sample_seed) {
    if (class_index < 0 || static_cast<std::size_t>(class_index) >= spec.classes.size()) {
        throw std::out_of_range("class index " + std::to_string(class_index) + " out of range");
    }
    const auto& binding = spec.classes[static_cast<std::size_t>(class_index)];
    SplitMix64 rng(mix_seed(mix_seed(spec.seed, sample_seed), static_cast<std::uint64_t>(class_index)));

    const int w = static_cast<int>(spec.width), h = static_cast<int>(spec.height);
    const int base = binding.options[kSize] == 0 ? 6 : 12;
    const int r = base + static_cast<int>(rng.uniform_int(-spec.radius_jitter, spec.radius_jitter));
    int cx = w / 2, cy = h / 2;
    bool placed = false;
    for (int attempt = 0; attempt < 8 && !placed; ++attempt) {
        const int jx = w / 2 + static_cast<int>(rng.uniform_int(-spec.center_jitter, spec.center_jitter));
        const int jy = h / 2 + static_cast<int>(rng.uniform_int(-spec.center_jitter, spec.center_jitter));
        if (jx - r >= 0 && jx + r <= w - 1 && jy - r >= 0 && jy + r <= h - 1) {
            cx = jx;
            cy = jy;
            placed = true;
        }
    }

    Image img(3, spec.height, spec.width);
    const auto channel = static_cast<std::size_t>(binding.options[kColor]);
    const bool striped = binding.options[kTexture] == 1;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (inside(binding.options[kShape], x, y, cx, cy, r)) {
                img.at(channel, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
                    striped && (y % 2 == 1) ? 0.6 : 1.0;
            }
        }
    }
    for (double& v : img.pixels) {
        if (spec.noise_std > 0.0) v += spec.noise_std * rng.normal();
        v = static_cast<double>(to_byte(v)) / 255.0;
    }

    SyntheticSample s;
    s.image = std::move(img);
    s.label = class_index;
    s.axis_labels.assign(binding.options.begin(), binding.options.end());
    s.seed = sample_seed;
    return s;
}

Dataset gen_dataset(const SynthSpec& spec, std::size_t n_per_class, std::uint64_t split_seed) {
    spec.validate();
    if (n_per_class < 2) throw ValidationError("n_per_class must be >= 2, got " + std::to_string(n_per_class));
    const std::size_t n_test = std::max<std::size_t>(1, (n_per_class + 2) / 5);
    Dataset data;
    for (std::size_t c = 0; c < spec.classes.size(); ++c) {
        std::vector<std::uint64_t> seeds(n_per_class);
        for (std::size_t k = 0; k < n_per_class; ++k) seeds[k] = mix_seed(mix_seed(split_seed, c), k);
        std::vector<std::size_t> order(n_per_class);
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return seeds[a] < seeds[b]; });
        std::vector<bool> is_test(n_per_class, false);
        for (std::size_t i = 0; i < n_test; ++i) is_test[order[i]] = true;
        for (std::size_t k = 0; k < n_per_class; ++k) {
            SyntheticSample s = render_sample(spec, static_cast<int>(c), seeds[k]);
            char suffix[32];
            std::snprintf(suffix, sizeof suffix, "-%04zu", k);
            s.id = spec.classes[c].name + suffix;
            s.test = is_test[k];
            (s.test ? data.test : data.train).push_back(std::move(s));
        }
    }
    return data;
}

knowledge::KnowledgeBase kb_from_spec(const SynthSpec& spec) {
    spec.validate();
    std::vector<std::string> classes;
    for (const auto& c : spec.classes) classes.push_back(c.name);
    std::vector<knowledge::CriteriaAxis> axes;
    for (std::size_t a = 0; a < kAxisCount; ++a) {
        knowledge::CriteriaAxis axis;
        axis.name = axis_names()[a];
        for (std::size_t o = 0; o < axis_options()[a].size(); ++o) axis.options.push_back(option_phrase(a, o));
        for (const auto& c : spec.classes) axis.class_to_option.push_back(c.options[a]);
        axes.push_back(std::move(axis));
    }
    return knowledge::KnowledgeBase(std::move(classes), std::move(axes));
}

namespace {

std::vector<const SyntheticSample*> manifest_order(const Dataset& data) {
    std::vector<const SyntheticSample*> all;
    for (const auto& s : data.train) all.push_back(&s);
    for (const auto& s : data.test) all.push_back(&s);
    std::stable_sort(all.begin(), all.end(), [](const SyntheticSample* a, const SyntheticSample* b) {
        return a->label != b->label ? a->label < b->label : a->id < b->id;
    });
    return all;
}

} // namespace

std::string manifest_text(const Dataset& data) {
    using json = nlohmann::ordered_json;
    std::string out;
    for (const SyntheticSample* s : manifest_order(data)) {
        json j;
        j["id"] = s->id;
        j["split"] = s->test ? "test" : "train";
        j["class"] = s->label;
        j["axis_labels"] = s->axis_labels;
        j["path"] = "images/" + s->id + ".ppm";
        out += j.dump() + "\n";
    }
    return out;
}

std::string write_dataset(const Dataset& data, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "images");
    for (const SyntheticSample* s : manifest_order(data)) write_ppm(s->image, dir / "images" / (s->id + ".ppm"));
    const std::string text = manifest_text(data);
    std::ofstream out(dir / "manifest.jsonl", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.jsonl").string());
    out << text;
    if (!out) throw std::runtime_error("write failed for " + (dir / "manifest.jsonl").string());
    return knowledge::hex64(fnv1a64(text));
}

Dataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.jsonl", std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + (dir / "manifest.jsonl").string());
    Dataset data;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto j = nlohmann::json::parse(line);
            SyntheticSample s;
            s.id = j.at("id").get<std::string>();
            s.label = j.at("class").get<int>();
            s.axis_labels = j.at("axis_labels").get<std::vector<int>>();
            const auto split = j.at("split").get<std::string>();
            if (split != "train" && split != "test") throw ValidationError("unknown split '" + split + "'");
            s.test = split == "test";
            s.image = read_ppm(dir / j.at("path").get<std::string>());
            (s.test ? data.test : data.train).push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("manifest line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return data;
}

} // namespace explicd::synth
