#pragma once

// Procedural images whose per-criterion ground truth is known by
// construction: one coloured shape per image, with colour, shape, texture
// and size axes bound per class.

#include "explicd/image_io.hpp"
#include "explicd/knowledge.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace explicd::synth {

enum Axis : std::size_t { kColor = 0, kShape = 1, kTexture = 2, kSize = 3, kAxisCount = 4 };

/// Option vocabulary per axis, in index order.
const std::vector<std::vector<std::string>>& axis_options();
const std::vector<std::string>& axis_names();
/// Descriptive criterion phrase for an option, e.g. "uniform red region".
const std::string& option_phrase(std::size_t axis, std::size_t option);

struct ClassBinding {
    std::string name;
    std::array<int, kAxisCount> options{}; // index into axis_options()[axis]
};

struct SynthSpec {
    std::size_t height = 32;
    std::size_t width = 32;
    std::vector<ClassBinding> classes;
    double noise_std = 0.05;
    int center_jitter = 3;
    int radius_jitter = 1;
    std::uint64_t seed = 0;

    /// Eight classes over the four axes; every option is used by at least two
    /// classes and several classes share options.
    static SynthSpec defaults();

    /// Throws knowledge::ValidationError on duplicate bindings, unused
    /// options, or out-of-range option indices.
    void validate() const;
};

struct SyntheticSample {
    std::string id;
    Image image;
    int label = 0;
    std::vector<int> axis_labels;
    std::uint64_t seed = 0;
    bool test = false;
};

SyntheticSample render_sample(const SynthSpec& spec, int class_index, std::uint64_t sample_seed);

struct Dataset {
    std::vector<SyntheticSample> train;
    std::vector<SyntheticSample> test;
};

/// Class-balanced set with a per-class 80/20 split: the round(n/5) samples
/// with the smallest per-sample seeds (at least one) go to test.
Dataset gen_dataset(const SynthSpec& spec, std::size_t n_per_class, std::uint64_t split_seed);

knowledge::KnowledgeBase kb_from_spec(const SynthSpec& spec);

/// JSON Lines manifest text ({id, split, class, axis_labels, path} per sample).
std::string manifest_text(const Dataset& data);
/// Writes images/<id>.ppm and manifest.jsonl under dir; returns the manifest digest.
std::string write_dataset(const Dataset& data, const std::filesystem::path& dir);
/// Reads manifest.jsonl and the referenced images.
Dataset load_dataset(const std::filesystem::path& dir);

} // namespace explicd::synth
