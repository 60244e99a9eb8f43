#pragma once

// Text checkpoints: a header with the model configuration and the digests of
// the knowledge base and anchors, then one record per named tensor.

#include "explicd/model.hpp"

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace explicd::checkpoint {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TensorRecord {
    std::string name;
    ad::Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    std::string mode; // "explicd" or "blackbox"
    model::ModelConfig config;
    std::size_t classes = 0;
    std::string kb_digest;
    std::string anchor_digest; // empty for the black-box baseline
    std::vector<TensorRecord> tensors;
};

std::string config_to_json(const model::ModelConfig& cfg);
/// Missing keys keep their defaults; unknown keys raise ConfigError.
model::ModelConfig config_from_json(const std::string& text, model::ModelConfig base = {});

Checkpoint make_checkpoint(std::string mode, const model::ModelConfig& cfg, std::size_t classes,
                           std::string kb_digest, std::string anchor_digest,
                           const std::vector<model::NamedTensor>& params);
std::string serialize(const Checkpoint& ckpt);
Checkpoint parse(const std::string& text);
void save(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load(const std::filesystem::path& path);

/// Copies stored values into params by name. Every parameter must be present
/// with the same shape, and no record may be left unused.
void restore(const Checkpoint& ckpt, std::span<const model::NamedTensor> params);

} // namespace explicd::checkpoint
