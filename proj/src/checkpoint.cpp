#include "explicd/checkpoint.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace explicd::checkpoint {

namespace {

constexpr const char* kMagic = "EXPLICD-CKPT 1";

std::string shape_text(const ad::Shape& shape) {
    std::string out;
    for (std::size_t i = 0; i < shape.size(); ++i) out += (i ? " " : "") + std::to_string(shape[i]);
    return out;
}

std::string next_line(std::istringstream& in, const char* what) {
    std::string line;
    if (!std::getline(in, line)) throw CheckpointError(std::string("checkpoint truncated: missing ") + what);
    return line;
}

std::string field(const std::string& line, const std::string& key) {
    if (line.rfind(key + " ", 0) != 0 && line != key) {
        throw CheckpointError("checkpoint: expected '" + key + "', found '" + line + "'");
    }
    return line.size() > key.size() ? line.substr(key.size() + 1) : "";
}

} // namespace

std::string config_to_json(const model::ModelConfig& cfg) {
    nlohmann::ordered_json j;
    j["channels"] = cfg.channels;
    j["height"] = cfg.height;
    j["width"] = cfg.width;
    j["patch"] = cfg.patch;
    j["dim"] = cfg.dim;
    j["depth"] = cfg.depth;
    j["heads"] = cfg.heads;
    j["mlp_ratio"] = cfg.mlp_ratio;
    j["tau"] = cfg.tau;
    j["lambda_anchor"] = cfg.lambda_anchor;
    j["cosine_similarity"] = cfg.cosine_similarity;
    return j.dump();
}

model::ModelConfig config_from_json(const std::string& text, model::ModelConfig base) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw model::ConfigError(std::string("model config: ") + e.what());
    }
    if (!j.is_object()) throw model::ConfigError("model config must be a JSON object");
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "channels") base.channels = value.get<std::size_t>();
            else if (key == "height") base.height = value.get<std::size_t>();
            else if (key == "width") base.width = value.get<std::size_t>();
            else if (key == "patch") base.patch = value.get<std::size_t>();
            else if (key == "dim") base.dim = value.get<std::size_t>();
            else if (key == "depth") base.depth = value.get<std::size_t>();
            else if (key == "heads") base.heads = value.get<std::size_t>();
            else if (key == "mlp_ratio") base.mlp_ratio = value.get<std::size_t>();
            else if (key == "tau") base.tau = value.get<double>();
            else if (key == "lambda_anchor") base.lambda_anchor = value.get<double>();
            else if (key == "cosine_similarity") base.cosine_similarity = value.get<bool>();
            else throw model::ConfigError("model config: unknown key '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw model::ConfigError(std::string("model config: ") + e.what());
    }
    return base;
}

Checkpoint make_checkpoint(std::string mode, const model::ModelConfig& cfg, std::size_t classes,
                           std::string kb_digest, std::string anchor_digest,
                           const std::vector<model::NamedTensor>& params) {
    Checkpoint c;
    c.mode = std::move(mode);
    c.config = cfg;
    c.classes = classes;
    c.kb_digest = std::move(kb_digest);
    c.anchor_digest = std::move(anchor_digest);
    for (const auto& p : params) c.tensors.push_back({p.name, p.tensor.shape(), p.tensor.to_vector()});
    return c;
}

std::string serialize(const Checkpoint& ckpt) {
    std::string out = std::string(kMagic) + "\n";
    out += "config " + config_to_json(ckpt.config) + "\n";
    out += "mode " + ckpt.mode + "\n";
    out += "classes " + std::to_string(ckpt.classes) + "\n";
    out += "kb_digest " + ckpt.kb_digest + "\n";
    out += "anchor_digest " + ckpt.anchor_digest + "\n";
    out += "tensors " + std::to_string(ckpt.tensors.size()) + "\n";
    char buf[32];
    for (const auto& t : ckpt.tensors) {
        out += "name " + t.name + "\n";
        out += "shape " + shape_text(t.shape) + "\n";
        for (std::size_t i = 0; i < t.values.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%.17g", t.values[i]);
            out += (i ? " " : "") + std::string(buf);
        }
        out += "\n";
    }
    return out;
}

Checkpoint parse(const std::string& text) {
    std::istringstream in(text);
    if (next_line(in, "header") != kMagic) throw CheckpointError("not an explicd checkpoint (bad header)");
    Checkpoint c;
    c.config = config_from_json(field(next_line(in, "config"), "config"));
    c.config.validate();
    c.mode = field(next_line(in, "mode"), "mode");
    if (c.mode != "explicd" && c.mode != "blackbox") throw CheckpointError("checkpoint: unknown mode '" + c.mode + "'");
    try {
        c.classes = std::stoul(field(next_line(in, "classes"), "classes"));
    } catch (const std::logic_error&) {
        throw CheckpointError("checkpoint: bad class count");
    }
    c.kb_digest = field(next_line(in, "kb_digest"), "kb_digest");
    c.anchor_digest = field(next_line(in, "anchor_digest"), "anchor_digest");
    std::size_t count = 0;
    try {
        count = std::stoul(field(next_line(in, "tensors"), "tensors"));
    } catch (const std::logic_error&) {
        throw CheckpointError("checkpoint: bad tensor count");
    }
    for (std::size_t t = 0; t < count; ++t) {
        TensorRecord r;
        r.name = field(next_line(in, "tensor name"), "name");
        std::istringstream shape(field(next_line(in, "tensor shape"), "shape"));
        std::size_t extent = 0, numel = 1;
        while (shape >> extent) {
            r.shape.push_back(extent);
            numel *= extent;
        }
        std::istringstream values(next_line(in, "tensor values"));
        double v = 0.0;
        while (values >> v) r.values.push_back(v);
        if (!values.eof() || r.values.size() != numel) {
            throw CheckpointError("checkpoint tensor " + r.name + ": expected " + std::to_string(numel) +
                                  " values, found " + std::to_string(r.values.size()));
        }
        c.tensors.push_back(std::move(r));
    }
    return c;
}

void save(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << serialize(ckpt);
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

void restore(const Checkpoint& ckpt, std::span<const model::NamedTensor> params) {
    std::set<std::string> used;
    for (const auto& p : params) {
        const TensorRecord* rec = nullptr;
        for (const auto& r : ckpt.tensors) {
            if (r.name == p.name) rec = &r;
        }
        if (!rec) throw CheckpointError("checkpoint has no tensor " + p.name);
        if (rec->shape != p.tensor.shape()) {
            throw CheckpointError("checkpoint tensor " + p.name + " has shape [" + shape_text(rec->shape) +
                                  "], model expects [" + shape_text(p.tensor.shape()) + "]");
        }
        auto dst = ad::Tensor(p.tensor).mutable_values();
        std::copy(rec->values.begin(), rec->values.end(), dst.begin());
        used.insert(p.name);
    }
    for (const auto& r : ckpt.tensors) {
        if (!used.count(r.name)) throw CheckpointError("checkpoint tensor " + r.name + " is not used by the model");
    }
}

} // namespace explicd::checkpoint
