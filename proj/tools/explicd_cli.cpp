#include "explicd/checkpoint.hpp"
#include "explicd/model.hpp"
#include "explicd/synthdata.hpp"
#include "explicd/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using namespace explicd;
using json = nlohmann::ordered_json;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string safe_name(const std::string& name) {
    std::string out;
    for (char c : name) out += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
    return out;
}

fs::path kb_path_for(const std::string& kb, const std::string& data) {
    if (!kb.empty()) return kb;
    if (data.empty()) throw knowledge::ValidationError("either --kb or --data is required");
    return fs::path(data) / "kb.json";
}

// Model, optimizer and mode merged from defaults, an optional flat JSON
// config file, and command-line flags, in that order of precedence.
struct RunSettings {
    std::string mode = "explicd";
    model::ModelConfig model;
    train::TrainConfig train;
};

void apply_config_file(RunSettings& rs, const fs::path& path) {
    json j;
    try {
        j = json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw knowledge::ValidationError("config " + path.string() + ": " + e.what());
    }
    if (!j.is_object()) throw knowledge::ValidationError("config " + path.string() + " must be a JSON object");
    json model_keys = json::object();
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "mode") rs.mode = value.get<std::string>();
            else if (key == "lr") rs.train.lr = value.get<double>();
            else if (key == "beta1") rs.train.beta1 = value.get<double>();
            else if (key == "beta2") rs.train.beta2 = value.get<double>();
            else if (key == "eps") rs.train.eps = value.get<double>();
            else if (key == "weight_decay") rs.train.weight_decay = value.get<double>();
            else if (key == "batch_size") rs.train.batch_size = value.get<std::size_t>();
            else if (key == "steps") rs.train.max_steps = value.get<std::size_t>();
            else if (key == "eval_interval") rs.train.eval_interval = value.get<std::size_t>();
            else if (key == "seed") rs.train.seed = value.get<std::uint64_t>();
            else model_keys[key] = value;
        }
    } catch (const json::exception& e) {
        throw knowledge::ValidationError("config " + path.string() + ": " + e.what());
    }
    rs.model = checkpoint::config_from_json(model_keys.dump(), rs.model);
}

struct TrainFlags {
    std::string data, kb, anchors, out, config;
    std::optional<std::string> mode;
    std::optional<double> lambda_anchor, tau, lr, weight_decay;
    std::optional<std::size_t> steps, batch_size, eval_interval, dim, depth, heads;
    std::optional<std::uint64_t> seed;
};

RunSettings resolve(const TrainFlags& f) {
    RunSettings rs;
    if (!f.config.empty()) apply_config_file(rs, f.config);
    if (f.mode) rs.mode = *f.mode;
    if (f.lambda_anchor) rs.model.lambda_anchor = *f.lambda_anchor;
    if (f.tau) rs.model.tau = *f.tau;
    if (f.dim) rs.model.dim = *f.dim;
    if (f.depth) rs.model.depth = *f.depth;
    if (f.heads) rs.model.heads = *f.heads;
    if (f.lr) rs.train.lr = *f.lr;
    if (f.weight_decay) rs.train.weight_decay = *f.weight_decay;
    if (f.steps) rs.train.max_steps = *f.steps;
    if (f.batch_size) rs.train.batch_size = *f.batch_size;
    if (f.eval_interval) rs.train.eval_interval = *f.eval_interval;
    if (f.seed) rs.train.seed = *f.seed;
    if (rs.mode != "explicd" && rs.mode != "blackbox") {
        throw knowledge::ValidationError("mode must be explicd or blackbox, got '" + rs.mode + "'");
    }
    rs.model.validate();
    rs.train.validate();
    return rs;
}

knowledge::AnchorSet anchors_for(const knowledge::KnowledgeBase& kb, const std::string& anchors_path,
                                 std::size_t dim) {
    if (anchors_path.empty()) return knowledge::embed_anchors(kb, dim);
    knowledge::AnchorSet a = knowledge::import_anchors(anchors_path, kb);
    if (a.dim() != dim) {
        throw knowledge::ValidationError("anchors have dimension " + std::to_string(a.dim()) + ", model expects " +
                                         std::to_string(dim));
    }
    return a;
}

json metrics_object(const train::Metrics& m, const knowledge::KnowledgeBase* kb) {
    json j;
    j["accuracy"] = m.accuracy;
    if (m.alignment && kb) {
        json rows = json::array();
        for (std::size_t i = 0; i < kb->axis_count(); ++i) {
            rows.push_back({{"axis", kb->axes()[i].name}, {"accuracy", (*m.alignment)[i]}});
        }
        j["alignment"] = rows;
        j["macro_alignment"] = m.macro_alignment;
    }
    return j;
}

int cmd_gen_data(const std::string& out, std::uint64_t seed, std::size_t n_per_class, double noise_std) {
    synth::SynthSpec spec = synth::SynthSpec::defaults();
    spec.seed = seed;
    spec.noise_std = noise_std;
    const synth::Dataset data = synth::gen_dataset(spec, n_per_class, seed);
    const knowledge::KnowledgeBase kb = synth::kb_from_spec(spec);
    fs::create_directories(out);
    const std::string manifest_digest = synth::write_dataset(data, out);
    knowledge::save_knowledge_base(kb, fs::path(out) / "kb.json");
    json j;
    j["samples"] = data.train.size() + data.test.size();
    j["train"] = data.train.size();
    j["test"] = data.test.size();
    j["manifest_digest"] = manifest_digest;
    j["kb_digest"] = knowledge::digest(kb);
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_embed_anchors(const std::string& kb_path, std::size_t dim, const std::string& out) {
    const knowledge::KnowledgeBase kb = knowledge::load_knowledge_base(kb_path);
    const knowledge::AnchorSet anchors = knowledge::embed_anchors(kb, dim);
    knowledge::save_anchors(anchors, out);
    std::cout << json{{"provenance", anchors.provenance()}, {"dim", dim}, {"digest", knowledge::digest(anchors)}}.dump(2)
              << "\n";
    return 0;
}

int cmd_import_anchors(const std::string& kb_path, const std::string& in, const std::string& out) {
    const knowledge::KnowledgeBase kb = knowledge::load_knowledge_base(kb_path);
    const knowledge::AnchorSet anchors = knowledge::import_anchors(in, kb);
    if (!out.empty()) knowledge::save_anchors(anchors, out);
    std::cout << json{{"provenance", anchors.provenance()},
                      {"dim", anchors.dim()},
                      {"digest", knowledge::digest(anchors)}}
                     .dump(2)
              << "\n";
    return 0;
}

int cmd_train(const TrainFlags& flags) {
    const RunSettings rs = resolve(flags);
    const knowledge::KnowledgeBase kb = knowledge::load_knowledge_base(kb_path_for(flags.kb, flags.data));
    const synth::Dataset data = synth::load_dataset(flags.data);
    if (data.train.empty()) throw knowledge::ValidationError("dataset has no training samples");
    fs::create_directories(flags.out);
    const fs::path out(flags.out);

    std::ofstream log(out / "metrics.jsonl", std::ios::binary);
    if (!log) throw std::runtime_error("cannot write " + (out / "metrics.jsonl").string());
    std::vector<std::string> axis_names;
    for (const auto& a : kb.axes()) axis_names.push_back(a.name);
    auto on_eval = [&](const train::Metrics& m) {
        log << train::metrics_json(m, axis_names) << "\n";
        log.flush();
        std::fprintf(stderr, "step %zu loss %.4f ce %.4f anchor %.4f acc %.4f", m.step, m.train_loss, m.train_ce,
                     m.train_anchor, m.accuracy);
        if (m.alignment) std::fprintf(stderr, " align %.4f", m.macro_alignment);
        std::fprintf(stderr, " (%.1fs)\n", m.wall_seconds);
    };

    train::TrainResult result;
    checkpoint::Checkpoint ckpt;
    if (rs.mode == "explicd") {
        const knowledge::AnchorSet anchors = anchors_for(kb, flags.anchors, rs.model.dim);
        const std::string before = knowledge::serialize_anchors(anchors);
        const model::AnchorBank bank(anchors);
        model::ExplicdModel m = model::ExplicdModel::init(rs.model, kb, rs.train.seed);
        result = train::train_explicd(m, bank, kb, data, rs.train, on_eval);
        if (knowledge::serialize_anchors(anchors) != before) throw std::logic_error("anchors changed during training");
        knowledge::save_anchors(anchors, out / "anchors.txt");
        ckpt = checkpoint::make_checkpoint("explicd", rs.model, kb.class_count(), knowledge::digest(kb),
                                           knowledge::digest(anchors), m.parameters());
    } else {
        model::BlackBoxModel m = model::BlackBoxModel::init(rs.model, kb.class_count(), rs.train.seed);
        result = train::train_blackbox(m, data, rs.train, on_eval);
        ckpt = checkpoint::make_checkpoint("blackbox", rs.model, kb.class_count(), knowledge::digest(kb), "",
                                           m.parameters());
    }
    checkpoint::save(ckpt, out / "checkpoint.ckpt");

    json summary;
    summary["mode"] = rs.mode;
    summary["steps"] = rs.train.max_steps;
    summary["seed"] = rs.train.seed;
    summary["lr"] = rs.train.lr;
    summary["lambda_anchor"] = rs.model.lambda_anchor;
    summary["tau"] = rs.model.tau;
    summary["kb_digest"] = ckpt.kb_digest;
    summary["anchor_digest"] = ckpt.anchor_digest;
    if (!result.log.empty()) {
        const train::Metrics& last = result.log.back();
        summary["final"] = metrics_object(last, &kb);
        write_text(out / "timing.json", json{{"wall_seconds", last.wall_seconds}}.dump(2) + "\n");
    }
    write_text(out / "summary.json", summary.dump(2) + "\n");
    std::cout << summary.dump(2) << "\n";
    return 0;
}

struct LoadedModel {
    checkpoint::Checkpoint ckpt;
    knowledge::KnowledgeBase kb;
    std::optional<model::ExplicdModel> explicd;
    std::optional<model::BlackBoxModel> blackbox;
    std::optional<knowledge::AnchorSet> anchors;
};

LoadedModel load_model(const std::string& ckpt_path, const fs::path& kb_path, const std::string& anchors_path) {
    checkpoint::Checkpoint ckpt = checkpoint::load(ckpt_path);
    knowledge::KnowledgeBase kb = knowledge::load_knowledge_base(kb_path);
    if (knowledge::digest(kb) != ckpt.kb_digest) {
        throw knowledge::ValidationError("knowledge base digest " + knowledge::digest(kb) +
                                         " does not match checkpoint " + ckpt.kb_digest);
    }
    LoadedModel lm{ckpt, kb, std::nullopt, std::nullopt, std::nullopt};
    if (ckpt.mode == "explicd") {
        knowledge::AnchorSet anchors = anchors_for(kb, anchors_path, ckpt.config.dim);
        if (knowledge::digest(anchors) != ckpt.anchor_digest) {
            throw knowledge::ValidationError("anchor digest " + knowledge::digest(anchors) +
                                             " does not match checkpoint " + ckpt.anchor_digest);
        }
        lm.explicd = model::ExplicdModel::init(ckpt.config, kb, 0);
        checkpoint::restore(ckpt, lm.explicd->parameters());
        lm.anchors = std::move(anchors);
    } else {
        lm.blackbox = model::BlackBoxModel::init(ckpt.config, kb.class_count(), 0);
        checkpoint::restore(ckpt, lm.blackbox->parameters());
    }
    return lm;
}

const std::vector<synth::SyntheticSample>& pick_split(const synth::Dataset& data, const std::string& split) {
    const auto& samples = split == "train" ? data.train : data.test;
    if (samples.empty()) throw knowledge::ValidationError("no " + split + " samples in the manifest");
    return samples;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& kb,
             const std::string& anchors_path, const std::string& split) {
    const LoadedModel lm = load_model(ckpt_path, kb_path_for(kb, data_dir), anchors_path);
    const synth::Dataset data = synth::load_dataset(data_dir);
    const auto& samples = pick_split(data, split);
    train::Metrics m;
    if (lm.explicd) {
        const model::AnchorBank bank(*lm.anchors);
        m = train::evaluate(*lm.explicd, bank, lm.kb, samples);
    } else {
        m = train::evaluate(*lm.blackbox, samples);
    }
    json j;
    j["mode"] = lm.ckpt.mode;
    j["split"] = split;
    j["samples"] = samples.size();
    const json metrics = metrics_object(m, &lm.kb);
    for (const auto& [key, value] : metrics.items()) j[key] = value;
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_zeroshot(const std::string& data_dir, const std::string& kb_arg, std::uint64_t seed, std::size_t dim,
                 std::size_t depth, const std::string& split) {
    const knowledge::KnowledgeBase kb = knowledge::load_knowledge_base(kb_path_for(kb_arg, data_dir));
    const synth::Dataset data = synth::load_dataset(data_dir);
    const auto& samples = pick_split(data, split);
    model::ModelConfig cfg;
    cfg.dim = dim;
    cfg.depth = depth;
    cfg.validate();
    const model::VisualEncoderParams encoder = model::init_encoder(cfg, seed);
    const double acc = train::zero_shot_eval(encoder, cfg, train::class_anchors(kb, dim), samples);
    json j;
    j["split"] = split;
    j["samples"] = samples.size();
    j["seed"] = seed;
    j["accuracy"] = acc;
    j["chance"] = 1.0 / static_cast<double>(kb.class_count());
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_explain(const std::string& ckpt_path, const std::string& data_dir, const std::string& kb,
                const std::string& anchors_path, const std::string& sample_id, const std::string& image_path,
                const std::string& out) {
    const LoadedModel lm = load_model(ckpt_path, kb_path_for(kb, data_dir), anchors_path);
    if (!lm.explicd) throw knowledge::ValidationError("black-box checkpoints have no concept explanation");
    if (sample_id.empty() == image_path.empty()) {
        throw knowledge::ValidationError("explain needs exactly one of --sample or --image");
    }
    Image image;
    std::string id = sample_id;
    if (!image_path.empty()) {
        image = read_ppm(image_path);
        id = fs::path(image_path).stem().string();
    } else {
        if (data_dir.empty()) throw knowledge::ValidationError("--sample requires --data");
        const synth::Dataset data = synth::load_dataset(data_dir);
        const synth::SyntheticSample* found = nullptr;
        for (const auto* split : {&data.test, &data.train}) {
            for (const auto& s : *split) {
                if (s.id == sample_id) found = &s;
            }
        }
        if (!found) throw knowledge::ValidationError("no sample '" + sample_id + "' in " + data_dir);
        image = found->image;
    }
    const auto& cfg = lm.explicd->config;
    if (image.channels != cfg.channels || image.height != cfg.height || image.width != cfg.width) {
        throw knowledge::ValidationError("image is " + std::to_string(image.height) + "x" +
                                         std::to_string(image.width) + ", model expects " +
                                         std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
    }
    const model::AnchorBank bank(*lm.anchors);
    const model::ExplanationReport rep = model::explain(*lm.explicd, bank, lm.kb, image);
    const fs::path dir(out);
    fs::create_directories(dir);
    write_text(dir / "explanation.json", model::report_json(rep, id));
    write_pgm(model::heatmap(rep.mean_attention, rep.grid_h, rep.grid_w, image.height, image.width),
              dir / "heatmap_mean.pgm");
    for (const auto& ax : rep.axes) {
        write_pgm(model::heatmap(ax.attention, rep.grid_h, rep.grid_w, image.height, image.width),
                  dir / ("heatmap_" + safe_name(ax.name) + ".pgm"));
    }
    std::cout << model::report_json(rep, id);
    return 0;
}

int cmd_gradcheck(std::uint64_t seed, double tol, double step, bool inject_fault) {
    ad::debug::set_fault_injection(inject_fault);
    const ad::GradCheckReport rep = train::micro_gradcheck(seed, step, tol);
    ad::debug::set_fault_injection(false);
    for (const auto& e : rep.entries) {
        std::printf("%-32s max_abs_diff %.3e rel_error %.3e %s\n", e.name.c_str(), e.max_abs_diff, e.rel_error,
                    e.passed ? "ok" : "FAIL");
    }
    const auto& worst = rep.worst();
    std::printf("worst: %s rel_error %.3e (tol %.1e)\n", worst.name.c_str(), worst.rel_error, tol);
    std::printf("%s\n", rep.passed ? "PASS" : "FAIL");
    return rep.passed ? 0 : kExitFailure;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Explainable concept-bottleneck classification on synthetic attribute data"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset, manifest and kb.json");
    std::string gen_out;
    std::uint64_t gen_seed = 0;
    std::size_t n_per_class = 100;
    double noise_std = 0.05;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--seed", gen_seed, "Rendering and split seed");
    gen->add_option("--n-per-class", n_per_class, "Samples per class");
    gen->add_option("--noise-std", noise_std, "Gaussian pixel noise");

    auto* embed = app.add_subcommand("embed-anchors", "Embed knowledge-base options as anchors");
    std::string embed_kb, embed_out;
    std::size_t embed_dim = 64;
    embed->add_option("--kb", embed_kb, "Knowledge base JSON")->required()->check(CLI::ExistingFile);
    embed->add_option("--dim", embed_dim, "Embedding dimension");
    embed->add_option("--out", embed_out, "Anchor file to write")->required();

    auto* import = app.add_subcommand("import-anchors", "Validate an externally produced anchor file");
    std::string import_kb, import_in, import_out;
    import->add_option("--kb", import_kb, "Knowledge base JSON")->required()->check(CLI::ExistingFile);
    import->add_option("--in", import_in, "Anchor file to import")->required()->check(CLI::ExistingFile);
    import->add_option("--out", import_out, "Write the normalized anchors here");

    auto* trn = app.add_subcommand("train", "Train an Explicd or black-box model");
    TrainFlags tf;
    trn->add_option("--data", tf.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    trn->add_option("--kb", tf.kb, "Knowledge base (default <data>/kb.json)")->check(CLI::ExistingFile);
    trn->add_option("--anchors", tf.anchors, "Import anchors instead of embedding")->check(CLI::ExistingFile);
    trn->add_option("--out", tf.out, "Run directory")->required();
    trn->add_option("--config", tf.config, "Flat JSON config; flags override it")->check(CLI::ExistingFile);
    trn->add_option("--mode", tf.mode, "explicd or blackbox");
    trn->add_option("--lambda-anchor", tf.lambda_anchor, "Anchor loss weight");
    trn->add_option("--tau", tf.tau, "Anchor loss temperature");
    trn->add_option("--steps", tf.steps, "Optimizer steps");
    trn->add_option("--lr", tf.lr, "Learning rate");
    trn->add_option("--weight-decay", tf.weight_decay, "Decoupled weight decay");
    trn->add_option("--batch-size", tf.batch_size, "Batch size");
    trn->add_option("--eval-interval", tf.eval_interval, "Steps between evaluations");
    trn->add_option("--dim", tf.dim, "Model width");
    trn->add_option("--depth", tf.depth, "Transformer blocks");
    trn->add_option("--heads", tf.heads, "Attention heads");
    trn->add_option("--seed", tf.seed, "Initialization and shuffling seed");

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
    std::string ev_ckpt, ev_data, ev_kb, ev_anchors, ev_split = "test";
    ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
    ev->add_option("--data", ev_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    ev->add_option("--kb", ev_kb, "Knowledge base (default <data>/kb.json)")->check(CLI::ExistingFile);
    ev->add_option("--anchors", ev_anchors, "Anchor file used in training")->check(CLI::ExistingFile);
    ev->add_option("--split", ev_split, "test or train")->check(CLI::IsMember({"test", "train"}));

    auto* zs = app.add_subcommand("zeroshot", "Zero-shot accuracy of an untrained encoder");
    std::string zs_data, zs_kb, zs_split = "test";
    std::uint64_t zs_seed = 1;
    std::size_t zs_dim = 64, zs_depth = 2;
    zs->add_option("--data", zs_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    zs->add_option("--kb", zs_kb, "Knowledge base (default <data>/kb.json)")->check(CLI::ExistingFile);
    zs->add_option("--seed", zs_seed, "Encoder initialization seed");
    zs->add_option("--dim", zs_dim, "Model width");
    zs->add_option("--depth", zs_depth, "Transformer blocks");
    zs->add_option("--split", zs_split, "test or train")->check(CLI::IsMember({"test", "train"}));

    auto* ex = app.add_subcommand("explain", "Write an explanation report and attention heatmaps");
    std::string ex_ckpt, ex_data, ex_kb, ex_anchors, ex_sample, ex_image, ex_out;
    ex->add_option("--checkpoint", ex_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
    ex->add_option("--data", ex_data, "Dataset directory")->check(CLI::ExistingDirectory);
    ex->add_option("--kb", ex_kb, "Knowledge base (default <data>/kb.json)")->check(CLI::ExistingFile);
    ex->add_option("--anchors", ex_anchors, "Anchor file used in training")->check(CLI::ExistingFile);
    ex->add_option("--sample", ex_sample, "Sample id from the manifest");
    ex->add_option("--image", ex_image, "PPM image")->check(CLI::ExistingFile);
    ex->add_option("--out", ex_out, "Output directory")->required();

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the full loss on a micro-model");
    std::uint64_t gc_seed = 1;
    double gc_tol = 1e-4, gc_step = 1e-5;
    bool gc_fault = false;
    gc->add_option("--seed", gc_seed, "Micro-model seed");
    gc->add_option("--tol", gc_tol, "Relative error tolerance");
    gc->add_option("--step", gc_step, "Central difference step");
    gc->add_flag("--inject-fault", gc_fault, "Corrupt the GELU backward rule");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitUsage;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(gen_out, gen_seed, n_per_class, noise_std);
        if (embed->parsed()) return cmd_embed_anchors(embed_kb, embed_dim, embed_out);
        if (import->parsed()) return cmd_import_anchors(import_kb, import_in, import_out);
        if (trn->parsed()) return cmd_train(tf);
        if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_kb, ev_anchors, ev_split);
        if (zs->parsed()) return cmd_zeroshot(zs_data, zs_kb, zs_seed, zs_dim, zs_depth, zs_split);
        if (ex->parsed()) return cmd_explain(ex_ckpt, ex_data, ex_kb, ex_anchors, ex_sample, ex_image, ex_out);
        if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_tol, gc_step, gc_fault);
    } catch (const knowledge::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const checkpoint::CheckpointError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}
