#include "explicd/knowledge.hpp"

#include "explicd/rng.hpp"

#include <json.hpp>

#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace explicd::knowledge {

using json = nlohmann::ordered_json;

namespace {

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

// ---------------------------------------------------------------------------
// KnowledgeBase

KnowledgeBase::KnowledgeBase(std::vector<std::string> classes, std::vector<CriteriaAxis> axes)
    : classes_(std::move(classes)), axes_(std::move(axes)) {
    const std::size_t n = classes_.size();
    if (n < 2) throw ValidationError("knowledge base needs at least 2 classes, got " + std::to_string(n));
    if (axes_.empty()) throw ValidationError("knowledge base needs at least 1 criteria axis");

    std::set<std::string> seen;
    for (const auto& c : classes_) {
        if (c.empty()) throw ValidationError("empty class name");
        if (!seen.insert(c).second) throw ValidationError("duplicate class name '" + c + "'");
    }
    seen.clear();
    for (const auto& axis : axes_) {
        if (axis.name.empty()) throw ValidationError("empty axis name");
        if (!seen.insert(axis.name).second) throw ValidationError("duplicate axis name '" + axis.name + "'");
        const std::size_t options = axis.options.size();
        if (options < 2 || options > n) {
            throw ValidationError("axis '" + axis.name + "' has " + std::to_string(options) +
                                  " options; expected between 2 and " + std::to_string(n));
        }
        std::set<std::string> texts;
        for (const auto& t : axis.options) {
            if (tokenize(t).empty()) throw ValidationError("axis '" + axis.name + "' has an option with no tokens");
            if (!texts.insert(t).second) {
                throw ValidationError("axis '" + axis.name + "' repeats option text '" + t + "'");
            }
        }
        if (axis.class_to_option.size() != n) {
            throw ValidationError("axis '" + axis.name + "' maps " + std::to_string(axis.class_to_option.size()) +
                                  " classes; expected " + std::to_string(n));
        }
        std::vector<int> used(options, 0);
        for (std::size_t c = 0; c < n; ++c) {
            const int o = axis.class_to_option[c];
            if (o < 0 || static_cast<std::size_t>(o) >= options) {
                throw ValidationError("axis '" + axis.name + "' maps class '" + classes_[c] + "' to no option");
            }
            ++used[static_cast<std::size_t>(o)];
        }
        for (std::size_t o = 0; o < options; ++o) {
            if (used[o] == 0) {
                throw ValidationError("axis '" + axis.name + "' option '" + axis.options[o] + "' has no class");
            }
        }
    }
}

std::size_t KnowledgeBase::total_options() const noexcept {
    std::size_t total = 0;
    for (const auto& a : axes_) total += a.options.size();
    return total;
}

int KnowledgeBase::class_index(std::string_view name) const {
    for (std::size_t i = 0; i < classes_.size(); ++i) {
        if (classes_[i] == name) return static_cast<int>(i);
    }
    return -1;
}

std::string KnowledgeBase::anchor_text(std::size_t axis, std::size_t option) const {
    const auto& a = axes_.at(axis);
    return a.name + ": " + a.options.at(option);
}

KnowledgeBase parse_knowledge_base(std::string_view json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ValidationError(std::string("knowledge base is not valid JSON: ") + e.what());
    }
    try {
        std::vector<std::string> classes = doc.at("classes").get<std::vector<std::string>>();
        std::vector<CriteriaAxis> axes;
        for (const auto& ja : doc.at("axes")) {
            CriteriaAxis axis;
            axis.name = ja.at("name").get<std::string>();
            axis.class_to_option.assign(classes.size(), -1);
            for (const auto& jo : ja.at("options")) {
                const int index = static_cast<int>(axis.options.size());
                axis.options.push_back(jo.at("text").get<std::string>());
                for (const auto& cname : jo.at("classes")) {
                    const auto name = cname.get<std::string>();
                    auto it = std::find(classes.begin(), classes.end(), name);
                    if (it == classes.end()) {
                        throw ValidationError("axis '" + axis.name + "' references unknown class '" + name + "'");
                    }
                    int& slot = axis.class_to_option[static_cast<std::size_t>(it - classes.begin())];
                    if (slot != -1) {
                        throw ValidationError("axis '" + axis.name + "' assigns class '" + name + "' more than once");
                    }
                    slot = index;
                }
            }
            for (std::size_t c = 0; c < classes.size(); ++c) {
                if (axis.class_to_option[c] == -1) {
                    throw ValidationError("axis '" + axis.name + "' does not map class '" + classes[c] + "'");
                }
            }
            axes.push_back(std::move(axis));
        }
        return KnowledgeBase(std::move(classes), std::move(axes));
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed knowledge base: ") + e.what());
    }
}

KnowledgeBase load_knowledge_base(const std::filesystem::path& path) {
    return parse_knowledge_base(read_file(path));
}

std::string to_json(const KnowledgeBase& kb) {
    json doc;
    doc["classes"] = kb.classes();
    json axes = json::array();
    for (const auto& a : kb.axes()) {
        json ja;
        ja["name"] = a.name;
        json options = json::array();
        for (std::size_t o = 0; o < a.options.size(); ++o) {
            json members = json::array();
            for (std::size_t c = 0; c < kb.class_count(); ++c) {
                if (a.class_to_option[c] == static_cast<int>(o)) members.push_back(kb.classes()[c]);
            }
            options.push_back({{"text", a.options[o]}, {"classes", members}});
        }
        ja["options"] = options;
        axes.push_back(ja);
    }
    doc["axes"] = axes;
    return doc.dump(2) + "\n";
}

void save_knowledge_base(const KnowledgeBase& kb, const std::filesystem::path& path) {
    write_file(path, to_json(kb));
}

std::string digest(const KnowledgeBase& kb) { return hex64(fnv1a64(to_json(kb))); }

// ---------------------------------------------------------------------------
// Embedding

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            current.push_back(static_cast<char>(std::tolower(c)));
        } else if (!current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

std::vector<double> hash_embed_text(std::string_view text, std::size_t dim) {
    if (dim == 0) throw ValidationError("embedding dimension must be positive");
    const auto tokens = tokenize(text);
    if (tokens.empty()) throw ValidationError("cannot embed text without tokens: '" + std::string(text) + "'");
    std::vector<double> v(dim, 0.0);
    for (const auto& tok : tokens) {
        SplitMix64 stream(fnv1a64(tok));
        for (double& x : v) x += stream.uniform_signed();
    }
    double ss = 0.0;
    for (double x : v) ss += x * x;
    const double norm = std::sqrt(ss);
    if (norm == 0.0) throw ValidationError("degenerate embedding for '" + std::string(text) + "'");
    for (double& x : v) x /= norm;
    return v;
}

// ---------------------------------------------------------------------------
// AnchorSet

AnchorSet::AnchorSet(std::size_t dim, std::vector<std::vector<double>> rows_per_axis,
                     std::vector<std::size_t> option_counts, std::string provenance)
    : dim_(dim), rows_(std::move(rows_per_axis)), option_counts_(std::move(option_counts)),
      provenance_(std::move(provenance)) {
    if (dim_ == 0) throw ValidationError("anchor dimension must be positive");
    if (rows_.size() != option_counts_.size()) throw ValidationError("anchor axis count mismatch");
    for (std::size_t a = 0; a < rows_.size(); ++a) {
        if (rows_[a].size() != option_counts_[a] * dim_) {
            throw ValidationError("anchor matrix for axis " + std::to_string(a) + " has wrong size");
        }
        for (std::size_t o = 0; o < option_counts_[a]; ++o) {
            double ss = 0.0;
            for (std::size_t i = 0; i < dim_; ++i) ss += rows_[a][o * dim_ + i] * rows_[a][o * dim_ + i];
            if (std::abs(std::sqrt(ss) - 1.0) > 1e-9) {
                throw ValidationError("anchor row " + std::to_string(a) + "/" + std::to_string(o) + " is not unit norm");
            }
        }
    }
}

AnchorSet embed_anchors(const KnowledgeBase& kb, std::size_t dim) {
    std::vector<std::vector<double>> rows;
    std::vector<std::size_t> counts;
    for (std::size_t a = 0; a < kb.axis_count(); ++a) {
        const std::size_t n = kb.axes()[a].option_count();
        std::vector<double> m;
        m.reserve(n * dim);
        for (std::size_t o = 0; o < n; ++o) {
            auto v = hash_embed_text(kb.anchor_text(a, o), dim);
            m.insert(m.end(), v.begin(), v.end());
        }
        rows.push_back(std::move(m));
        counts.push_back(n);
    }
    return AnchorSet(dim, std::move(rows), std::move(counts),
                     std::string(kEmbedderVersion) + " d=" + std::to_string(dim));
}

std::string serialize_anchors(const AnchorSet& anchors) {
    std::string out = "EXPLICD-ANCHORS 1 " + std::to_string(anchors.dim()) + "\n";
    for (std::size_t a = 0; a < anchors.axis_count(); ++a) {
        const auto& m = anchors.matrix(a);
        for (std::size_t o = 0; o < anchors.option_count(a); ++o) {
            out += std::to_string(a) + " " + std::to_string(o);
            for (std::size_t i = 0; i < anchors.dim(); ++i) {
                out += ' ';
                out += format_double(m[o * anchors.dim() + i]);
            }
            out += '\n';
        }
    }
    return out;
}

void save_anchors(const AnchorSet& anchors, const std::filesystem::path& path) {
    write_file(path, serialize_anchors(anchors));
}

AnchorSet parse_anchors(std::string_view text, const KnowledgeBase& kb, std::string provenance) {
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("anchor file is empty");
    std::istringstream header(line);
    std::string magic;
    int version = 0;
    long long dim_signed = 0;
    header >> magic >> version >> dim_signed;
    if (!header || magic != "EXPLICD-ANCHORS" || version != 1 || dim_signed <= 0) {
        throw ValidationError("bad anchor header '" + line + "'; expected 'EXPLICD-ANCHORS 1 <d>'");
    }
    const auto dim = static_cast<std::size_t>(dim_signed);

    std::vector<std::vector<double>> rows(kb.axis_count());
    std::vector<std::vector<bool>> filled(kb.axis_count());
    std::vector<std::size_t> counts;
    for (std::size_t a = 0; a < kb.axis_count(); ++a) {
        counts.push_back(kb.axes()[a].option_count());
        rows[a].assign(counts[a] * dim, 0.0);
        filled[a].assign(counts[a], false);
    }

    std::size_t line_no = 1;
    std::size_t found = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ls(line);
        long long axis = -1, option = -1;
        ls >> axis >> option;
        if (!ls) throw ValidationError("anchor line " + std::to_string(line_no) + ": missing axis/option index");
        if (axis < 0 || static_cast<std::size_t>(axis) >= kb.axis_count()) {
            throw ValidationError("anchor line " + std::to_string(line_no) + ": axis " + std::to_string(axis) +
                                  " out of range; expected < " + std::to_string(kb.axis_count()));
        }
        const auto a = static_cast<std::size_t>(axis);
        if (option < 0 || static_cast<std::size_t>(option) >= counts[a]) {
            throw ValidationError("anchor line " + std::to_string(line_no) + ": option " + std::to_string(option) +
                                  " out of range for axis " + std::to_string(a) + "; expected < " +
                                  std::to_string(counts[a]));
        }
        const auto o = static_cast<std::size_t>(option);
        if (filled[a][o]) {
            throw ValidationError("anchor line " + std::to_string(line_no) + ": duplicate row " + std::to_string(a) +
                                  " " + std::to_string(o));
        }
        std::vector<double> values;
        std::string tok;
        while (ls >> tok) {
            char* end = nullptr;
            const double v = std::strtod(tok.c_str(), &end);
            if (end == tok.c_str() || *end != '\0' || !std::isfinite(v)) {
                throw ValidationError("anchor line " + std::to_string(line_no) + ": bad number '" + tok + "'");
            }
            values.push_back(v);
        }
        if (values.size() != dim) {
            throw ValidationError("anchor line " + std::to_string(line_no) + ": expected " + std::to_string(dim) +
                                  " values, found " + std::to_string(values.size()));
        }
        double ss = 0.0;
        for (double v : values) ss += v * v;
        const double norm = std::sqrt(ss);
        if (norm == 0.0) throw ValidationError("anchor line " + std::to_string(line_no) + ": zero vector");
        const bool unit = std::abs(norm - 1.0) <= 4.0 * std::numeric_limits<double>::epsilon();
        for (std::size_t i = 0; i < dim; ++i) rows[a][o * dim + i] = unit ? values[i] : values[i] / norm;
        filled[a][o] = true;
        ++found;
    }
    const std::size_t expected = kb.total_options();
    if (found != expected) {
        throw ValidationError("anchor file has " + std::to_string(found) + " rows; expected " +
                              std::to_string(expected));
    }
    return AnchorSet(dim, std::move(rows), std::move(counts), std::move(provenance));
}

AnchorSet import_anchors(const std::filesystem::path& path, const KnowledgeBase& kb) {
    return parse_anchors(read_file(path), kb, "import:" + path.string());
}

std::string digest(const AnchorSet& anchors) { return hex64(fnv1a64(serialize_anchors(anchors))); }

} // namespace explicd::knowledge
