#pragma once

// Diagnostic-criteria knowledge bases and their frozen anchor embeddings.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace explicd::knowledge {

/// Raised when a knowledge base or anchor set violates its constraints.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct CriteriaAxis {
    std::string name;
    std::vector<std::string> options;
    /// class_to_option[c] is the option index bound to class c.
    std::vector<int> class_to_option;

    std::size_t option_count() const noexcept { return options.size(); }

    bool operator==(const CriteriaAxis&) const = default;
};

class KnowledgeBase {
public:
    /// Validates on construction; throws ValidationError.
    KnowledgeBase(std::vector<std::string> classes, std::vector<CriteriaAxis> axes);

    const std::vector<std::string>& classes() const noexcept { return classes_; }
    const std::vector<CriteriaAxis>& axes() const noexcept { return axes_; }
    std::size_t class_count() const noexcept { return classes_.size(); }
    std::size_t axis_count() const noexcept { return axes_.size(); }
    /// Sum of option counts over all axes.
    std::size_t total_options() const noexcept;
    int class_index(std::string_view name) const;

    /// "axis-name: option-text", the string that gets embedded.
    std::string anchor_text(std::size_t axis, std::size_t option) const;

    bool operator==(const KnowledgeBase&) const = default;

private:
    std::vector<std::string> classes_;
    std::vector<CriteriaAxis> axes_;
};

KnowledgeBase parse_knowledge_base(std::string_view json_text);
KnowledgeBase load_knowledge_base(const std::filesystem::path& path);
/// Canonical JSON form (stable key order, two-space indent).
std::string to_json(const KnowledgeBase& kb);
void save_knowledge_base(const KnowledgeBase& kb, const std::filesystem::path& path);
/// FNV-1a digest of the canonical JSON, as 16 hex digits.
std::string digest(const KnowledgeBase& kb);

/// Lowercased alphanumeric tokens.
std::vector<std::string> tokenize(std::string_view text);

inline constexpr std::string_view kEmbedderVersion = "hash-embed-v1";

/// Deterministic bag-of-tokens embedding. Each token seeds a splitmix64 stream
/// with its FNV-1a hash; the stream yields `dim` uniforms in [-1, 1). Token
/// vectors are summed and the sum is L2-normalized.
std::vector<double> hash_embed_text(std::string_view text, std::size_t dim);

class AnchorSet {
public:
    AnchorSet(std::size_t dim, std::vector<std::vector<double>> rows_per_axis,
              std::vector<std::size_t> option_counts, std::string provenance);

    std::size_t dim() const noexcept { return dim_; }
    std::size_t axis_count() const noexcept { return option_counts_.size(); }
    std::size_t option_count(std::size_t axis) const { return option_counts_.at(axis); }
    /// Row-major n_i x dim matrix for one axis.
    const std::vector<double>& matrix(std::size_t axis) const { return rows_.at(axis); }
    const std::string& provenance() const noexcept { return provenance_; }

    /// Equality of the numeric content; provenance is metadata.
    bool operator==(const AnchorSet& other) const {
        return dim_ == other.dim_ && option_counts_ == other.option_counts_ && rows_ == other.rows_;
    }

private:
    std::size_t dim_;
    std::vector<std::vector<double>> rows_;
    std::vector<std::size_t> option_counts_;
    std::string provenance_;
};

AnchorSet embed_anchors(const KnowledgeBase& kb, std::size_t dim);

/// Anchor file text: header "EXPLICD-ANCHORS 1 <d>" then one
/// "<axis> <option> <d floats>" line per row, floats at 17 significant digits.
std::string serialize_anchors(const AnchorSet& anchors);
void save_anchors(const AnchorSet& anchors, const std::filesystem::path& path);
/// Parses and validates against kb; rows are rescaled to unit norm unless
/// they already are within 4 ulp (so saved sets reload bit-exactly).
AnchorSet parse_anchors(std::string_view text, const KnowledgeBase& kb, std::string provenance);
AnchorSet import_anchors(const std::filesystem::path& path, const KnowledgeBase& kb);
/// FNV-1a digest of serialize_anchors(), as 16 hex digits.
std::string digest(const AnchorSet& anchors);

std::string hex64(std::uint64_t value);

} // namespace explicd::knowledge
