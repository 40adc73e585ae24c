#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "clipad/backbone/container.hpp"
#include "clipad/numerics/tensor.hpp"

namespace clipad::prompts {

using numerics::Tensor;

/// Templates hold one "[c]" placeholder, states one "[o]" placeholder.
struct PromptTemplateSet {
  std::vector<std::string> templates;
  std::vector<std::string> normal_states;
  std::vector<std::string> abnormal_states;

  /// Throws ValidationError naming the first malformed entry.
  void validate() const;
};

struct ComposedPrompts {
  std::vector<std::string> normal;
  std::vector<std::string> abnormal;
};

/// Full template x state cross product (template-major). "[o]" is replaced by
/// the object name first, then "[c]" by the resulting state phrase.
ComposedPrompts compose_prompts(const PromptTemplateSet& set, const std::string& object_name);

/// Parses the preset text format: sections "[templates]", "[normal]" and
/// "[abnormal]", one entry per line; blank lines and lines starting with '#'
/// are ignored.
PromptTemplateSet parse_preset(std::string_view text);
std::string format_preset(const PromptTemplateSet& set);
PromptTemplateSet load_preset_file(const std::filesystem::path& path);

/// Built-in presets: "industrial", "industrial-extended", "headct",
/// "brainmri", "clinicdb".
PromptTemplateSet builtin_preset(const std::string& name);
std::vector<std::string> builtin_preset_names();

/// Deterministic stand-in for a text encoder. A prompt is split into the
/// template it was composed from and the state phrase that filled "[c]"; its
/// embedding is normalize(b + eta * t) where b and t are unit Gaussian vectors
/// seeded by hashing the state phrase and the template. Prompts sharing a
/// state phrase are therefore much closer than prompts that do not. Prompts
/// matching no known template use the whole string as the state phrase.
class SyntheticTextEncoder {
 public:
  static constexpr double kTemplateWeight = 0.35;

  SyntheticTextEncoder(std::size_t dim, std::uint64_t seed, std::vector<std::string> templates = {});

  Tensor embed(const std::vector<std::string>& prompts) const;
  std::size_t dim() const { return dim_; }

 private:
  std::vector<double> unit_gaussian(std::string_view key) const;

  std::size_t dim_;
  std::uint64_t seed_;
  std::vector<std::string> templates_;
};

/// Imported embeddings keyed by the exact prompt string.
class EmbeddingTable {
 public:
  explicit EmbeddingTable(backbone::TensorContainer table) : table_(std::move(table)) {}

  static EmbeddingTable load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  /// Rows are unit-normalized on lookup. Throws LookupError listing every
  /// prompt that is missing from the table.
  Tensor embed(const std::vector<std::string>& prompts) const;

  const backbone::TensorContainer& container() const { return table_; }

 private:
  backbone::TensorContainer table_;
};

/// Builds an embedding table from prompts and their feature rows.
EmbeddingTable make_table(const std::vector<std::string>& prompts, const Tensor& features);

using TextEncoder = std::variant<SyntheticTextEncoder, EmbeddingTable>;

Tensor embed_prompts(const std::vector<std::string>& prompts, const TextEncoder& encoder);

enum class FeatureSource { Imported, Synthetic };

/// Sampled text features of one object class.
struct PromptDistribution {
  std::string object_name;
  Tensor normal_features;    ///< [N_n, C]
  Tensor abnormal_features;  ///< [N_a, C]
  FeatureSource source = FeatureSource::Synthetic;
};

PromptDistribution sample_distribution(const PromptTemplateSet& set, const std::string& object_name,
                                       const TextEncoder& encoder);

backbone::TensorContainer to_container(const PromptDistribution& distribution);
PromptDistribution distribution_from_container(const backbone::TensorContainer& container);

}  // namespace clipad::prompts
