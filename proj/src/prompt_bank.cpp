#include "clipad/prompts/prompt_bank.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "clipad/errors.hpp"
#include "clipad/numerics/ops.hpp"
#include "clipad/numerics/random.hpp"

namespace clipad::prompts {

namespace {

constexpr std::string_view kClassToken = "[c]";
constexpr std::string_view kObjectToken = "[o]";

std::size_t count_occurrences(std::string_view text, std::string_view token) {
  std::size_t count = 0;
  for (std::size_t pos = text.find(token); pos != std::string_view::npos; pos = text.find(token, pos + 1)) {
    ++count;
  }
  return count;
}

std::string replace_once(std::string text, std::string_view token, std::string_view value) {
  const std::size_t pos = text.find(token);
  if (pos != std::string::npos) text.replace(pos, token.size(), value);
  return text;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

const std::vector<std::string> kNormalStates = {
    "flawless [o]",          "perfect [o]",           "unblemished [o]",
    "[o] without flaw",      "[o] without defect",    "[o] without damage",
    "[o] without scratch",   "[o] without crack",     "[o] without contamination"};

const std::vector<std::string> kAbnormalStates = {
    "damaged [o]",       "imperfect [o]",     "blemished [o]",  "broken [o]",
    "[o] with flaw",     "[o] with defect",   "[o] with damage", "[o] with scratch",
    "[o] with crack",    "[o] with contamination"};

// Generic photo templates in the style of CLIP's zero-shot prompts. Users can
// replace them with their own preset file.
const std::vector<std::string> kExtendedTemplates = {
    "a cropped photo of the [c].",
    "a cropped photo of a [c].",
    "a close-up photo of a [c].",
    "a close-up photo of the [c].",
    "a bright photo of a [c].",
    "a bright photo of the [c].",
    "a dark photo of the [c].",
    "a dark photo of a [c].",
    "a jpeg corrupted photo of a [c].",
    "a jpeg corrupted photo of the [c].",
    "a blurry photo of the [c].",
    "a blurry photo of a [c].",
    "a photo of a [c].",
    "a photo of the [c].",
    "a photo of a small [c].",
    "a photo of the small [c].",
    "a photo of a large [c].",
    "a photo of the large [c].",
    "a photo of the [c] for visual inspection.",
    "a photo of a [c] for visual inspection.",
    "a photo of the [c] for anomaly detection.",
    "a photo of a [c] for anomaly detection."};

PromptTemplateSet medical_variant(const std::vector<std::string>& findings) {
  PromptTemplateSet set;
  set.templates = {"a photo of a [c]"};
  auto keep = [](const std::string& s) {
    return s.find("scratch") == std::string::npos && s.find("crack") == std::string::npos;
  };
  std::copy_if(kNormalStates.begin(), kNormalStates.end(), std::back_inserter(set.normal_states), keep);
  std::copy_if(kAbnormalStates.begin(), kAbnormalStates.end(), std::back_inserter(set.abnormal_states), keep);
  for (const auto& f : findings) {
    set.normal_states.push_back("[o] without " + f);
    set.abnormal_states.push_back("[o] with " + f);
  }
  return set;
}

}  // namespace

void PromptTemplateSet::validate() const {
  for (const auto& t : templates) {
    if (count_occurrences(t, kClassToken) != 1) {
      throw ValidationError("template '" + t + "' must contain \"[c]\" exactly once");
    }
    if (count_occurrences(t, kObjectToken) != 0) {
      throw ValidationError("template '" + t + "' must not contain \"[o]\"");
    }
  }
  for (const auto* states : {&normal_states, &abnormal_states}) {
    for (const auto& s : *states) {
      if (count_occurrences(s, kObjectToken) != 1) {
        throw ValidationError("state '" + s + "' must contain \"[o]\" exactly once");
      }
      if (count_occurrences(s, kClassToken) != 0) {
        throw ValidationError("state '" + s + "' must not contain \"[c]\"");
      }
    }
  }
}

ComposedPrompts compose_prompts(const PromptTemplateSet& set, const std::string& object_name) {
  set.validate();
  if (object_name.find(kClassToken) != std::string::npos || object_name.find(kObjectToken) != std::string::npos) {
    throw ValidationError("object name must not contain placeholder tokens");
  }
  ComposedPrompts out;
  auto fill = [&](const std::vector<std::string>& states, std::vector<std::string>& dst) {
    dst.reserve(set.templates.size() * states.size());
    for (const auto& t : set.templates) {
      for (const auto& s : states) dst.push_back(replace_once(t, kClassToken, replace_once(s, kObjectToken, object_name)));
    }
  };
  fill(set.normal_states, out.normal);
  fill(set.abnormal_states, out.abnormal);
  return out;
}

PromptTemplateSet parse_preset(std::string_view text) {
  PromptTemplateSet set;
  std::vector<std::string>* section = nullptr;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string entry = trim(line);
    if (entry.empty() || entry.front() == '#') continue;
    if (entry == "[templates]") {
      section = &set.templates;
    } else if (entry == "[normal]") {
      section = &set.normal_states;
    } else if (entry == "[abnormal]") {
      section = &set.abnormal_states;
    } else if (!section) {
      throw ValidationError("preset line " + std::to_string(lineno) + ": entry outside of a section");
    } else {
      section->push_back(entry);
    }
  }
  set.validate();
  return set;
}

std::string format_preset(const PromptTemplateSet& set) {
  std::ostringstream out;
  out << "[templates]\n";
  for (const auto& t : set.templates) out << t << '\n';
  out << "[normal]\n";
  for (const auto& s : set.normal_states) out << s << '\n';
  out << "[abnormal]\n";
  for (const auto& s : set.abnormal_states) out << s << '\n';
  return out.str();
}

PromptTemplateSet load_preset_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open preset file '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_preset(buf.str());
}

PromptTemplateSet builtin_preset(const std::string& name) {
  if (name == "industrial") return {{"a photo of a [c]"}, kNormalStates, kAbnormalStates};
  if (name == "industrial-extended") return {kExtendedTemplates, kNormalStates, kAbnormalStates};
  if (name == "headct") return medical_variant({"hemorrhage"});
  if (name == "brainmri") return medical_variant({"tumor"});
  if (name == "clinicdb") return medical_variant({"polypus", "polyp"});
  throw ValidationError("unknown prompt preset '" + name + "'");
}

std::vector<std::string> builtin_preset_names() {
  return {"industrial", "industrial-extended", "headct", "brainmri", "clinicdb"};
}

SyntheticTextEncoder::SyntheticTextEncoder(std::size_t dim, std::uint64_t seed, std::vector<std::string> templates)
    : dim_(dim), seed_(seed), templates_(std::move(templates)) {
  if (dim_ == 0) throw ValidationError("synthetic encoder dimension must be positive");
  // Longest templates first so the most specific match wins.
  std::stable_sort(templates_.begin(), templates_.end(),
                   [](const std::string& a, const std::string& b) { return a.size() > b.size(); });
}

std::vector<double> SyntheticTextEncoder::unit_gaussian(std::string_view key) const {
  numerics::Rng rng(numerics::hash_string(key, seed_));
  std::vector<double> v(dim_);
  double sq = 0.0;
  for (double& x : v) {
    x = rng.normal();
    sq += x * x;
  }
  const double inv = 1.0 / std::sqrt(sq);
  for (double& x : v) x *= inv;
  return v;
}

Tensor SyntheticTextEncoder::embed(const std::vector<std::string>& prompts) const {
  Tensor out({prompts.size(), dim_});
  for (std::size_t r = 0; r < prompts.size(); ++r) {
    const std::string& prompt = prompts[r];
    std::string state = prompt;
    std::string matched;
    for (const auto& t : templates_) {
      const std::size_t pos = t.find(kClassToken);
      if (pos == std::string::npos) continue;
      const std::string_view prefix(t.data(), pos);
      const std::string_view suffix(t.data() + pos + kClassToken.size(), t.size() - pos - kClassToken.size());
      if (prompt.size() > prefix.size() + suffix.size() && prompt.starts_with(prefix) && prompt.ends_with(suffix)) {
        state = prompt.substr(prefix.size(), prompt.size() - prefix.size() - suffix.size());
        matched = t;
        break;
      }
    }
    std::vector<double> v = unit_gaussian("state:" + state);
    if (!matched.empty()) {
      const std::vector<double> t = unit_gaussian("template:" + matched);
      for (std::size_t c = 0; c < dim_; ++c) v[c] += kTemplateWeight * t[c];
    }
    double sq = 0.0;
    for (double x : v) sq += x * x;
    const double inv = 1.0 / std::sqrt(sq);
    for (std::size_t c = 0; c < dim_; ++c) out(r, c) = static_cast<float>(v[c] * inv);
  }
  return out;
}

EmbeddingTable EmbeddingTable::load(const std::filesystem::path& path) {
  return EmbeddingTable(backbone::load_container(path));
}

void EmbeddingTable::save(const std::filesystem::path& path) const { backbone::save_container(table_, path); }

Tensor EmbeddingTable::embed(const std::vector<std::string>& prompts) const {
  std::vector<std::string> missing;
  for (const auto& p : prompts) {
    if (!table_.contains(p)) missing.push_back(p);
  }
  if (!missing.empty()) {
    std::string msg = "embedding table is missing " + std::to_string(missing.size()) + " prompt(s):";
    for (const auto& m : missing) msg += "\n  \"" + m + "\"";
    throw LookupError(msg);
  }
  if (prompts.empty()) return Tensor({0, 0});
  const std::size_t dim = table_.as_f64(prompts.front()).size();
  Tensor raw({prompts.size(), dim});
  for (std::size_t r = 0; r < prompts.size(); ++r) {
    const numerics::TensorD row = table_.as_f64(prompts[r]);
    if (row.size() != dim) throw DimensionError("embedding for \"" + prompts[r] + "\" has a different length");
    for (std::size_t c = 0; c < dim; ++c) raw(r, c) = static_cast<float>(row[c]);
  }
  return numerics::l2_normalize(raw, 1).tensor;
}

EmbeddingTable make_table(const std::vector<std::string>& prompts, const Tensor& features) {
  if (features.rank() != 2 || features.rows() != prompts.size()) {
    throw DimensionError("make_table: one feature row per prompt required");
  }
  backbone::TensorContainer c;
  for (std::size_t r = 0; r < prompts.size(); ++r) c.put(prompts[r], features.slice_rows(r, r + 1).reshaped({features.cols()}));
  return EmbeddingTable(std::move(c));
}

Tensor embed_prompts(const std::vector<std::string>& prompts, const TextEncoder& encoder) {
  return std::visit([&](const auto& e) { return e.embed(prompts); }, encoder);
}

PromptDistribution sample_distribution(const PromptTemplateSet& set, const std::string& object_name,
                                       const TextEncoder& encoder) {
  const ComposedPrompts prompts = compose_prompts(set, object_name);
  PromptDistribution d;
  d.object_name = object_name;
  d.normal_features = embed_prompts(prompts.normal, encoder);
  d.abnormal_features = embed_prompts(prompts.abnormal, encoder);
  d.source = std::holds_alternative<EmbeddingTable>(encoder) ? FeatureSource::Imported : FeatureSource::Synthetic;
  return d;
}

backbone::TensorContainer to_container(const PromptDistribution& distribution) {
  backbone::TensorContainer c;
  c.put("normal_features", distribution.normal_features);
  c.put("abnormal_features", distribution.abnormal_features);
  c.put("source", Tensor({1}, {distribution.source == FeatureSource::Imported ? 1.0f : 0.0f}));
  return c;
}

PromptDistribution distribution_from_container(const backbone::TensorContainer& container) {
  PromptDistribution d;
  d.normal_features = container.f32("normal_features");
  d.abnormal_features = container.f32("abnormal_features");
  if (container.contains("source") && container.f32("source")[0] != 0.0f) d.source = FeatureSource::Imported;
  return d;
}

}  // namespace clipad::prompts
