#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "clipad/image.hpp"
#include "clipad/numerics/tensor.hpp"

namespace clipad::data {

namespace fs = std::filesystem;
using numerics::Tensor;

/// Decodes 8-bit gray or RGB PNG files, or binary PGM (P5) / PPM (P6) files,
/// chosen by file signature.
Image read_image(const fs::path& path);
void write_png(const Image& image, const fs::path& path);
void write_pnm(const Image& image, const fs::path& path);

/// Binary mask [H, W]: 1 where the brightest channel exceeds 127.
Tensor read_mask(const fs::path& path);
Image mask_to_image(const Tensor& mask);

enum class SampleLabel { Normal, Abnormal };

struct Sample {
  fs::path image;
  SampleLabel label = SampleLabel::Normal;
  std::optional<fs::path> mask;
  std::string defect_type;  ///< "good" for normal samples
};

struct DatasetIndex {
  std::string category;
  std::vector<Sample> samples;
  std::size_t abnormal_count() const;
};

/// Indexes `<root>/test/<type>/<name>.{png,pgm,ppm}` with masks at
/// `<root>/ground_truth/<type>/<name>_mask.{png,pgm}`; the "good" folder holds
/// normal samples. Types and files are visited in lexicographic order. Every
/// problem (unreadable file, missing mask, mask size differing from its image)
/// is collected and reported together: IoError if any file is unreadable,
/// ValidationError otherwise. A root without a test folder gives an empty
/// index.
DatasetIndex scan_dataset(const fs::path& root);

/// Mask of a sample at its image's resolution (all zero for normal samples).
Tensor load_sample_mask(const Sample& sample);

enum class Texture { Stripes, Noise, Cells };
enum class Defect { Blob, Scratch, ColorShift };

std::string to_string(Texture texture);
std::string to_string(Defect defect);
Texture parse_texture(const std::string& name);
Defect parse_defect(const std::string& name);

struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t count = 100;
  /// Index of the first image in the seed's image stream. Disjoint ranges of
  /// one seed give disjoint splits.
  std::size_t first_index = 0;
  double anomaly_fraction = 0.5;
  std::size_t image_size = 240;
  Texture texture = Texture::Cells;
  std::vector<Defect> defects{Defect::Blob, Defect::Scratch, Defect::ColorShift};
  std::size_t min_area = 1000;  ///< defect pixels, inclusive
  std::size_t max_area = 3000;
  /// Per-channel intensity shift of defect pixels, at most 60 so that the
  /// [60, 195] texture range never clips.
  int contrast = 60;
  std::string category = "synthetic";

  void validate() const;
};

struct SyntheticImage {
  Image clean;  ///< defect-free texture
  Image image;  ///< texture with the defect applied
  Tensor mask;  ///< exactly the defect pixels
  bool abnormal = false;
  Defect defect = Defect::Blob;
  std::size_t area = 0;
};

/// Whether image `index` of the seed's stream carries a defect.
bool is_abnormal(const SyntheticSpec& spec, std::size_t index);

/// Renders image `index` of the seed's stream (first_index is not applied).
/// Deterministic in (spec, index).
SyntheticImage synthesize(const SyntheticSpec& spec, std::size_t index);

/// Writes images first_index .. first_index + count - 1 in the MVTec-style
/// layout under `root` and returns the scanned index.
DatasetIndex generate_synthetic(const SyntheticSpec& spec, const fs::path& root);

/// Colormap lookup for a value in [0, 1] (blue, cyan, green, yellow, red).
std::array<std::uint8_t, 3> colormap(double value);

/// Min-max normalizes the map (a constant map becomes 0), colours it and
/// alpha-blends it over the image, which must have the map's resolution.
Image blend_heatmap(const Tensor& map, const Image& image, double alpha = 0.5);
void render_heatmap(const Tensor& map, const Image& image, const fs::path& path, double alpha = 0.5);

}  // namespace clipad::data
