#include "clipad/data/data_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "clipad/errors.hpp"
#include "clipad/numerics/random.hpp"

namespace clipad::data {

namespace {

constexpr double kTextureLow = 60.0;
constexpr double kTextureHigh = 195.0;
constexpr std::uint8_t kPngSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Image decode_png(const std::vector<std::uint8_t>& bytes, const fs::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size())) {
    throw FormatError("'" + path.string() + "': " + png.message);
  }
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image image(png.width, png.height, color ? 3 : 1);
  if (!png_image_finish_read(&png, nullptr, image.pixels.data(), 0, nullptr)) {
    png_image_free(&png);
    throw FormatError("'" + path.string() + "': " + png.message);
  }
  return image;
}

Image decode_pnm(const std::vector<std::uint8_t>& bytes, const fs::path& path) {
  std::size_t pos = 2;
  auto fail = [&](const std::string& why) { return FormatError("'" + path.string() + "': " + why); };
  auto next_int = [&]() -> std::size_t {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::size_t value = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      value = value * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
      ++digits;
    }
    if (digits == 0) throw fail("malformed header");
    return value;
  };
  const std::size_t channels = bytes[1] == '5' ? 1 : 3;
  const std::size_t width = next_int(), height = next_int(), maxval = next_int();
  if (maxval == 0 || maxval > 255) throw fail("only 8-bit PNM files are supported");
  ++pos;  // single whitespace after maxval
  Image image(width, height, channels);
  if (bytes.size() < pos + image.pixels.size()) throw fail("truncated pixel data");
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), image.pixels.size(), image.pixels.begin());
  return image;
}

std::optional<fs::path> find_with_extension(const fs::path& dir, const std::string& stem,
                                            std::initializer_list<const char*> extensions) {
  for (const char* ext : extensions) {
    fs::path candidate = dir / (stem + ext);
    if (fs::exists(candidate)) return candidate;
  }
  return std::nullopt;
}

bool is_image_file(const fs::path& p) {
  const std::string ext = p.extension().string();
  return ext == ".png" || ext == ".pgm" || ext == ".ppm";
}

std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories) {
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (directories ? entry.is_directory() : (entry.is_regular_file() && is_image_file(entry.path()))) {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end(), [](const fs::path& a, const fs::path& b) {
    return a.filename().string() < b.filename().string();
  });
  return out;
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

std::string folder_name(Defect d) { return to_string(d); }

// Clean texture in [kTextureLow, kTextureHigh] for every channel.
Image render_texture(const SyntheticSpec& spec, numerics::Rng& rng) {
  const std::size_t n = spec.image_size;
  std::array<double, 3> base{};
  const std::array<double, 3> tone{128.0, 120.0, 110.0};
  for (std::size_t c = 0; c < 3; ++c) base[c] = tone[c] + rng.uniform(-1.0, 1.0);
  std::vector<double> field(n * n, 0.0);

  switch (spec.texture) {
    case Texture::Stripes: {
      const double angle = rng.uniform(-0.3, 0.3);
      const double period = rng.uniform(12.0, 20.0);
      const double phase = rng.uniform(0.0, 6.283185307179586);
      const double ca = std::cos(angle), sa = std::sin(angle);
      for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x)
          field[y * n + x] = 25.0 * std::sin(6.283185307179586 * (ca * x + sa * y) / period + phase);
      break;
    }
    case Texture::Noise: {
      const std::size_t g = 9;
      std::vector<double> coarse(g * g);
      for (double& v : coarse) v = rng.uniform(-22.0, 22.0);
      const double step = static_cast<double>(n - 1) / static_cast<double>(g - 1);
      for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
          const double fy = y / step, fx = x / step;
          const auto y0 = std::min(static_cast<std::size_t>(fy), g - 2), x0 = std::min(static_cast<std::size_t>(fx), g - 2);
          const double ty = fy - y0, tx = fx - x0;
          const double top = (1 - tx) * coarse[y0 * g + x0] + tx * coarse[y0 * g + x0 + 1];
          const double bot = (1 - tx) * coarse[(y0 + 1) * g + x0] + tx * coarse[(y0 + 1) * g + x0 + 1];
          field[y * n + x] = (1 - ty) * top + ty * bot + rng.uniform(-6.0, 6.0);
        }
      }
      break;
    }
    case Texture::Cells: {
      const std::size_t cells = std::max<std::size_t>(4, (n / 30) * (n / 30));
      std::vector<std::array<double, 3>> seeds(cells);  // x, y, level
      for (auto& s : seeds) s = {rng.uniform(0.0, n), rng.uniform(0.0, n), rng.uniform(-6.0, 6.0)};
      for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
          double d1 = 1e300, d2 = 1e300;
          std::size_t best = 0;
          for (std::size_t k = 0; k < cells; ++k) {
            const double dx = seeds[k][0] - x, dy = seeds[k][1] - y;
            const double d = std::sqrt(dx * dx + dy * dy);
            if (d < d1) {
              d2 = d1;
              d1 = d;
              best = k;
            } else if (d < d2) {
              d2 = d;
            }
          }
          field[y * n + x] = seeds[best][2] - 8.0 * std::exp(-(d2 - d1) / 2.5);
        }
      }
      break;
    }
  }
  Image image(n, n, 3);
  for (std::size_t p = 0; p < n * n; ++p)
    for (std::size_t c = 0; c < 3; ++c) image.pixels[p * 3 + c] = to_byte(std::clamp(base[c] + field[p], kTextureLow, kTextureHigh));
  return image;
}

std::array<int, 3> defect_shift(Defect d, int contrast) {
  std::array<double, 3> dir{};
  switch (d) {
    case Defect::Blob: dir = {1.0, -0.5, -0.5}; break;
    case Defect::Scratch: dir = {-1.0, -1.0, 0.5}; break;
    case Defect::ColorShift: dir = {-0.5, 0.25, 1.0}; break;
  }
  std::array<int, 3> out{};
  for (std::size_t c = 0; c < 3; ++c) out[c] = static_cast<int>(std::lround(dir[c] * contrast));
  return out;
}

// The `area` pixels closest to the defect centre under the family's shape
// distance, with a little per-pixel jitter to roughen the outline.
std::vector<std::size_t> defect_pixels(const SyntheticSpec& spec, Defect d, std::size_t area, numerics::Rng& rng) {
  const std::size_t n = spec.image_size;
  const double margin = static_cast<double>(n) / 6.0;
  const double cx = rng.uniform(margin, n - margin), cy = rng.uniform(margin, n - margin);
  const double angle = rng.uniform(0.0, 3.141592653589793);
  const double aspect = rng.uniform(0.6, 1.6);
  const double ca = std::cos(angle), sa = std::sin(angle);
  std::vector<double> dist(n * n);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
      double s = 0.0;
      switch (d) {
        case Defect::Blob: s = std::sqrt(u * u / aspect + v * v * aspect); break;
        case Defect::Scratch: s = std::abs(v) + 0.08 * std::abs(u); break;
        case Defect::ColorShift: s = std::max(std::abs(u) / aspect, std::abs(v) * aspect); break;
      }
      dist[y * n + x] = s + rng.uniform(0.0, 1.5);
    }
  }
  std::vector<std::size_t> idx(n * n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto closer = [&](std::size_t a, std::size_t b) { return dist[a] != dist[b] ? dist[a] < dist[b] : a < b; };
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(area), idx.end(), closer);
  idx.resize(area);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

Image read_image(const fs::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() >= 8 && std::equal(bytes.begin(), bytes.begin() + 8, kPngSignature)) return decode_png(bytes, path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6')) return decode_pnm(bytes, path);
  throw FormatError("'" + path.string() + "' is neither PNG nor binary PGM/PPM");
}

void write_png(const Image& image, const fs::path& path) {
  if (image.channels != 1 && image.channels != 3) throw ValidationError("write_png: 1 or 3 channels required");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw IoError("cannot write '" + path.string() + "': " + png.message);
  }
}

void write_pnm(const Image& image, const fs::path& path) {
  if (image.channels != 1 && image.channels != 3) throw ValidationError("write_pnm: 1 or 3 channels required");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << (image.channels == 1 ? "P5" : "P6") << '\n' << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw IoError("cannot write '" + path.string() + "'");
}

Tensor read_mask(const fs::path& path) {
  const Image img = read_image(path);
  Tensor mask({img.height, img.width});
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      std::uint8_t v = 0;
      for (std::size_t c = 0; c < img.channels; ++c) v = std::max(v, img.at(x, y, c));
      mask(y, x) = v > 127 ? 1.0f : 0.0f;
    }
  }
  return mask;
}

Image mask_to_image(const Tensor& mask) {
  if (mask.rank() != 2) throw DimensionError("mask_to_image expects a 2-D mask");
  Image img(mask.cols(), mask.rows(), 1);
  for (std::size_t i = 0; i < mask.size(); ++i) img.pixels[i] = mask[i] > 0.5f ? 255 : 0;
  return img;
}

std::size_t DatasetIndex::abnormal_count() const {
  return static_cast<std::size_t>(std::count_if(samples.begin(), samples.end(),
                                                [](const Sample& s) { return s.label == SampleLabel::Abnormal; }));
}

DatasetIndex scan_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw IoError("dataset root '" + root.string() + "' is not a directory");
  DatasetIndex index;
  index.category = root.filename().string();
  if (index.category.empty()) index.category = root.parent_path().filename().string();
  const fs::path test = root / "test";
  if (!fs::is_directory(test)) return index;

  std::vector<std::string> io_problems, problems;
  auto dims = [&](const fs::path& p) -> std::optional<std::pair<std::size_t, std::size_t>> {
    try {
      const Image img = read_image(p);
      return std::make_pair(img.width, img.height);
    } catch (const IoError& e) {
      io_problems.push_back(std::string("unreadable: ") + e.what());
      return std::nullopt;
    }
  };
  for (const fs::path& type_dir : sorted_entries(test, true)) {
    const std::string type = type_dir.filename().string();
    const bool normal = type == "good";
    for (const fs::path& file : sorted_entries(type_dir, false)) {
      Sample sample{file, normal ? SampleLabel::Normal : SampleLabel::Abnormal, std::nullopt, type};
      const auto image_dims = dims(file);
      if (!normal) {
        sample.mask = find_with_extension(root / "ground_truth" / type, file.stem().string() + "_mask", {".png", ".pgm"});
        if (!sample.mask) {
          problems.push_back("missing mask for " + file.string());
        } else if (const auto mask_dims = dims(*sample.mask); image_dims && mask_dims && *image_dims != *mask_dims) {
          problems.push_back("mask size differs from image: " + sample.mask->string());
        }
      }
      index.samples.push_back(std::move(sample));
    }
  }
  if (!io_problems.empty() || !problems.empty()) {
    std::string msg = "dataset '" + root.string() + "' has " + std::to_string(io_problems.size() + problems.size()) +
                      " problem(s):";
    for (const auto& p : io_problems) msg += "\n  " + p;
    for (const auto& p : problems) msg += "\n  " + p;
    if (!io_problems.empty()) throw IoError(msg);
    throw ValidationError(msg);
  }
  return index;
}

Tensor load_sample_mask(const Sample& sample) {
  if (sample.mask) return read_mask(*sample.mask);
  const Image img = read_image(sample.image);
  return Tensor({img.height, img.width});
}

std::string to_string(Texture texture) {
  switch (texture) {
    case Texture::Stripes: return "stripes";
    case Texture::Noise: return "noise";
    case Texture::Cells: return "cells";
  }
  return "?";
}

std::string to_string(Defect defect) {
  switch (defect) {
    case Defect::Blob: return "blob";
    case Defect::Scratch: return "scratch";
    case Defect::ColorShift: return "color_shift";
  }
  return "?";
}

Texture parse_texture(const std::string& name) {
  for (Texture t : {Texture::Stripes, Texture::Noise, Texture::Cells})
    if (to_string(t) == name) return t;
  throw ValidationError("unknown texture '" + name + "' (stripes, noise, cells)");
}

Defect parse_defect(const std::string& name) {
  for (Defect d : {Defect::Blob, Defect::Scratch, Defect::ColorShift})
    if (to_string(d) == name) return d;
  throw ValidationError("unknown defect '" + name + "' (blob, scratch, color_shift)");
}

void SyntheticSpec::validate() const {
  if (image_size < 16) throw ValidationError("synthetic image size must be at least 16");
  if (defects.empty()) throw ValidationError("at least one defect family is required");
  if (min_area == 0 || min_area > max_area) throw ValidationError("defect area range must satisfy 0 < min <= max");
  if (max_area > image_size * image_size / 4) throw ValidationError("defect area may cover at most a quarter of the image");
  if (contrast < 1 || contrast > 60) throw ValidationError("contrast must lie in [1, 60]");
  if (!(anomaly_fraction >= 0.0 && anomaly_fraction <= 1.0)) throw ValidationError("anomaly fraction must lie in [0, 1]");
}

bool is_abnormal(const SyntheticSpec& spec, std::size_t index) {
  const double f = spec.anomaly_fraction;
  return std::floor(static_cast<double>(index + 1) * f) > std::floor(static_cast<double>(index) * f);
}

SyntheticImage synthesize(const SyntheticSpec& spec, std::size_t index) {
  spec.validate();
  numerics::Rng rng(numerics::hash_string("synthetic/" + std::to_string(index), spec.seed));
  SyntheticImage out;
  out.clean = render_texture(spec, rng);
  out.image = out.clean;
  out.mask = Tensor({spec.image_size, spec.image_size});
  out.abnormal = is_abnormal(spec, index);
  if (!out.abnormal) return out;

  out.defect = spec.defects[rng.below(spec.defects.size())];
  out.area = spec.min_area + rng.below(spec.max_area - spec.min_area + 1);
  const auto shift = defect_shift(out.defect, spec.contrast);
  for (std::size_t p : defect_pixels(spec, out.defect, out.area, rng)) {
    out.mask[p] = 1.0f;
    for (std::size_t c = 0; c < 3; ++c) {
      out.image.pixels[p * 3 + c] = static_cast<std::uint8_t>(out.clean.pixels[p * 3 + c] + shift[c]);
    }
  }
  return out;
}

DatasetIndex generate_synthetic(const SyntheticSpec& spec, const fs::path& root) {
  spec.validate();
  std::size_t good = 0;
  std::vector<std::size_t> per_defect(3, 0);
  for (std::size_t i = spec.first_index; i < spec.first_index + spec.count; ++i) {
    const SyntheticImage s = synthesize(spec, i);
    char name[32];
    if (!s.abnormal) {
      std::snprintf(name, sizeof(name), "%03zu", good++);
      write_png(s.image, root / "test" / "good" / (std::string(name) + ".png"));
      continue;
    }
    std::snprintf(name, sizeof(name), "%03zu", per_defect[static_cast<std::size_t>(s.defect)]++);
    const std::string folder = folder_name(s.defect);
    write_png(s.image, root / "test" / folder / (std::string(name) + ".png"));
    write_png(mask_to_image(s.mask), root / "ground_truth" / folder / (std::string(name) + "_mask.png"));
  }
  return scan_dataset(root);
}

std::array<std::uint8_t, 3> colormap(double value) {
  static constexpr std::array<std::array<double, 3>, 5> stops{{
      {0.0, 0.0, 255.0}, {0.0, 255.0, 255.0}, {0.0, 255.0, 0.0}, {255.0, 255.0, 0.0}, {255.0, 0.0, 0.0}}};
  const double v = std::clamp(value, 0.0, 1.0) * 4.0;
  const auto lo = std::min(static_cast<std::size_t>(v), std::size_t{3});
  const double t = v - static_cast<double>(lo);
  std::array<std::uint8_t, 3> out{};
  for (std::size_t c = 0; c < 3; ++c) out[c] = to_byte((1.0 - t) * stops[lo][c] + t * stops[lo + 1][c]);
  return out;
}

Image blend_heatmap(const Tensor& map, const Image& image, double alpha) {
  if (map.rank() != 2 || map.rows() != image.height || map.cols() != image.width) {
    throw DimensionError("heatmap " + numerics::shape_string(map.shape()) + " does not match image " +
                         std::to_string(image.height) + "x" + std::to_string(image.width));
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0, 1]");
  double lo = 1e300, hi = -1e300;
  for (float v : map.values()) {
    if (!std::isfinite(v)) throw ValidationError("heatmap contains non-finite values");
    lo = std::min(lo, static_cast<double>(v));
    hi = std::max(hi, static_cast<double>(v));
  }
  Image out(image.width, image.height, 3);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      const double norm = hi > lo ? (map(y, x) - lo) / (hi - lo) : 0.0;
      const auto color = colormap(norm);
      for (std::size_t c = 0; c < 3; ++c) {
        const double base = image.at(x, y, image.channels == 3 ? c : 0);
        out.at(x, y, c) = to_byte((1.0 - alpha) * base + alpha * color[c]);
      }
    }
  }
  return out;
}

void render_heatmap(const Tensor& map, const Image& image, const fs::path& path, double alpha) {
  write_png(blend_heatmap(map, image, alpha), path);
}

}  // namespace clipad::data
