#include "clipad/backbone/container.hpp"

#include <bit>
#include <type_traits>
#include <cstring>
#include <fstream>
#include <iterator>

#include "clipad/errors.hpp"

namespace clipad::backbone {

namespace {

constexpr char kMagic[4] = {'N', 'T', 'C', '1'};

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  template <typename U>
  void put_le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}
  std::uint8_t u8() {
    need(1, "u8");
    return in_[pos_++];
  }
  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string string(std::size_t n) {
    need(n, "name");
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return in_.size() - pos_; }
  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw TruncatedFileError(std::string("tensor container truncated while reading ") + what);
    }
  }

 private:
  template <typename U>
  U get_le() {
    need(sizeof(U), "integer");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(in_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

}  // namespace

void TensorContainer::insert(const std::string& name, Entry value) {
  if (auto it = index_.find(name); it != index_.end()) {
    entries_[it->second].second = std::move(value);
    return;
  }
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, std::move(value));
}

void TensorContainer::put(const std::string& name, Tensor tensor) { insert(name, std::move(tensor)); }
void TensorContainer::put(const std::string& name, TensorD tensor) { insert(name, std::move(tensor)); }

std::vector<std::string> TensorContainer::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

const TensorContainer::Entry& TensorContainer::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw MissingTensorError(name);
  return entries_[it->second].second;
}

DType TensorContainer::dtype(const std::string& name) const {
  return std::holds_alternative<Tensor>(entry(name)) ? DType::F32 : DType::F64;
}

Shape TensorContainer::shape(const std::string& name) const {
  return std::visit([](const auto& t) { return t.shape(); }, entry(name));
}

const Tensor& TensorContainer::f32(const std::string& name) const {
  const auto* t = std::get_if<Tensor>(&entry(name));
  if (!t) throw FormatError("tensor '" + name + "' is f64, expected f32");
  return *t;
}

const TensorD& TensorContainer::f64(const std::string& name) const {
  const auto* t = std::get_if<TensorD>(&entry(name));
  if (!t) throw FormatError("tensor '" + name + "' is f32, expected f64");
  return *t;
}

TensorD TensorContainer::as_f64(const std::string& name) const {
  return std::visit(
      [](const auto& t) -> TensorD {
        if constexpr (std::is_same_v<std::decay_t<decltype(t)>, TensorD>) {
          return t;
        } else {
          return t.template cast<double>();
        }
      },
      entry(name));
}

void TensorContainer::require(const std::string& name, const Shape& shape) const {
  const Shape actual = this->shape(name);
  if (actual != shape) {
    throw ShapeMismatchError("tensor '" + name + "' has shape " + numerics::shape_string(actual) +
                             ", expected " + numerics::shape_string(shape));
  }
}

std::vector<std::uint8_t> serialize(const TensorContainer& container) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(static_cast<std::uint32_t>(container.size()));
  for (const auto& [name, value] : container.entries()) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    const Shape shape = std::visit([](const auto& t) { return t.shape(); }, value);
    w.u32(static_cast<std::uint32_t>(shape.size()));
    for (std::size_t e : shape) w.u64(e);
    w.u8(static_cast<std::uint8_t>(std::holds_alternative<Tensor>(value) ? DType::F32 : DType::F64));
  }
  for (const auto& [name, value] : container.entries()) {
    if (const auto* t = std::get_if<Tensor>(&value)) {
      for (float v : t->data()) w.f32(v);
    } else {
      for (double v : std::get<TensorD>(value).data()) w.f64(v);
    }
  }
  return w.take();
}

TensorContainer deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4) throw TruncatedFileError("tensor container shorter than its magic");
  if (std::memcmp(bytes.data(), kMagic, 3) != 0) throw BadMagicError("not a tensor container (bad magic)");
  if (bytes[3] != static_cast<std::uint8_t>(kMagic[3])) {
    throw BadMagicError("unsupported tensor container version '" + std::string(1, static_cast<char>(bytes[3])) +
                        "'");
  }
  Reader r(bytes);
  r.string(4);
  const std::uint32_t count = r.u32();

  struct Header {
    std::string name;
    Shape shape;
    DType dtype;
  };
  std::vector<Header> headers;
  for (std::uint32_t i = 0; i < count; ++i) {
    Header h;
    const std::uint32_t len = r.u32();
    h.name = r.string(len);
    const std::uint32_t rank = r.u32();
    r.need(static_cast<std::size_t>(rank) * 8, "extents");
    for (std::uint32_t d = 0; d < rank; ++d) h.shape.push_back(static_cast<std::size_t>(r.u64()));
    const std::uint8_t code = r.u8();
    if (code > 1) throw FormatError("tensor '" + h.name + "' has unknown dtype code " + std::to_string(code));
    h.dtype = static_cast<DType>(code);
    headers.push_back(std::move(h));
  }

  TensorContainer out;
  for (const auto& h : headers) {
    if (out.contains(h.name)) throw FormatError("duplicate tensor name '" + h.name + "'");
    const std::size_t n = numerics::element_count(h.shape);
    r.need(n * dtype_size(h.dtype), "payload");
    if (h.dtype == DType::F32) {
      std::vector<float> data(n);
      for (auto& v : data) v = r.f32();
      out.put(h.name, Tensor(h.shape, std::move(data)));
    } else {
      std::vector<double> data(n);
      for (auto& v : data) v = r.f64();
      out.put(h.name, TensorD(h.shape, std::move(data)));
    }
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after tensor container payloads");
  return out;
}

void save_container(const TensorContainer& container, const std::filesystem::path& path) {
  const auto bytes = serialize(container);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

TensorContainer load_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace clipad::backbone
