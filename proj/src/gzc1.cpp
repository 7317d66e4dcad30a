#include "gazeclass/gzc1.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace gazeclass {

static_assert(std::endian::native == std::endian::little,
              "GZC1 I/O assumes a little-endian host");

const Shape& NamedTensor::shape() const {
  return std::visit([](const auto& t) -> const Shape& { return t.shape(); }, value);
}

namespace {

class Writer {
 public:
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : buf_(b) {}
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, sizeof v);
    return v;
  }
  void bytes(void* p, std::size_t n) {
    if (n > buf_.size() - pos_) throw FormatError("GZC1: truncated file");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

template <typename T>
Tensor<T> read_payload(Reader& r, Shape shape) {
  std::vector<T> data(shape_size(shape));
  r.bytes(data.data(), data.size() * sizeof(T));
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace

std::vector<std::uint8_t> encode_gzc1(const WeightSet& weights) {
  Writer w;
  w.bytes("GZC1", 4);
  w.u32(kGzcVersion);
  w.u32(static_cast<std::uint32_t>(weights.size()));
  for (const auto& e : weights) {
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.u32(static_cast<std::uint32_t>(e.dtype()));
    const auto& shape = e.shape();
    w.u32(static_cast<std::uint32_t>(shape.size()));
    for (const auto d : shape) w.u32(static_cast<std::uint32_t>(d));
    std::visit([&](const auto& t) { w.bytes(t.raw(), t.data().size_bytes()); }, e.value);
  }
  return std::move(w.out);
}

WeightSet decode_gzc1(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "GZC1", 4) != 0) throw FormatError("GZC1: bad magic bytes");
  const auto version = r.u32();
  if (version != kGzcVersion) {
    throw FormatError("GZC1: unsupported format version " + std::to_string(version));
  }
  const auto count = r.u32();
  WeightSet out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor e;
    const auto len = r.u32();
    if (len > bytes.size()) throw FormatError("GZC1: truncated file");
    e.name.resize(len);
    r.bytes(e.name.data(), len);
    const auto dtype = r.u32();
    const auto rank = r.u32();
    if (rank == 0 || rank > 8) throw FormatError("GZC1: bad rank for '" + e.name + "'");
    Shape shape(rank);
    for (auto& d : shape) {
      d = r.u32();
      if (d == 0) throw FormatError("GZC1: zero dimension in '" + e.name + "'");
    }
    if (dtype == static_cast<std::uint32_t>(DType::f32)) {
      e.value = read_payload<float>(r, std::move(shape));
    } else if (dtype == static_cast<std::uint32_t>(DType::f64)) {
      e.value = read_payload<double>(r, std::move(shape));
    } else {
      throw FormatError("GZC1: unknown dtype tag " + std::to_string(dtype));
    }
    out.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("GZC1: trailing bytes after last entry");
  return out;
}

void write_gzc1(const std::filesystem::path& path, const WeightSet& weights) {
  const auto bytes = encode_gzc1(weights);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open '" + tmp + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

WeightSet read_gzc1(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_gzc1(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

const NamedTensor* find_tensor(const WeightSet& weights, const std::string& name) {
  for (const auto& e : weights) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

template <typename T>
WeightSet export_params(const Network<T>& net) {
  WeightSet out;
  for (std::size_t i = 0; i < net.size(); ++i) {
    if (!net.has_params(i)) continue;
    const auto& p = net.params(i);
    out.push_back({net.layer(i).name + ".weight", p.weight});
    if (!p.bias.empty()) out.push_back({net.layer(i).name + ".bias", p.bias});
  }
  return out;
}

template <typename T>
void import_params(Network<T>& net, const WeightSet& weights) {
  auto load = [&](const std::string& name, Tensor<T>& dst) {
    const auto* e = find_tensor(weights, name);
    if (!e) throw FormatError("weights missing tensor '" + name + "'");
    if (e->shape() != dst.shape()) {
      throw ShapeError("tensor '" + name + "' has shape " + shape_to_string(e->shape()) +
                       ", expected " + shape_to_string(dst.shape()));
    }
    std::visit([&](const auto& t) { dst = t.template cast<T>(); }, e->value);
  };
  for (std::size_t i = 0; i < net.size(); ++i) {
    if (!net.has_params(i)) continue;
    auto& p = net.params(i);
    load(net.layer(i).name + ".weight", p.weight);
    if (!p.bias.empty()) load(net.layer(i).name + ".bias", p.bias);
  }
}

template WeightSet export_params(const Network<float>&);
template WeightSet export_params(const Network<double>&);
template void import_params(Network<float>&, const WeightSet&);
template void import_params(Network<double>&, const WeightSet&);

}  // namespace gazeclass
