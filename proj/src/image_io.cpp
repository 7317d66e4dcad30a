#include "gazeclass/image_io.hpp"

#include <cctype>
#include <fstream>
#include <iterator>
#include <string>

namespace gazeclass {

namespace {

struct PnmHeader {
  std::string magic;
  std::size_t width = 0, height = 0;
  std::uint32_t maxval = 0;
};

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Parses the header and returns the offset of the first payload byte.
std::size_t parse_header(const std::vector<std::uint8_t>& b, PnmHeader& h,
                         const std::filesystem::path& path) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& why) { throw FormatError(path.string() + ": " + why); };
  auto token = [&]() {
    for (;;) {
      while (pos < b.size() && std::isspace(b[pos])) ++pos;
      if (pos < b.size() && b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    std::string t;
    while (pos < b.size() && !std::isspace(b[pos])) t.push_back(static_cast<char>(b[pos++]));
    if (t.empty()) fail("truncated netpbm header");
    return t;
  };
  auto number = [&]() -> std::size_t {
    const auto t = token();
    for (const char c : t) {
      if (!std::isdigit(static_cast<unsigned char>(c))) fail("bad number '" + t + "' in header");
    }
    return std::stoul(t);
  };
  h.magic = token();
  if (h.magic != "P5" && h.magic != "P6") fail("unsupported netpbm magic '" + h.magic + "'");
  h.width = number();
  h.height = number();
  h.maxval = static_cast<std::uint32_t>(number());
  if (h.width == 0 || h.height == 0) fail("image dimensions must be positive");
  if (h.maxval == 0 || h.maxval > 65535) fail("maxval out of range");
  if (pos >= b.size()) fail("missing pixel data");
  return pos + 1;  // single whitespace byte after maxval
}

void write_bytes(const std::filesystem::path& path, const std::string& header,
                 const std::vector<std::uint8_t>& payload) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  f.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!f) throw Error("write failed for '" + path.string() + "'");
}

}  // namespace

GrayImage read_pgm(const std::filesystem::path& path) {
  const auto b = slurp(path);
  PnmHeader h;
  auto pos = parse_header(b, h, path);
  if (h.magic != "P5") throw FormatError(path.string() + ": expected a P5 graymap");
  const std::size_t bpp = h.maxval > 255 ? 2 : 1;
  const std::size_t n = h.width * h.height;
  if (b.size() - pos < n * bpp) throw FormatError(path.string() + ": truncated pixel data");
  GrayImage g{h.width, h.height, h.maxval, std::vector<std::uint16_t>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    g.values[i] = bpp == 1 ? b[pos + i]
                           : static_cast<std::uint16_t>((b[pos + 2 * i] << 8) | b[pos + 2 * i + 1]);
  }
  return g;
}

void write_pgm(const std::filesystem::path& path, const GrayImage& g) {
  const std::size_t bpp = g.maxval > 255 ? 2 : 1;
  std::vector<std::uint8_t> payload;
  payload.reserve(g.values.size() * bpp);
  for (const auto v : g.values) {
    if (bpp == 2) payload.push_back(static_cast<std::uint8_t>(v >> 8));
    payload.push_back(static_cast<std::uint8_t>(v & 0xff));
  }
  write_bytes(path,
              "P5\n" + std::to_string(g.width) + " " + std::to_string(g.height) + "\n" +
                  std::to_string(g.maxval) + "\n",
              payload);
}

StimulusImage read_stimulus(const std::filesystem::path& path) {
  const auto b = slurp(path);
  PnmHeader h;
  const auto pos = parse_header(b, h, path);
  if (h.magic == "P5") {
    const auto g = read_pgm(path);
    StimulusImage img{g.width, g.height, std::vector<std::uint8_t>(g.values.size() * 3)};
    for (std::size_t i = 0; i < g.values.size(); ++i) {
      const auto v = static_cast<std::uint8_t>((g.values[i] * 255u + g.maxval / 2) / g.maxval);
      img.rgb[3 * i] = img.rgb[3 * i + 1] = img.rgb[3 * i + 2] = v;
    }
    return img;
  }
  if (h.maxval != 255) throw FormatError(path.string() + ": only 8-bit P6 images are supported");
  const std::size_t n = h.width * h.height * 3;
  if (b.size() - pos < n) throw FormatError(path.string() + ": truncated pixel data");
  return {h.width, h.height, std::vector<std::uint8_t>(b.begin() + pos, b.begin() + pos + n)};
}

void write_ppm(const std::filesystem::path& path, const StimulusImage& image) {
  write_bytes(path, "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n",
              image.rgb);
}

Grid image_plane(const StimulusImage& image, std::size_t channel) {
  Grid g(image.width, image.height);
  for (std::size_t i = 0; i < g.size(); ++i) g.values[i] = image.rgb[3 * i + channel] / 255.0;
  return g;
}

}  // namespace gazeclass
