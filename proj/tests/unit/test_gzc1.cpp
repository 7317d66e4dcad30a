#include <cstring>

#include "doctest.h"
#include "helpers.hpp"

#include "gazeclass/gzc1.hpp"

using namespace gazeclass;

namespace {

WeightSet sample_weights() {
  WeightSet w;
  w.push_back({"a.weight", testing::random_tensor<float>({2, 3}, 1)});
  w.push_back({"a.bias", Tensor<float>({2}, std::vector<float>{-0.0f, 1e-38f})});
  w.push_back({"b.weight", testing::random_tensor<double>({1, 2, 2, 2}, 2)});
  w.push_back({"名前", Tensor<float>({1}, 3.0f)});
  return w;
}

std::uint32_t read_u32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return std::uint32_t(b[at]) | std::uint32_t(b[at + 1]) << 8 | std::uint32_t(b[at + 2]) << 16 |
         std::uint32_t(b[at + 3]) << 24;
}

}  // namespace

TEST_SUITE("gzc1") {
  TEST_CASE("header layout is little-endian") {
    const auto bytes = encode_gzc1(sample_weights());
    REQUIRE(bytes.size() > 12);
    CHECK(std::memcmp(bytes.data(), "GZC1", 4) == 0);
    CHECK(read_u32(bytes, 4) == kGzcVersion);
    CHECK(read_u32(bytes, 8) == 4);
    CHECK(read_u32(bytes, 12) == 8);  // "a.weight"
    CHECK(std::memcmp(bytes.data() + 16, "a.weight", 8) == 0);
    CHECK(read_u32(bytes, 24) == std::uint32_t(DType::f32));
    CHECK(read_u32(bytes, 28) == 2);
    CHECK(read_u32(bytes, 32) == 2);
    CHECK(read_u32(bytes, 36) == 3);
  }

  TEST_CASE("encode-decode-encode is byte identical") {
    const auto w = sample_weights();
    const auto bytes = encode_gzc1(w);
    const auto back = decode_gzc1(bytes);
    REQUIRE(back.size() == w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      CHECK(back[i].name == w[i].name);
      CHECK(back[i].value == w[i].value);
    }
    CHECK(encode_gzc1(back) == bytes);
  }

  TEST_CASE("file round trip and lookup") {
    testing::TempDir dir("gzc1");
    write_gzc1(dir / "w.gzc", sample_weights());
    const auto back = read_gzc1(dir / "w.gzc");
    CHECK(find_tensor(back, "b.weight") != nullptr);
    CHECK(find_tensor(back, "b.weight")->dtype() == DType::f64);
    CHECK(find_tensor(back, "missing") == nullptr);
    CHECK_THROWS(read_gzc1(dir / "absent.gzc"));
  }

  TEST_CASE("corrupt input is rejected") {
    auto bytes = encode_gzc1(sample_weights());
    SUBCASE("magic") {
      bytes[0] = 'X';
      CHECK_THROWS_AS(decode_gzc1(bytes), FormatError);
    }
    SUBCASE("version") {
      bytes[4] = 9;
      CHECK_THROWS_AS(decode_gzc1(bytes), FormatError);
    }
    SUBCASE("truncated") {
      bytes.resize(bytes.size() - 3);
      CHECK_THROWS_AS(decode_gzc1(bytes), FormatError);
    }
    SUBCASE("trailing bytes") {
      bytes.push_back(0);
      CHECK_THROWS_AS(decode_gzc1(bytes), FormatError);
    }
    SUBCASE("unknown dtype") {
      bytes[24] = 7;
      CHECK_THROWS_AS(decode_gzc1(bytes), FormatError);
    }
    SUBCASE("empty") {
      CHECK_THROWS_AS(decode_gzc1({}), FormatError);
    }
  }

  TEST_CASE("network parameters export and import") {
    Network<float> net({2, 4, 4}, {conv2d("c", 3, 3, 1, 1), relu("r"), flatten("f"), dense("fc", 2)});
    net.initialize(4);
    const auto w = export_params(net);
    CHECK(find_tensor(w, "c.weight") != nullptr);
    CHECK(find_tensor(w, "fc.bias") != nullptr);

    Network<float> other({2, 4, 4}, {conv2d("c", 3, 3, 1, 1), relu("r"), flatten("f"), dense("fc", 2)});
    other.initialize(99);
    import_params(other, w);
    CHECK(other.checksum() == net.checksum());

    Network<double> wide({2, 4, 4}, {conv2d("c", 3, 3, 1, 1), relu("r"), flatten("f"), dense("fc", 2)});
    import_params(wide, w);
    CHECK(wide.cast<float>().checksum() == net.checksum());

    Network<float> wrong({2, 4, 4}, {conv2d("c", 4, 3, 1, 1), relu("r"), flatten("f"), dense("fc", 2)});
    CHECK_THROWS(import_params(wrong, w));
    WeightSet partial(w.begin(), w.begin() + 1);
    CHECK_THROWS(import_params(other, partial));
  }
}
