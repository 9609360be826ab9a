#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "rdbm/metrics_io.hpp"
#include "rdbm/random.hpp"

using namespace rdbm;

namespace {

TensorGrid random_grid(std::vector<std::size_t> shape, std::uint64_t seed) {
  TensorGrid t(std::move(shape));
  RandomStream rng(seed, 0);
  for (auto& v : t.raw()) v = rng.uniform();
  return t;
}

}  // namespace

TEST(Psnr, Examples) {
  const TensorGrid a({2, 2}, 0.5);
  EXPECT_TRUE(std::isinf(psnr(a, a)));
  EXPECT_NEAR(psnr(a, TensorGrid({2, 2}, 0.6)), 20.0, 1e-12);
  EXPECT_NEAR(psnr(TensorGrid({1}, 0.0), TensorGrid({1}, 1.0)), 0.0, 1e-15);
  EXPECT_THROW(psnr(a, TensorGrid({4})), ShapeError);
  EXPECT_THROW(psnr(a, a, 0.0), std::invalid_argument);
}

TEST(Mse, MatchesNaiveSum) {
  const auto a = random_grid({7, 9}, 1), b = random_grid({7, 9}, 2);
  double naive = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) naive += std::pow(a[k] - b[k], 2);
  EXPECT_NEAR(mse(a, b), naive / 63.0, 1e-12 * naive / 63.0);
  EXPECT_THROW(mse(TensorGrid({0}), TensorGrid({0})), ShapeError);
}

// The payload is f32, so only f32-representable values survive unchanged.
TensorGrid f32_grid(std::vector<std::size_t> shape, std::uint64_t seed) {
  auto t = random_grid(std::move(shape), seed);
  for (auto& v : t.values()) v = static_cast<double>(static_cast<float>(v));
  return t;
}

TEST(TensorFile, RoundTripIsExact) {
  const auto t = f32_grid({3, 4, 5}, 3);
  std::stringstream ss;
  write_tensor(ss, t);
  EXPECT_EQ(read_tensor(ss), t);
}

TEST(TensorFile, RejectsMalformedInput) {
  std::stringstream bad("RDBX");
  EXPECT_THROW(read_tensor(bad), FormatError);
  std::stringstream ss;
  write_tensor(ss, random_grid({4, 4}, 1));
  const std::string s = ss.str();
  std::stringstream cut(s.substr(0, s.size() - 3));
  EXPECT_THROW(read_tensor(cut), FormatError);
}

TEST(Pnm, QuantisesHalfTo128) {
  std::stringstream ss;
  write_pnm(ss, TensorGrid({1, 1}, 0.5));
  const std::string s = ss.str();
  EXPECT_EQ(s.substr(0, 11), "P5\n1 1\n255\n");
  EXPECT_EQ(static_cast<unsigned char>(s.back()), 128);
  EXPECT_EQ(quantize_8bit(-3.0), 0);
  EXPECT_EQ(quantize_8bit(7.0), 255);
}

TEST(Pnm, GrayAndColourRoundTripWithinHalfStep) {
  for (auto shape : {std::vector<std::size_t>{5, 7}, std::vector<std::size_t>{4, 3, 3}}) {
    const auto t = random_grid(shape, 4);
    std::stringstream ss;
    write_pnm(ss, t);
    const auto back = read_pnm(ss);
    ASSERT_EQ(back.shape(), t.shape());
    for (std::size_t k = 0; k < t.size(); ++k) EXPECT_LE(std::abs(back[k] - t[k]), 0.5 / 255.0 + 1e-12);
    std::stringstream again;
    write_pnm(again, back);
    std::stringstream first;
    write_pnm(first, t);
    EXPECT_EQ(again.str(), first.str());
  }
}

TEST(Pnm, HeaderCommentsAccepted) {
  std::stringstream ss("P5\n# made by hand\n2 1\n255\n\x10\x20");
  const auto t = read_pnm(ss);
  EXPECT_EQ(t.shape(), (std::vector<std::size_t>{1, 2}));
  EXPECT_DOUBLE_EQ(t[1], 32.0 / 255.0);
}

TEST(Pnm, RejectsMalformedHeaders) {
  for (const char* text : {"P2\n1 1\n255\n", "P5\nx 1\n255\n", "P5\n1 1\n65535\n", "P5\n2 2\n255\n\x01",
                           "P5\n99999999 99999999\n255\n"}) {
    std::stringstream ss(text);
    EXPECT_THROW(read_pnm(ss), FormatError) << text;
  }
  std::stringstream out;
  EXPECT_THROW(write_pnm(out, TensorGrid({2, 2, 2})), ShapeError);
}

TEST(Files, DispatchOnExtension) {
  const auto dir = std::filesystem::temp_directory_path() / "rdbm_io_test";
  std::filesystem::create_directories(dir);
  const auto t = f32_grid({3, 3}, 5);
  write_image_or_tensor(dir / "a.bin", t);
  EXPECT_EQ(read_image_or_tensor(dir / "a.bin"), t);
  write_image_or_tensor(dir / "a.pgm", t);
  EXPECT_EQ(read_image_or_tensor(dir / "a.pgm").shape(), t.shape());
  EXPECT_THROW(read_image_or_tensor(dir / "missing.bin"), std::exception);
  std::filesystem::remove_all(dir);
}

TEST(Csv, SeventeenDigitsRoundTrip) {
  const std::vector<std::vector<double>> rows{{0.1, 1.0 / 3.0, std::nextafter(1.0, 2.0)}, {-2e-300, 1e300, 0.0}};
  std::stringstream ss;
  write_csv(ss, {"a", "b", "c"}, rows);
  const auto back = read_csv(ss);
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back[0], (std::vector<std::string>{"a", "b", "c"}));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(std::stod(back[r + 1][c]), rows[r][c]);
  }
}

TEST(Csv, NonFiniteAndQuotedFields) {
  EXPECT_EQ(format_number(std::numeric_limits<double>::infinity()), "inf");
  EXPECT_EQ(format_number(std::nan("")), "nan");
  std::stringstream ss;
  write_csv(ss, {"name", "detail"}, std::vector<std::vector<std::string>>{{"x", "a,b"}, {"y", "say \"hi\""}});
  EXPECT_EQ(ss.str(), "name,detail\nx,\"a,b\"\ny,\"say \"\"hi\"\"\"\n");
}

TEST(Svg, OnePolylinePerSeries) {
  std::vector<PlotSeries> s{{"one", {0, 1, 2}, {0, 1, 4}}, {"two", {0, 1, 2}, {1, INFINITY, 3}}};
  std::stringstream ss;
  write_svg_plot(ss, s, {.title = "t", .y_label = "y"});
  const std::string out = ss.str();
  std::size_t count = 0;
  for (std::size_t pos = out.find("<polyline"); pos != std::string::npos; pos = out.find("<polyline", pos + 1)) ++count;
  EXPECT_EQ(count, 2u);
  EXPECT_NE(out.find("one"), std::string::npos);
  EXPECT_EQ(out.rfind("</svg>"), out.size() - 7);
}
