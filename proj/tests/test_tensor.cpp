#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "calmargin/tensor.hpp"
#include "calmargin/tensor_io.hpp"
#include "support.hpp"

using namespace calmargin;
using calmargin::testing::random_logits;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::kValidation;
}

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "calmargin_test_tensor";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
  const std::vector<double> l{0.0, 0.0, 0.0};
  std::vector<double> s(3);
  softmax(l, s);
  for (double v : s) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("softmax saturates without overflow") {
  const std::vector<double> l{1000.0, 0.0};
  std::vector<double> s(2);
  softmax(l, s);
  CHECK(s[0] == 1.0);
  CHECK(s[1] >= 0.0);
  CHECK(s[1] < 1e-300);
  CHECK(std::isfinite(s[1]));
}

TEST_CASE("softmax of [1, 0] against long double evaluation") {
  const std::vector<double> l{1.0, 0.0};
  std::vector<double> s(2);
  softmax(l, s);
  const long double e = std::exp(1.0L);
  CHECK(std::abs(s[0] - static_cast<double>(e / (e + 1.0L))) <= 1e-16);
  CHECK(std::abs(s[1] - static_cast<double>(1.0L / (e + 1.0L))) <= 1e-16);
}

TEST_CASE("logit distances") {
  CHECK(logit_distances(std::vector<double>{2, 1, 0}) == std::vector<double>{0, 1, 2});
  CHECK(logit_distances(std::vector<double>{4.5, 4.5, 4.5}) == std::vector<double>{0, 0, 0});
  CHECK(logit_distances(std::vector<double>{-1, 3, 0.5}) == std::vector<double>{4, 0, 2.5});
}

TEST_CASE("argmax ties go to the lowest index") {
  CHECK(argmax(std::vector<double>{1, 3, 3, 0}) == 1);
  CHECK(argmax(std::vector<double>{2, 2}) == 0);
}

TEST_CASE("field validation") {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const double inf = std::numeric_limits<double>::infinity();
  CHECK(code_of([&] { LogitField(1, 1, 2, {0.0, nan}); }) == ErrorCode::kValidation);
  CHECK(code_of([&] { LogitField(1, 1, 2, {inf, 0.0}); }) == ErrorCode::kValidation);
  CHECK(code_of([&] { LogitField(1, 1, 1, {0.0}); }) == ErrorCode::kValidation);
  CHECK(code_of([&] { LogitField(1, 2, 2, {0.0, 1.0}); }) == ErrorCode::kShapeMismatch);
  CHECK(code_of([&] { LabelField(1, 2, 3, {0, 3}); }) == ErrorCode::kValidation);
  CHECK(code_of([&] { LabelField(1, 1, 3, {0}, 3); }) == ErrorCode::kValidation);
  CHECK(code_of([&] { SoftLabelField(1, 1, 2, {0.7, 0.7}); }) == ErrorCode::kValidation);
  CHECK(code_of([&] { SoftLabelField(1, 1, 2, {1.5, -0.5}); }) == ErrorCode::kValidation);
  CHECK(code_of([&] { ProbField(1, 1, 2, {0.4, 0.4}); }) == ErrorCode::kValidation);
}

TEST_CASE("softmax field sums to one and is shift invariant") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + rng.below(7);
    const LogitField l = random_logits(rng, 3, 2, k, 5.0);
    const double c = rng.uniform(-50.0, 50.0);
    std::vector<double> shifted = l.values();
    for (double& v : shifted) v += c;
    const ProbField a = softmax(l);
    const ProbField b = softmax(LogitField(3, 2, k, shifted));
    for (std::size_t p = 0; p < l.num_pixels(); ++p) {
      double sum = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        sum += a.pixel(p)[j];
        CHECK(std::abs(a.pixel(p)[j] - b.pixel(p)[j]) <= 1e-12);
      }
      CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("distance vectors vanish exactly at the argmax") {
  Rng rng(12);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t k = 2 + rng.below(7);
    std::vector<double> l(k);
    // Coarse values make ties common.
    for (double& v : l) v = static_cast<double>(rng.below(4));
    const auto d = logit_distances(l);
    const std::size_t top = argmax(l);
    CHECK(d[top] == 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      CHECK(d[j] >= 0.0);
      if (d[j] == 0.0) CHECK(j >= top);
    }
  }
}

TEST_CASE("log-sum-exp sandwich") {
  Rng rng(13);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t k = 2 + rng.below(7);
    const auto l = calmargin::testing::normal_vector(rng, k, 20.0);
    const double mx = *std::max_element(l.begin(), l.end());
    const double lse = log_sum_exp(l);
    CHECK(mx <= lse);
    CHECK(lse <= mx + std::log(static_cast<double>(k)) + 1e-12);
  }
}

TEST_CASE("log-softmax agrees with log of softmax") {
  const std::vector<double> l{0.3, -1.2, 2.5, 0.0};
  std::vector<double> ls(4), s(4);
  log_softmax(l, ls);
  softmax(l, s);
  for (std::size_t j = 0; j < 4; ++j) CHECK(ls[j] == doctest::Approx(std::log(s[j])).epsilon(1e-14));
}

TEST_CASE("predict takes the per-pixel argmax") {
  const LogitField l(1, 3, 3, {0, 5, 1, 2, 2, 0, -1, -2, -0.5});
  const LabelField pred = predict(l, 0);
  CHECK(pred.values() == std::vector<std::int32_t>{1, 0, 2});
}

TEST_CASE("CALT round trip is bit identical") {
  Rng rng(14);
  const LogitField l = random_logits(rng, 2, 2, 3, 3.0);
  const auto path = scratch("logits.calt");
  save_tensor(l, path);
  const LogitField back = to_logit_field(load_tensor(path));
  CHECK(back.height() == 2);
  CHECK(back.width() == 2);
  CHECK(back.num_classes() == 3);
  CHECK(std::memcmp(back.values().data(), l.values().data(), 12 * sizeof(double)) == 0);

  const auto bytes = encode_tensor(to_tensor(l));
  CHECK(encode_tensor(load_tensor(path)) == bytes);
}

TEST_CASE("CALT round trip of a 1x1x2 field") {
  const LogitField l(1, 1, 2, {0.5, -0.5});
  const LogitField back = to_logit_field(decode_tensor(encode_tensor(to_tensor(l))));
  CHECK(back.values() == std::vector<double>{0.5, -0.5});
}

TEST_CASE("CALT label round trip") {
  const LabelField y(2, 3, 4, {0, 1, 2, 3, 2, 1});
  const auto path = scratch("labels.calt");
  save_tensor(y, path);
  const LabelField back = to_label_field(load_tensor(path), 4);
  CHECK(back.values() == y.values());
  CHECK(back.height() == 2);
  CHECK(back.width() == 3);
}

TEST_CASE("CALT header layout") {
  const Float64Tensor t{{1, 2}, {1.0, -2.0}};
  const auto bytes = encode_tensor(t);
  REQUIRE(bytes.size() == 4 + 3 + 8 + 16);
  CHECK(std::memcmp(bytes.data(), "CALT", 4) == 0);
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  CHECK(bytes[6] == 2);
  // Little-endian u32 dims.
  CHECK(bytes[7] == 1);
  CHECK(bytes[8] == 0);
  CHECK(bytes[11] == 2);
}

TEST_CASE("CALT decode errors have distinct codes") {
  const auto good = encode_tensor(Int32Tensor{{2, 2}, {0, 1, 2, 3}});

  auto bad_magic = good;
  bad_magic[0] = 'X';
  auto bad_version = good;
  bad_version[4] = 9;
  auto bad_dtype = good;
  bad_dtype[5] = 7;
  auto truncated = good;
  truncated.pop_back();
  auto trailing = good;
  trailing.push_back(0);
  // rank 3 with dims 2^32-1 each: the element count overflows 64 bits.
  std::vector<std::uint8_t> overflow{'C', 'A', 'L', 'T', 1, 0, 3};
  for (int i = 0; i < 12; ++i) overflow.push_back(0xFF);

  CHECK(code_of([&] { decode_tensor(bad_magic); }) == ErrorCode::kBadMagic);
  CHECK(code_of([&] { decode_tensor(bad_version); }) == ErrorCode::kBadVersion);
  CHECK(code_of([&] { decode_tensor(bad_dtype); }) == ErrorCode::kDtypeMismatch);
  CHECK(code_of([&] { decode_tensor(truncated); }) == ErrorCode::kTruncatedPayload);
  CHECK(code_of([&] { decode_tensor(trailing); }) == ErrorCode::kTruncatedPayload);
  CHECK(code_of([&] { decode_tensor(overflow); }) == ErrorCode::kDimensionOverflow);
  CHECK(code_of([&] { decode_tensor(std::vector<std::uint8_t>{'C', 'A'}); }) ==
        ErrorCode::kTruncatedPayload);

  // Well-formed file, wrong field type.
  CHECK(code_of([&] { to_logit_field(decode_tensor(good)); }) == ErrorCode::kDtypeMismatch);
}

TEST_CASE("CALT bad magic message") {
  auto bytes = encode_tensor(Float64Tensor{{1}, {0.0}});
  bytes[1] = 'x';
  const auto path = scratch("bad.calt");
  std::ofstream(path, std::ios::binary)
      .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  CHECK_THROWS_WITH_AS(load_tensor(path), "bad magic", Error);
}

TEST_CASE("loading a missing file is an I/O error") {
  CHECK(code_of([&] { load_tensor(scratch("does_not_exist.calt")); }) == ErrorCode::kIo);
}
