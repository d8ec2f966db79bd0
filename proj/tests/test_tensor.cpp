#include <random>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"
#include "volnet/tensor.hpp"

using namespace volnet;

namespace {

// Reference moments: mean first, then mean squared deviation, both in long double.
std::pair<long double, long double> two_pass(const std::vector<double>& xs) {
  long double mean = 0;
  for (double x : xs) mean += x;
  mean /= xs.size();
  long double var = 0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return {mean, var / xs.size()};
}

Shape random_shape(std::mt19937_64& rng, int max_rank = 4, int max_extent = 5) {
  std::uniform_int_distribution<int> rank(1, max_rank), extent(1, max_extent);
  Shape shape(std::size_t(rank(rng)));
  for (auto& e : shape) e = extent(rng);
  return shape;
}

}  // namespace

TEST_CASE("create fills every element") {
  const auto zeros = create<float>({2, 2}, 0.0f);
  CHECK(zeros.size() == 4);
  CHECK(zeros.vec().isZero());
  const auto single = create<float>({1}, 7.5f);
  CHECK(single.size() == 1);
  CHECK(single[0] == 7.5f);
  CHECK_THROWS_CODE(create<float>({3, 0}, 1.0f), ErrorCode::InvalidShape);
  CHECK_THROWS_CODE(create<float>({}, 1.0f), ErrorCode::InvalidShape);
  CHECK_THROWS_CODE(create<float>({2, -1}, 1.0f), ErrorCode::InvalidShape);
}

TEST_CASE("indexing inside the shape is total, outside throws") {
  TensorF t({2, 3});
  t.at({1, 2}) = 4.0f;
  CHECK(t[5] == 4.0f);
  CHECK_THROWS_CODE(t.at({2, 0}), ErrorCode::IndexOutOfRange);
  CHECK_THROWS_CODE(t.at({0, -1}), ErrorCode::IndexOutOfRange);
  CHECK_THROWS_CODE(t.at({0}), ErrorCode::IndexOutOfRange);
}

TEST_CASE("crop") {
  const TensorF t({4}, {1, 2, 3, 4});
  const auto c = crop(t, {1}, {2});
  CHECK(c.shape() == Shape{2});
  CHECK(c[0] == 2.0f);
  CHECK(c[1] == 3.0f);

  CHECK_THROWS_CODE(crop(t, {3}, {2}), ErrorCode::CropOutOfBounds);
  CHECK_THROWS_CODE(crop(t, {-1}, {2}), ErrorCode::CropOutOfBounds);

  SUBCASE("centered 29^3 window of a 33^3 volume matches an index-by-index copy") {
    std::mt19937_64 rng(11);
    const auto vol = test::random_tensor<float>({33, 33, 33}, rng);
    const auto sub = crop(vol, {2, 2, 2}, {29, 29, 29});
    REQUIRE(sub.shape() == Shape{29, 29, 29});
    bool same = true;
    for (Index z = 0; z < 29; ++z)
      for (Index y = 0; y < 29; ++y)
        for (Index x = 0; x < 29; ++x) same = same && sub.at({z, y, x}) == vol.at({z + 2, y + 2, x + 2});
    CHECK(same);
  }
}

TEST_CASE("crop with zero offset and full size is the identity for random shapes") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Shape shape = random_shape(rng);
    const auto t = test::random_tensor<float>(shape, rng);
    const Shape zero(shape.size(), 0);
    CHECK(crop(t, std::span<const Index>(zero), std::span<const Index>(shape)) == t);
  }
}

TEST_CASE("concat_channels") {
  const TensorF ones({2, 1, 1, 1}, 1.0f), twos({3, 1, 1, 1}, 2.0f);
  const auto joined = concat_channels(std::vector<TensorF>{ones, twos});
  CHECK(joined.shape() == Shape{5, 1, 1, 1});
  for (Index c = 0; c < 5; ++c) CHECK(joined[c] == (c < 2 ? 1.0f : 2.0f));

  CHECK(concat_channels(std::vector<TensorF>{twos}) == twos);
  CHECK_THROWS_CODE(concat_channels(std::vector<TensorF>{TensorF({1, 2, 2, 2}), TensorF({1, 2, 2, 3})}),
                    ErrorCode::ShapeMismatch);
}

TEST_CASE("concat then per-block channel slicing recovers the inputs bit-exactly") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> count(1, 4), channels(1, 5), extent(1, 4);
  for (int trial = 0; trial < 30; ++trial) {
    const Index d = extent(rng), h = extent(rng), w = extent(rng);
    std::vector<TensorF> parts;
    for (int i = count(rng); i > 0; --i) parts.push_back(test::random_tensor<float>({channels(rng), d, h, w}, rng));
    const auto joined = concat_channels(parts);
    Index begin = 0;
    for (const auto& part : parts) {
      CHECK(slice(joined, 0, begin, part.dim(0)) == part);
      begin += part.dim(0);
    }
    CHECK(begin == joined.dim(0));
  }
}

TEST_CASE("reduce_moments") {
  const TensorF t({4}, {1, 2, 3, 4});
  auto m = reduce_moments(t, {0});
  CHECK(m.mean[0] == doctest::Approx(2.5));
  CHECK(m.variance[0] == doctest::Approx(1.25));

  const TensorF constant({3, 3}, 0.1f);
  CHECK(reduce_moments(constant, {0, 1}).variance[0] == 0.0f);

  CHECK_THROWS_CODE(reduce_moments(t, std::span<const Index>{}), ErrorCode::InvalidAxes);
  CHECK_THROWS_CODE(reduce_moments(t, {1}), ErrorCode::InvalidAxes);

  SUBCASE("random 2x3 over axis 1 matches the two-pass oracle") {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 20; ++trial) {
      const auto x = test::random_tensor<float>({2, 3}, rng, 3.0);
      const auto moments = reduce_moments(x, {1});
      REQUIRE(moments.mean.shape() == Shape{2});
      for (Index r = 0; r < 2; ++r) {
        const auto [mean, var] = two_pass({x.at({r, 0}), x.at({r, 1}), x.at({r, 2})});
        CHECK(double(moments.mean[r]) == doctest::Approx(double(mean)).epsilon(1e-6));
        CHECK(std::abs(double(moments.variance[r]) - double(var)) < 1e-6 * std::max(1.0L, var));
      }
    }
  }
}

TEST_CASE("reduce_moments variance is nonnegative and zero exactly for constant groups") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> value(-5.0, 5.0);
  for (int trial = 0; trial < 100; ++trial) {
    const Shape shape = random_shape(rng, 3, 4);
    TensorF t(shape);
    const bool constant = trial % 2 == 0;
    const float c = float(value(rng));
    for (Index i = 0; i < t.size(); ++i) t[i] = constant ? c : float(value(rng));
    std::vector<Index> axes(shape.size());
    std::iota(axes.begin(), axes.end(), Index{0});
    const auto moments = reduce_moments(t, std::span<const Index>(axes));
    const float var = moments.variance[0];
    CHECK(var >= 0.0f);
    const bool all_equal = (t.vec().array() == t[0]).all();
    CHECK((var == 0.0f) == all_equal);
  }
}
