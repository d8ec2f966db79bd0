#include <random>
#include <set>

#include "doctest.h"
#include "gradcheck.hpp"
#include "test_util.hpp"
#include "tiny_network.hpp"
#include "volnet/network.hpp"

using namespace volnet;
using test::random_tensor;

TEST_CASE("forward on 29^3 inputs yields normalized probabilities") {
  Network<float> net(make_preset("proposed-2roi-smri"));
  std::mt19937_64 rng(1);
  for (auto& p : net.parameters())
    if (p.role == ParamRole::weight) *p.value = random_tensor<float>(p.value->shape(), rng, 0.1);
  std::vector<TensorF> inputs{random_tensor<float>({2, 1, 29, 29, 29}, rng),
                              random_tensor<float>({2, 1, 29, 29, 29}, rng)};
  const auto probs = net.forward(inputs, Mode::infer);
  REQUIRE(probs.shape() == Shape{2, 2});
  for (Index i = 0; i < 2; ++i) CHECK(std::abs(double(probs[2 * i]) + probs[2 * i + 1] - 1.0) < 1e-6);

  // Inference is bit-reproducible.
  CHECK(net.forward(inputs, Mode::infer) == probs);

  CHECK_THROWS_CODE(net.backward(TensorF({2, 2})), ErrorCode::InvalidMode);
  std::vector<TensorF> wrong{random_tensor<float>({2, 1, 28, 29, 29}, rng), inputs[1]};
  CHECK_THROWS_CODE(net.forward(wrong, Mode::infer), ErrorCode::ShapeMismatch);
  CHECK_THROWS_CODE(net.forward(std::vector<TensorF>{inputs[0]}, Mode::infer), ErrorCode::ShapeMismatch);
}

TEST_CASE("zero inputs and zero weights give uniform probabilities") {
  for (int classes : {2, 3}) {
    Network<float> net(make_preset("proposed-4roi", {8, 64, 0.5, classes}));
    std::vector<TensorF> inputs(4, TensorF({1, 1, 29, 29, 29}));
    const auto probs = net.forward(inputs, Mode::infer);
    for (Index k = 0; k < classes; ++k) CHECK(probs[k] == doctest::Approx(1.0 / classes));
  }
}

TEST_CASE("network parameters are named uniquely and congruent with their gradients") {
  const Network<float> net(make_preset("alexnet-4roi"));
  std::set<std::string> names;
  for (const auto& p : net.parameters()) {
    CHECK(names.insert(p.name).second);
    if (p.trainable()) {
      REQUIRE(p.grad != nullptr);
      CHECK(p.grad->shape() == p.value->shape());
    } else {
      CHECK(p.grad == nullptr);
    }
  }
}

TEST_CASE("snapshot and restore") {
  Network<double> a(test::tiny_spec()), b(test::tiny_spec());
  std::mt19937_64 rng(4);
  test::randomize(a, rng);
  b.restore(a.snapshot());
  CHECK(a.snapshot() == b.snapshot());
  Network<double> other(make_preset("proposed-2roi-dti"));
  CHECK_THROWS_CODE(other.restore(a.snapshot()), ErrorCode::ShapeMismatch);
}

TEST_CASE_TEMPLATE("tiny two-pipeline network gradients match central differences", Scalar, float, double) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto check = test::check_tiny_network<Scalar>(seed);
    CHECK_MESSAGE(check.error < test::GradTolerance<Scalar>::max_relative_error, "seed " << seed << " error " << check.error);
    CHECK_MESSAGE(check.refined_share < 0.02, "seed " << seed << " refined " << check.refined_share);
  }
}

TEST_CASE("dropout masks differ between train passes but not in inference") {
  auto spec = test::tiny_spec();
  std::get<Dropout>(spec.tail[1]).keep_prob = 0.5;
  Network<float> net(spec);
  std::mt19937_64 rng(9);
  test::randomize(net, rng);
  const auto inputs = test::tiny_inputs<float>(rng);
  std::mt19937_64 drop_a(1), drop_b(2);
  const auto a = net.forward_logits(inputs, Mode::train, &drop_a);
  const auto b = net.forward_logits(inputs, Mode::train, &drop_b);
  CHECK_FALSE(a == b);
  CHECK_THROWS_CODE(net.forward_logits(inputs, Mode::train), ErrorCode::InvalidConfig);
}
