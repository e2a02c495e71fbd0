#include "doctest.h"

#include "gradcheck.hpp"

#include <cmath>

using namespace far;
using far::testing::gradcheck;
using far::testing::random_projection;
using far::testing::random_tensor;

namespace {

constexpr int kPoints = 50;
constexpr double kTol = 1e-5;

void check_grad(const char* name, const std::function<Tensor<double>()>& fn, std::vector<Tensor<double>> inputs,
                std::uint64_t seed = 1) {
  const auto r = gradcheck(fn, std::move(inputs), kPoints, seed);
  INFO(name << " worst relative error " << r.worst);
  CHECK(r.checked == kPoints);
  CHECK(r.worst <= kTol);
}

}  // namespace

TEST_CASE("matmul examples and triple-loop oracle") {
  auto eye = Tensor<double>::from_values({2, 2}, {1, 0, 0, 1});
  auto b = Tensor<double>::from_values({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(eye, b).value() == b.value());
  auto row = Tensor<double>::from_values({1, 2}, {1, 2});
  auto col = Tensor<double>::from_values({2, 1}, {3, 4});
  CHECK(matmul(row, col).item() == 11.0);

  std::mt19937_64 rng(5);
  auto x = random_tensor({3, 4}, rng);
  auto y = random_tensor({4, 2}, rng);
  const auto z = matmul(x, y).value();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 2; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 4; ++k) acc += x.value()(i, k) * y.value()(k, j);
      CHECK(std::abs(z(i, j) - acc) <= 1e-12);
    }
  }
}

TEST_CASE("matmul shape errors name both shapes") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
  }
}

TEST_CASE("layer norm examples") {
  auto g = Tensor<double>::from_values({4}, {1, 1, 1, 1});
  auto z = Tensor<double>::zeros({4});
  auto c = Tensor<double>::from_values({1, 4}, {5, 5, 5, 5});
  CHECK(layer_norm(c, g, z, 1e-6).value().cwiseAbs().maxCoeff() == 0.0);

  auto g2 = Tensor<double>::from_values({2}, {1, 1});
  auto z2 = Tensor<double>::zeros({2});
  auto x = Tensor<double>::from_values({1, 2}, {1, -1});
  const auto y = layer_norm(x, g2, z2, 1e-12).value();
  CHECK(y(0, 0) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(y(0, 1) == doctest::Approx(-1.0).epsilon(1e-9));

  std::mt19937_64 rng(11);
  auto r = random_tensor({4, 8}, rng, 3.0);
  auto g8 = Tensor<double>::from_matrix(MatrixX<double>::Ones(1, 8), Shape{8});
  auto z8 = Tensor<double>::zeros({8});
  const auto out = layer_norm(r, g8, z8, 1e-5).value();
  for (Eigen::Index i = 0; i < 4; ++i) {
    const double mu = out.row(i).mean();
    const double var = (out.row(i).array() - mu).square().mean();
    CHECK(std::abs(mu) <= 1e-6);
    CHECK(std::abs(var - 1.0) <= 1e-3);
  }
}

TEST_CASE("layer norm rejects bad arguments") {
  auto x = Tensor<double>::zeros({2, 4});
  auto g = Tensor<double>::zeros({3});
  auto b = Tensor<double>::zeros({3});
  CHECK_THROWS_AS(layer_norm(x, g, b, 1e-5), DimensionError);
  auto g4 = Tensor<double>::zeros({4});
  CHECK_THROWS(layer_norm(x, g4, g4, 0.0));
}

TEST_CASE("softmax examples") {
  auto a = softmax(Tensor<double>::from_values({1, 2}, {0, 0})).value();
  CHECK(a(0, 0) == 0.5);
  auto big = softmax(Tensor<double>::from_values({1, 2}, {1000, 1000})).value();
  CHECK(big(0, 0) == 0.5);
  CHECK(big(0, 1) == 0.5);
  auto c = softmax(Tensor<double>::from_values({1, 2}, {0, std::log(3.0)})).value();
  CHECK(c(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(c(0, 1) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax output is a probability vector along any axis") {
  std::mt19937_64 rng(2);
  auto x = random_tensor({3, 4, 5}, rng, 10.0);
  for (std::int64_t axis : {0, 1, 2}) {
    const auto p = softmax(x, axis);
    CHECK(p.value().minCoeff() >= 0.0);
    const auto& v = p.value();
    // Sum along the axis via index arithmetic.
    const std::int64_t dims[] = {3, 4, 5};
    std::int64_t inner = 1;
    for (std::int64_t k = axis + 1; k < 3; ++k) inner *= dims[k];
    const std::int64_t extent = dims[axis];
    const std::int64_t outer = 60 / (inner * extent);
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t i = 0; i < inner; ++i) {
        double s = 0.0;
        for (std::int64_t e = 0; e < extent; ++e) s += v.data()[(o * extent + e) * inner + i];
        CHECK(std::abs(s - 1.0) <= 1e-6);
      }
    }
  }
}

TEST_CASE("pointwise examples") {
  CHECK(sigmoid(Tensor<double>::scalar(0.0)).item() == 0.5);
  CHECK(gelu(Tensor<double>::scalar(0.0)).item() == 0.0);
  const double x = 0.7;
  CHECK(gelu(Tensor<double>::scalar(x)).item() == doctest::Approx(0.5 * x * (1 + std::erf(x / std::sqrt(2.0)))).epsilon(1e-15));

  auto logits = Tensor<double>::from_values({1, 3}, {0, 800, 0});
  const int label[] = {1};
  CHECK(cross_entropy(logits, label).item() == doctest::Approx(0.0).epsilon(1e-12));
  auto flat = Tensor<double>::zeros({2, 4});
  const int labels[] = {0, 3};
  CHECK(cross_entropy(flat, labels).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("tanh backward at 0.3 matches a central difference") {
  auto x = Tensor<double>::scalar(0.3, true);
  backward(tanh(x));
  const double h = 1e-6;
  const double fd = (std::tanh(0.3 + h) - std::tanh(0.3 - h)) / (2 * h);
  CHECK(std::abs(x.grad()(0, 0) - fd) / std::abs(fd) <= 1e-7);
}

TEST_CASE("concat after split is the identity") {
  std::mt19937_64 rng(9);
  auto x = random_tensor({2, 6, 5}, rng);
  for (std::int64_t axis : {0, 1, 2}) {
    const auto ext = x.dim(static_cast<std::size_t>(axis));
    std::vector<std::int64_t> sizes{1, ext - 1};
    auto back = concat(split(x, sizes, axis), axis);
    CHECK(back.shape() == x.shape());
    CHECK(back.value() == x.value());
  }
}

TEST_CASE("cross entropy rejects labels out of range") {
  auto logits = Tensor<double>::zeros({1, 3});
  const int label[] = {3};
  CHECK_THROWS_AS(cross_entropy(logits, label), DimensionError);
}

TEST_CASE("finite-difference checks for every primitive") {
  std::mt19937_64 rng(17);
  auto proj = random_projection(99);

  auto a = random_tensor({4, 5}, rng);
  auto b = random_tensor({5, 3}, rng);
  check_grad("matmul", [&] { return proj(matmul(a, b)); }, {a, b});

  auto w = random_tensor({3, 5}, rng);
  auto bias = random_tensor({3}, rng);
  check_grad("linear", [&] { return proj(linear(a, w, bias)); }, {a, w, bias});
  check_grad("linear_nobias", [&] { return proj(linear(a, w)); }, {a, w});

  check_grad("transpose", [&] { return proj(transpose(a)); }, {a});
  check_grad("reshape", [&] { return proj(reshape(a, Shape{2, 10})); }, {a});

  auto c = random_tensor({4, 5}, rng);
  check_grad("add", [&] { return proj(add(a, c)); }, {a, c});
  check_grad("sub", [&] { return proj(sub(a, c)); }, {a, c});
  check_grad("mul", [&] { return proj(mul(a, c)); }, {a, c});
  check_grad("scale", [&] { return proj(scale(a, 2.5)); }, {a});
  check_grad("sigmoid", [&] { return proj(sigmoid(a)); }, {a});
  check_grad("tanh", [&] { return proj(tanh(a)); }, {a});
  auto wide = random_tensor({4, 5}, rng, 3.0);
  check_grad("gelu", [&] { return proj(gelu(wide)); }, {wide});

  auto g = random_tensor({5}, rng);
  auto be = random_tensor({5}, rng);
  check_grad("layer_norm", [&] { return proj(layer_norm(wide, g, be, 1e-5)); }, {wide, g, be});

  auto t3 = random_tensor({2, 3, 4}, rng, 2.0);
  for (std::int64_t axis : {0, 1, 2}) {
    check_grad("softmax", [&] { return proj(softmax(t3, axis)); }, {t3}, static_cast<std::uint64_t>(axis + 3));
    check_grad("mean_axis", [&] { return proj(mean(t3, axis)); }, {t3}, static_cast<std::uint64_t>(axis + 7));
    check_grad("narrow", [&] { return proj(narrow(t3, axis, 1, 1)); }, {t3}, static_cast<std::uint64_t>(axis + 11));
  }
  check_grad("split", [&] {
    auto parts = split(t3, {1, 3}, -1);
    return add(proj(parts[0]), sum(mul(parts[1], parts[1])));
  }, {t3});
  auto u = random_tensor({2, 2, 4}, rng);
  check_grad("concat", [&] { return proj(concat<double>({t3, u}, 1)); }, {t3, u});
  check_grad("select_rows", [&] { return proj(select_rows(a, {3, 0, 3})); }, {a});
  check_grad("sum", [&] { return mul(sum(a), sum(a)); }, {a});
  check_grad("mean", [&] { return mul(mean(a), sum(c)); }, {a, c});
  check_grad("l2_norm", [&] { return l2_norm(a); }, {a});
  const int labels[] = {0, 4, 2, 1};
  check_grad("cross_entropy", [&] { return cross_entropy(wide, labels); }, {wide});
}
