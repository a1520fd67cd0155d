#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "menglan/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace menglan;
using testsupport::grad_check;
using testsupport::random_tensor;

TEST_CASE("matmul identity cases") {
  Tensor a = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from_vector({2, 2}, {1, 0, 0, 1});
  Tensor left = matmul(a, eye);
  Tensor right = matmul(eye, a);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(left[i] == a[i]);  // exact
    CHECK(right[i] == a[i]);
  }
}

TEST_CASE("matmul hand arithmetic") {
  Tensor ones = Tensor::from_vector({2, 2}, {1, 1, 1, 1});
  Tensor col = Tensor::from_vector({2, 1}, {1, 1});
  Tensor r = matmul(ones, col);
  CHECK(r[0] == doctest::Approx(2.0));
  CHECK(r[1] == doctest::Approx(2.0));
}

TEST_CASE("matmul vs triple-loop reference") {
  Rng rng(42);
  Tensor a = random_tensor({5, 7}, rng);
  Tensor b = random_tensor({7, 3}, rng);
  Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 7; ++k) acc += a[i * 7 + k] * b[k * 3 + j];
      CHECK(std::abs(c[i * 3 + j] - acc) < 1e-12);
    }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a({2, 3});
  Tensor b({4, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), DimensionError);
}

TEST_CASE("backward: f(x) = x^2 at x = 3") {
  Tensor x = Tensor::scalar(3.0);
  x.set_requires_grad();
  Tensor loss = mul(x, x);
  loss.backward();
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("backward: sum gives all-ones gradient") {
  Rng rng(1);
  Tensor x = random_tensor({3, 4}, rng);
  x.set_requires_grad();
  sum(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward rejects non-scalar loss") {
  Tensor x({2, 2});
  x.set_requires_grad();
  CHECK_THROWS_AS(add(x, x).backward(), ContractError);
}

TEST_CASE("elementwise examples") {
  Tensor a = Tensor::from_vector({3}, {1, 2, 3});
  Tensor z = Tensor::from_vector({3}, {0, 0, 0});
  Tensor prod = elementwise(EwTag::mul, a, z);
  for (std::size_t i = 0; i < 3; ++i) CHECK(prod[i] == 0.0);

  Tensor p = Tensor::from_vector({2}, {1, 2});
  Tensor q = Tensor::from_vector({2}, {3, 4});
  Tensor s = elementwise(EwTag::add, p, q);
  CHECK(s[0] == 4.0);
  CHECK(s[1] == 6.0);

  Tensor bad({3});
  CHECK_THROWS_AS(elementwise(EwTag::add, p, bad), DimensionError);
}

TEST_CASE("gradient checks for core ops") {
  Rng rng(7);
  Tensor a = random_tensor({4, 3}, rng);
  Tensor b = random_tensor({4, 3}, rng);
  a.set_requires_grad();
  b.set_requires_grad();

  SUBCASE("elementwise mul") {
    auto r = grad_check([&] { return sum(mul(a, b)); }, {a, b});
    CHECK(r.max_rel_err < 1e-4);
  }
  SUBCASE("matmul both sides") {
    Tensor w = random_tensor({3, 5}, rng);
    w.set_requires_grad();
    auto r = grad_check([&] { return sum(mul(matmul(a, w), matmul(a, w))); }, {a, w});
    CHECK(r.max_rel_err < 1e-4);
  }
  SUBCASE("bmm") {
    Tensor x = random_tensor({2, 3, 4}, rng);
    Tensor y = random_tensor({2, 4, 2}, rng);
    x.set_requires_grad();
    y.set_requires_grad();
    auto r = grad_check([&] { return sum(mul(bmm(x, y), bmm(x, y))); }, {x, y});
    CHECK(r.max_rel_err < 1e-4);
  }
  SUBCASE("softmax") {
    Tensor x = random_tensor({3, 5}, rng);
    Tensor c = random_tensor({3, 5}, rng);
    x.set_requires_grad();
    auto r = grad_check([&] { return sum(mul(softmax_lastdim(x), c)); }, {x});
    CHECK(r.max_rel_err < 1e-4);
  }
  SUBCASE("transpose and concat") {
    Tensor x = random_tensor({2, 3, 4}, rng);
    Tensor y = random_tensor({2, 5, 4}, rng);
    x.set_requires_grad();
    y.set_requires_grad();
    auto r = grad_check(
        [&] { return sum(mul(concat(x, y, 1), concat(x, y, 1))); }, {x, y});
    CHECK(r.max_rel_err < 1e-4);
    auto r2 = grad_check([&] {
      Tensor t = transpose_last2(x);
      return sum(mul(t, t));
    }, {x});
    CHECK(r2.max_rel_err < 1e-4);
  }
  SUBCASE("swap_axes12") {
    Tensor x = random_tensor({2, 3, 4, 2}, rng);
    Tensor c = random_tensor({2, 4, 3, 2}, rng);
    x.set_requires_grad();
    auto r = grad_check([&] { return sum(mul(swap_axes12(x), c)); }, {x});
    CHECK(r.max_rel_err < 1e-4);
  }
}

TEST_CASE("rng determinism: equal seeds, bit-identical draw sequences") {
  Rng a(123456), b(123456);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng fa = Rng(9).fork("layer"), fb = Rng(9).fork("layer");
  for (int i = 0; i < 100; ++i) CHECK(fa.uniform() == fb.uniform());
  // different labels diverge
  Rng fc = Rng(9).fork("other");
  bool any_diff = false;
  for (int i = 0; i < 10; ++i) any_diff = any_diff || (Rng(9).fork("layer").next_u64() != fc.next_u64());
  CHECK(any_diff);
}

TEST_CASE("deterministic op sequences produce bit-identical tensors") {
  auto run = [] {
    Rng rng(55);
    Tensor a = random_tensor({6, 6}, rng);
    Tensor b = random_tensor({6, 6}, rng);
    return matmul(add(a, b), mul(a, b));
  };
  Tensor r1 = run(), r2 = run();
  for (std::size_t i = 0; i < r1.size(); ++i) CHECK(r1[i] == r2[i]);
}

TEST_CASE("gradient accumulates across leaves reachable twice") {
  Tensor x = Tensor::scalar(2.0);
  x.set_requires_grad();
  Tensor y = add(mul(x, x), x);  // x^2 + x, dy/dx = 2x + 1 = 5
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(5.0));
}
