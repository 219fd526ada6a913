#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "pill/rng.hpp"
#include "pill/tensor.hpp"
#include "support/fd.hpp"

using namespace pill;
using testsupport::check_gradients;
using testsupport::rel_err;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  for (double& x : v) x = rng.normal(0.0, scale);
  return Tensor::from(shape, std::move(v));
}

}  // namespace

TEST_CASE("tensor construction and validation") {
  Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.dim(0) == 2);
  CHECK(t.dim(1) == 3);
  CHECK(t.size() == 6);
  CHECK(t.at(1, 2) == 6.0);

  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), shape_error);
  CHECK_THROWS_AS(Tensor::from({0, 3}, {}), shape_error);
  CHECK_THROWS_AS(Tensor::from({1}, {std::nan("")}), numeric_error);
  CHECK_THROWS_AS(Tensor::scalar(1.0).at(0, 0), shape_error);
  CHECK(Tensor::scalar(2.5).item() == 2.5);
  CHECK(Tensor::zeros({3, 3}).at(2, 2) == 0.0);
}

TEST_CASE("matmul identity and zero annihilator") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor zero = Tensor::zeros({2, 2});

  Tensor ai = matmul(a, eye);
  for (int i = 0; i < 4; ++i) CHECK(ai.values()[i] == a.values()[i]);
  Tensor az = matmul(a, zero);
  for (int i = 0; i < 4; ++i) CHECK(az.values()[i] == 0.0);

  CHECK_THROWS_WITH_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})),
                       doctest::Contains("[2x3]"), shape_error);
}

TEST_CASE("matmul against a plain-loop reference") {
  Rng rng(11);
  Tensor a = random_tensor({7, 5}, rng);
  Tensor b = random_tensor({5, 6}, rng);
  Tensor c = matmul(a, b);
  for (int i = 0; i < 7; ++i) {
    for (int j = 0; j < 6; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 5; ++k) acc += a.at(i, k) * b.at(k, j);
      CHECK(std::abs(c.at(i, j) - acc) <= 1e-12);
    }
  }
}

TEST_CASE("matmul gradient: d sum(AB) / dA equals row-broadcast column sums of B") {
  Rng rng(3);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  a.set_requires_grad(true);

  backward(sum_all(matmul(a, b)));
  const auto g = a.grad();
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 4; ++k) {
      double colsum = 0.0;
      for (int j = 0; j < 2; ++j) colsum += b.at(k, j);
      CHECK(std::abs(g[static_cast<size_t>(i) * 4 + k] - colsum) <= 1e-12);
    }
  }

  // And the same via central differences.
  a.zero_grad();
  auto worst = check_gradients(
      [&] { return sum_all(matmul(a, b)); }, {{"a", a}});
  CHECK(worst.err < 1e-6);
}

TEST_CASE("softmax rows") {
  Tensor s0 = softmax_lastdim(Tensor::from({1, 2}, {0, 0}));
  CHECK(s0.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s0.at(0, 1) == doctest::Approx(0.5).epsilon(1e-12));

  // Max-subtraction keeps huge logits finite.
  Tensor s1 = softmax_lastdim(Tensor::from({1, 3}, {1000, 1000, 1000}));
  for (int j = 0; j < 3; ++j)
    CHECK(std::abs(s1.at(0, j) - 1.0 / 3.0) <= 1e-12);

  // High-precision exp-normalize oracle for [1,2,3].
  Tensor s2 = softmax_lastdim(Tensor::from({1, 3}, {1, 2, 3}));
  CHECK(std::abs(s2.at(0, 0) - 0.09003057317038046) <= 1e-15);
  CHECK(std::abs(s2.at(0, 1) - 0.24472847105479764) <= 1e-15);
  CHECK(std::abs(s2.at(0, 2) - 0.6652409557748219) <= 1e-15);
}

TEST_CASE("softmax property: rows sum to one and shift invariance") {
  Rng rng(5);
  Tensor x = random_tensor({6, 9}, rng, 3.0);
  Tensor y = softmax_lastdim(x);
  for (int i = 0; i < 6; ++i) {
    double row = 0.0;
    for (int j = 0; j < 9; ++j) row += y.at(i, j);
    CHECK(std::abs(row - 1.0) <= 1e-9);
  }

  std::vector<double> shifted(x.values().begin(), x.values().end());
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 9; ++j) shifted[static_cast<size_t>(i) * 9 + j] += 17.25;
  Tensor y2 = softmax_lastdim(Tensor::from({6, 9}, std::move(shifted)));
  for (size_t i = 0; i < y.values().size(); ++i)
    CHECK(std::abs(y.values()[i] - y2.values()[i]) <= 1e-12);
}

TEST_CASE("softmax rejects non-finite input") {
  Tensor x = Tensor::from({1, 3}, {1, 2, 3});
  x.values_mut()[1] = std::nan("");
  CHECK_THROWS_AS(softmax_lastdim(x), numeric_error);
}

TEST_CASE("silu oracle values") {
  Tensor y = silu(Tensor::from({3}, {0.0, 1.0, -20.0}));
  CHECK(y.at(0) == 0.0);
  CHECK(std::abs(y.at(1) - 0.7310585786300049) <= 1e-15);
  CHECK(std::abs(y.at(2) - -4.122307236380407e-08) <= 1e-20);
}

TEST_CASE("tanh oracle values") {
  Tensor y = tanh_act(Tensor::from({3}, {0.0, 1e6, 0.5}));
  CHECK(y.at(0) == 0.0);
  CHECK(y.at(1) == 1.0);
  CHECK(std::abs(y.at(2) - 0.46211715726000974) <= 1e-15);
}

TEST_CASE("rmsnorm") {
  Tensor w = Tensor::constant({4}, 1.0);

  // All-equal rows normalize to (sign) ones up to epsilon.
  Tensor y = rmsnorm(Tensor::from({2, 4}, {3, 3, 3, 3, -2, -2, -2, -2}), w);
  for (int j = 0; j < 4; ++j) {
    CHECK(y.at(0, j) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(y.at(1, j) == doctest::Approx(-1.0).epsilon(1e-6));
  }

  // Zero rows stay zero (epsilon prevents the blowup).
  Tensor z = rmsnorm(Tensor::zeros({1, 4}), w);
  for (int j = 0; j < 4; ++j) CHECK(z.at(0, j) == 0.0);

  // Unit weight output has RMS 1.
  Rng rng(7);
  Tensor x = random_tensor({3, 16}, rng, 2.0);
  Tensor n = rmsnorm(x, Tensor::constant({16}, 1.0));
  for (int i = 0; i < 3; ++i) {
    double ms = 0.0;
    for (int j = 0; j < 16; ++j) ms += n.at(i, j) * n.at(i, j);
    CHECK(std::sqrt(ms / 16.0) == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("cross entropy") {
  // Uniform logits: loss is exactly ln(V).
  Tensor u4 = Tensor::zeros({3, 4});
  std::vector<int> tgt{1, 2, 0};
  Tensor l4 = cross_entropy(u4, tgt, {true, true, true});
  CHECK(std::abs(l4.item() - 1.3862943611198906) <= 1e-12);

  Tensor u10 = Tensor::zeros({2, 10});
  Tensor l10 = cross_entropy(u10, std::vector<int>{3, 7}, {true, true});
  CHECK(std::abs(l10.item() - 2.302585092994046) <= 1e-12);

  // Confident correct prediction: loss vanishes with the margin.
  Tensor conf = Tensor::from({1, 3}, {60.0, 0.0, 0.0});
  CHECK(cross_entropy(conf, std::vector<int>{0}, {true}).item() < 1e-20);

  // Masked-out rows do not contribute at all.
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from({2, 3}, {1, 2, 3, -9, 0, 99});
  Tensor la = cross_entropy(a, std::vector<int>{1, 0}, {true, false});
  Tensor lb = cross_entropy(b, std::vector<int>{1, 2}, {true, false});
  CHECK(std::memcmp(&la.values()[0], &lb.values()[0], sizeof(double)) == 0);

  CHECK_THROWS_AS(cross_entropy(a, std::vector<int>{0, 0}, {false, false}),
                  std::invalid_argument);
  CHECK_THROWS_AS(cross_entropy(a, std::vector<int>{5, 0}, {true, false}),
                  std::invalid_argument);
}

TEST_CASE("backward basics") {
  // f(x) = x^2 at x = 3 -> grad 6.
  Tensor x = Tensor::scalar(3.0);
  x.set_requires_grad(true);
  Tensor y = sum_all(mul(x, x));
  backward(y);
  CHECK(std::abs(x.grad()[0] - 6.0) <= 1e-12);

  // Double backward on the same loss is an accumulation-state error.
  CHECK_THROWS_AS(backward(y), autodiff_error);

  // Tensors without requires_grad never receive gradients.
  Tensor frozen = Tensor::scalar(2.0);
  Tensor z = sum_all(mul(frozen, frozen));
  CHECK_THROWS_AS(backward(z), autodiff_error);  // loss not connected to grads
  CHECK(!frozen.has_grad());

  // Grads of tensors outside the graph stay untouched.
  Tensor unrelated = Tensor::scalar(1.0);
  unrelated.set_requires_grad(true);
  Tensor x2 = Tensor::scalar(4.0);
  x2.set_requires_grad(true);
  backward(sum_all(mul(x2, x2)));
  CHECK(!unrelated.has_grad());
  CHECK(std::abs(x2.grad()[0] - 8.0) <= 1e-12);
}

TEST_CASE("gradients accumulate across backward calls on separate graphs") {
  Tensor x = Tensor::scalar(3.0);
  x.set_requires_grad(true);
  backward(sum_all(mul(x, x)));
  backward(sum_all(mul(x, x)));  // a fresh graph; grads accumulate
  CHECK(std::abs(x.grad()[0] - 12.0) <= 1e-12);
  x.zero_grad();
  CHECK(!x.has_grad());
}

TEST_CASE("non-finite op output raises instead of propagating") {
  Tensor big = Tensor::constant({2, 2}, 1e200);
  CHECK_THROWS_AS(mul(big, big), numeric_error);
  CHECK_THROWS_AS(scale(big, 1e200), numeric_error);
}

TEST_CASE("structural ops round-trip and gradients") {
  Rng rng(13);
  Tensor a = random_tensor({4, 6}, rng);

  // transpose twice is identity.
  Tensor tt = transpose(transpose(a));
  for (size_t i = 0; i < a.values().size(); ++i)
    CHECK(a.values()[i] == tt.values()[i]);

  // slice + concat reassembles the original.
  Tensor left = cols_slice(a, 0, 2);
  Tensor right = cols_slice(a, 2, 6);
  std::vector<Tensor> parts{left, right};
  Tensor joined = concat_cols(parts);
  for (size_t i = 0; i < a.values().size(); ++i)
    CHECK(a.values()[i] == joined.values()[i]);

  // rows_gather picks the right rows.
  std::vector<int> ids{2, 0, 2};
  Tensor picked = rows_gather(a, ids);
  CHECK(picked.dim(0) == 3);
  for (int j = 0; j < 6; ++j) {
    CHECK(picked.at(0, j) == a.at(2, j));
    CHECK(picked.at(1, j) == a.at(0, j));
    CHECK(picked.at(2, j) == a.at(2, j));
  }

  // expand_per_head repeats each head value contiguously.
  Tensor g = Tensor::from({1, 3}, {0.5, -0.25, 2.0});
  Tensor e = expand_per_head(g, 4);
  CHECK(e.dim(1) == 12);
  for (int h = 0; h < 3; ++h)
    for (int r = 0; r < 4; ++r) CHECK(e.at(0, h * 4 + r) == g.at(0, h));

  CHECK_THROWS_AS(rows_gather(a, std::vector<int>{4}), shape_error);
  CHECK_THROWS_AS(cols_slice(a, 3, 2), shape_error);
}

TEST_CASE("rope is a per-pair rotation") {
  Rng rng(17);
  const int heads = 2;
  Tensor x = random_tensor({5, 8}, rng);
  Tensor y = rope(x, heads);

  // Position 0 is untouched (angle 0).
  for (int j = 0; j < 8; ++j) CHECK(y.at(0, j) == doctest::Approx(x.at(0, j)).epsilon(1e-15));

  // Rotations preserve the norm of each (even, odd) pair.
  for (int t = 0; t < 5; ++t) {
    for (int p = 0; p < 4; ++p) {
      const double nx = x.at(t, 2 * p) * x.at(t, 2 * p) + x.at(t, 2 * p + 1) * x.at(t, 2 * p + 1);
      const double ny = y.at(t, 2 * p) * y.at(t, 2 * p) + y.at(t, 2 * p + 1) * y.at(t, 2 * p + 1);
      CHECK(std::abs(nx - ny) <= 1e-12);
    }
  }
  CHECK_THROWS_AS(rope(Tensor::zeros({3, 9}), 3), shape_error);
}

TEST_CASE("determinism: identical graphs produce bit-identical values and grads") {
  auto build = [] {
    Rng rng(29);
    Tensor a = random_tensor({4, 4}, rng, 0.7);
    Tensor b = random_tensor({4, 4}, rng, 0.7);
    a.set_requires_grad(true);
    Tensor loss = sum_all(softmax_lastdim(matmul(silu(a), tanh_act(b))));
    backward(loss);
    std::vector<double> out(loss.values().begin(), loss.values().end());
    out.insert(out.end(), a.grad().begin(), a.grad().end());
    return out;
  };
  const auto r1 = build();
  const auto r2 = build();
  REQUIRE(r1.size() == r2.size());
  CHECK(std::memcmp(r1.data(), r2.data(), r1.size() * sizeof(double)) == 0);
}

TEST_CASE("finite differences across random small composites") {
  // Gradient soundness over compositions of the primitives on small tensors.
  for (std::uint64_t seed : {101u, 102u, 103u}) {
    Rng rng(seed);
    Tensor a = random_tensor({3, 4}, rng, 0.6);
    Tensor b = random_tensor({4, 5}, rng, 0.6);
    Tensor c = random_tensor({5, 4}, rng, 0.6);
    Tensor w = random_tensor({5}, rng, 0.2);
    Tensor bias = random_tensor({1, 5}, rng, 0.4);
    for (Tensor t : {a, b, c, w, bias}) t.set_requires_grad(true);

    auto loss_fn = [&] {
      Tensor h = add_rowvec(matmul(a, b), bias);   // 3x5
      Tensor n = rmsnorm(h, w);
      Tensor s = softmax_lastdim(n);
      Tensor m = mul(silu(h), s);                   // 3x5
      Tensor back = tanh_act(matmul(m, c));         // 3x4
      Tensor r = rope(back, 2);
      Tensor pooled = mean_rows(r, std::vector<int>{0, 1, 2});  // 1x4
      Tensor ex = expand_per_head(cols_slice(pooled, 0, 2), 2); // 1x4
      return sum_all(mul(r, matmul(Tensor::constant({3, 1}, 1.0), ex)));
    };
    auto worst = check_gradients(loss_fn, {{"a", a}, {"b", b}, {"c", c}, {"w", w}, {"bias", bias}});
    INFO("worst offender ", worst.param, "[", worst.index, "] analytic=",
         worst.analytic, " numeric=", worst.numeric);
    CHECK(worst.err < 1e-4);
  }
}

TEST_CASE("cross entropy gradients match finite differences") {
  Rng rng(31);
  Tensor logits = random_tensor({4, 6}, rng, 1.0);
  logits.set_requires_grad(true);
  std::vector<int> targets{1, 4, 0, 3};
  std::vector<bool> mask{true, false, true, true};
  auto loss_fn = [&] { return cross_entropy(logits, targets, mask); };
  auto worst = check_gradients(loss_fn, {{"logits", logits}});
  CHECK(worst.err < 1e-4);
}
