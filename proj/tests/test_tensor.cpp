#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "caplab/tensor.hpp"

using namespace caplab;

namespace {

// Central finite differences in double precision as the gradient oracle.
// loss_fn must rebuild the graph from the given leaf tensors on every call.
void check_grad(std::vector<Tensor<double>*> leaves,
                const std::function<Tensor<double>()>& loss_fn,
                double tol = 1e-4, double h = 1e-5) {
  for (auto* t : leaves) t->zero_grad();
  auto loss = loss_fn();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto* t : leaves) analytic.push_back(t->grad());

  NoGradGuard ng;
  for (size_t ti = 0; ti < leaves.size(); ++ti) {
    auto& vals = leaves[ti]->values();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double x0 = vals[i];
      vals[i] = x0 + h;
      const double lp = loss_fn().item();
      vals[i] = x0 - h;
      const double lm = loss_fn().item();
      vals[i] = x0;
      const double fd = (lp - lm) / (2 * h);
      const double an = analytic[ti][i];
      const double rel = std::abs(an - fd) / std::max(1e-6, std::abs(an) + std::abs(fd));
      INFO("leaf ", ti, " element ", i, " analytic ", an, " fd ", fd);
      CHECK(rel < tol);
    }
  }
}

Tensor<double> randn(Shape shape, std::mt19937& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = g(rng);
  return Tensor<double>::from_values(std::move(shape), std::move(v),
                                     /*requires_grad=*/true);
}

}  // namespace

TEST_CASE("shape utilities and element access") {
  auto t = Tensor<float>::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.dim(0) == 2);
  CHECK(t.dim(1) == 3);
  CHECK(t.numel() == 6);
  CHECK(Tensor<float>::scalar(4.5f).item() == doctest::Approx(4.5f));
  CHECK_THROWS_AS(t.item(), std::invalid_argument);
  CHECK_THROWS_AS(Tensor<float>::from_values({2, 2}, {1, 2, 3}),
                  std::invalid_argument);
}

TEST_CASE("matmul forward matches hand computation") {
  auto a = Tensor<float>::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor<float>::from_values({3, 2}, {7, 8, 9, 10, 11, 12});
  auto c = matmul(a, b);
  // row0: 1*7+2*9+3*11 = 58, 1*8+2*10+3*12 = 64
  CHECK(c.values() == std::vector<float>{58, 64, 139, 154});
  auto d = matmul_nt(a, Tensor<float>::from_values({2, 3}, {1, 0, 1, 0, 1, 0}));
  CHECK(d.values() == std::vector<float>{4, 2, 10, 5});
  CHECK_THROWS_AS(matmul(a, a), std::invalid_argument);
}

TEST_CASE("softmax rows sum to one and masked entries are exactly zero") {
  auto x = Tensor<float>::from_values({2, 3}, {1, 2, 3, -1, 0, 1});
  std::vector<uint8_t> visible{1, 1, 0, 0, 1, 1};
  auto p = softmax_rows(add_mask(x, visible));
  for (int r = 0; r < 2; ++r) {
    float s = 0;
    for (int c = 0; c < 3; ++c) s += p.values()[r * 3 + c];
    CHECK(s == doctest::Approx(1.0f));
  }
  CHECK(p.values()[2] == 0.0f);  // bitwise zero, not just small
  CHECK(p.values()[3] == 0.0f);
}

TEST_CASE("cross entropy of uniform logits is ln(V) for any smoothing") {
  const int V = 30522;
  auto logits = Tensor<double>::zeros({3, V});
  for (double eps : {0.0, 0.1, 0.5}) {
    auto l = cross_entropy_rows(logits, std::vector<int>{5, 100, 30521}, eps,
                                Reduction::Mean);
    CHECK(l.item() == doctest::Approx(std::log(static_cast<double>(V)))
                          .epsilon(1e-12));
  }
}

TEST_CASE("gradients match finite differences") {
  std::mt19937 rng(42);

  SUBCASE("add, scale, gelu chain") {
    auto a = randn({3, 4}, rng), b = randn({3, 4}, rng);
    check_grad({&a, &b}, [&] { return sum_all(gelu(scale(add(a, b), 0.7))); });
  }
  SUBCASE("add_rowvec") {
    auto a = randn({3, 4}, rng), b = randn({4}, rng);
    check_grad({&a, &b}, [&] { return sum_all(gelu(add_rowvec(a, b))); });
  }
  SUBCASE("matmul") {
    auto a = randn({3, 5}, rng), b = randn({5, 2}, rng);
    check_grad({&a, &b}, [&] { return sum_all(gelu(matmul(a, b))); });
  }
  SUBCASE("matmul_nt") {
    auto a = randn({3, 5}, rng), b = randn({4, 5}, rng);
    check_grad({&a, &b}, [&] { return sum_all(gelu(matmul_nt(a, b))); });
  }
  SUBCASE("layer_norm") {
    auto x = randn({4, 6}, rng), g = randn({6}, rng), b = randn({6}, rng);
    check_grad({&x, &g, &b},
               [&] { return sum_all(gelu(layer_norm(x, g, b))); });
  }
  SUBCASE("softmax with mask") {
    auto x = randn({3, 3}, rng);
    std::vector<uint8_t> vis{1, 1, 1, 1, 1, 0, 1, 0, 0};
    auto w = randn({3, 3}, rng);
    check_grad({&x, &w}, [&] {
      return sum_all(matmul(softmax_rows(add_mask(x, vis)), w));
    });
  }
  SUBCASE("embedding_rows") {
    auto table = randn({7, 3}, rng);
    check_grad({&table}, [&] {
      return sum_all(gelu(embedding_rows(table, std::vector<int>{1, 4, 1})));
    });
  }
  SUBCASE("slices and concats") {
    auto a = randn({4, 6}, rng);
    check_grad({&a}, [&] {
      auto top = slice_rows(a, 0, 2);
      auto bottom = slice_rows(a, 2, 4);
      auto left = slice_cols(a, 0, 3);
      auto right = slice_cols(a, 3, 6);
      return add(sum_all(gelu(concat_rows<double>({top, bottom}))),
                 sum_all(gelu(concat_cols<double>({left, right}))));
    });
  }
  SUBCASE("cross entropy with label smoothing") {
    auto logits = randn({3, 5}, rng);
    std::vector<int> targets{0, 3, 4};
    check_grad({&logits}, [&] {
      return cross_entropy_rows(logits, targets, 0.1, Reduction::Mean);
    });
    check_grad({&logits}, [&] {
      return cross_entropy_rows(logits, targets, 0.0, Reduction::Sum);
    });
  }
  SUBCASE("100 randomized composite trials") {
    for (int trial = 0; trial < 100; ++trial) {
      auto x = randn({2, 4}, rng), w1 = randn({4, 4}, rng),
           w2 = randn({4, 3}, rng), g = randn({4}, rng), b = randn({4}, rng);
      std::vector<int> targets{static_cast<int>(rng() % 3),
                               static_cast<int>(rng() % 3)};
      check_grad({&x, &w1, &w2, &g, &b}, [&] {
        auto h = layer_norm(gelu(matmul(x, w1)), g, b);
        auto p = softmax_rows(h);
        return cross_entropy_rows(matmul(p, w2), targets, 0.1, Reduction::Mean);
      });
    }
  }
}

TEST_CASE("backward accumulates into reused leaves") {
  auto a = Tensor<double>::from_values({1}, {2.0}, true);
  auto loss = add(scale(a, 3.0), scale(a, 4.0));  // d/da = 7
  backward(loss);
  CHECK(a.grad()[0] == doctest::Approx(7.0));
}

TEST_CASE("no-grad guard suppresses graph construction") {
  auto a = Tensor<double>::from_values({1}, {2.0}, true);
  {
    NoGradGuard ng;
    auto y = scale(a, 3.0);
    CHECK_FALSE(y.requires_grad());
  }
  auto y = scale(a, 3.0);
  CHECK(y.requires_grad());
}

TEST_CASE("identical inputs give bitwise identical results") {
  std::mt19937 rng(7);
  auto a = randn({16, 32}, rng);
  auto b = randn({32, 24}, rng);
  auto c1 = matmul(a, b);
  auto c2 = matmul(a, b);
  CHECK(c1.values() == c2.values());
}

TEST_CASE("truncated normal init stays within two sigma") {
  auto t = Tensor<float>::zeros({1000}, true);
  std::mt19937 rng(3);
  init_truncated_normal(t, 0.02f, rng);
  for (float x : t.values()) CHECK(std::abs(x) <= 0.04f + 1e-7f);
  double mean = 0;
  for (float x : t.values()) mean += x;
  CHECK(std::abs(mean / 1000.0) < 0.01);
}
