// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "hptr/error.hpp"
#include "hptr/gradcheck.hpp"
#include "hptr/tensor.hpp"
#include "oracles.hpp"

using namespace hptr;
using oracle::Vec;

namespace {

using TD = Tensor<double>;

TD rand_tensor(std::mt19937_64& rng, const Shape& shape, bool grad = true, double lo = -1,
               double hi = 1) {
  return oracle::tensor<double>(shape, oracle::uniform(rng, numel_of(shape), lo, hi), grad);
}

// Weighted sum with fixed random weights, so every output element matters.
TD probe(const TD& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto w = rand_tensor(rng, y.shape(), false);
  return sum(mul(y, w));
}

bool check_grad(const std::function<TD()>& f, const std::vector<TD>& inputs) {
  std::vector<NamedTensor> params;
  for (std::size_t i = 0; i < inputs.size(); ++i) params.push_back({"x" + std::to_string(i), inputs[i]});
  return finite_diff_check(f, params).passed;
}

}  // namespace

TEST_CASE("matmul small cases") {
  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto id = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  CHECK(oracle::values(matmul(a, id)) == Vec{1, 2, 3, 4});
  auto r = Tensor<double>::from({1, 2}, {1, 0});
  auto c = Tensor<double>::from({2, 1}, {0, 1});
  CHECK(matmul(r, c).item() == 0.0);
}

TEST_CASE("matmul agrees with triple loop up to 8x8x8") {
  std::mt19937_64 rng(1);
  for (std::size_t m = 1; m <= 8; ++m)
    for (std::size_t k = 1; k <= 8; ++k)
      for (std::size_t n = 1; n <= 8; ++n) {
        const auto av = oracle::uniform(rng, m * k), bv = oracle::uniform(rng, k * n);
        const auto got = matmul(oracle::tensor<double>({m, k}, av), oracle::tensor<double>({k, n}, bv));
        REQUIRE(oracle::max_abs_diff(oracle::values(got), oracle::matmul(av, bv, m, k, n)) < 1e-9);
      }
}

TEST_CASE("batched matmul broadcasts a 2-D operand") {
  std::mt19937_64 rng(2);
  const std::size_t b = 3, m = 4, k = 5, n = 2;
  const auto av = oracle::uniform(rng, b * m * k), bv = oracle::uniform(rng, k * n);
  const auto got = oracle::values(
      matmul(oracle::tensor<double>({b, m, k}, av), oracle::tensor<double>({k, n}, bv)));
  for (std::size_t i = 0; i < b; ++i) {
    const Vec ai(av.begin() + i * m * k, av.begin() + (i + 1) * m * k);
    const Vec want = oracle::matmul(ai, bv, m, k, n);
    const Vec part(got.begin() + i * m * n, got.begin() + (i + 1) * m * n);
    CHECK(oracle::max_abs_diff(part, want) < 1e-12);
  }
  const auto bb = oracle::uniform(rng, b * k * n);
  const auto both = oracle::values(
      matmul(oracle::tensor<double>({b, m, k}, av), oracle::tensor<double>({b, k, n}, bb)));
  for (std::size_t i = 0; i < b; ++i) {
    const Vec ai(av.begin() + i * m * k, av.begin() + (i + 1) * m * k);
    const Vec bi(bb.begin() + i * k * n, bb.begin() + (i + 1) * k * n);
    const Vec part(both.begin() + i * m * n, both.begin() + (i + 1) * m * n);
    CHECK(oracle::max_abs_diff(part, oracle::matmul(ai, bi, m, k, n)) < 1e-12);
  }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({4, 2});
  try {
    (void)matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("elementwise values") {
  auto x = Tensor<double>::from({2}, {-1, 2});
  CHECK(oracle::values(relu(x)) == Vec{0, 2});
  CHECK(sin(Tensor<double>::scalar(0)).item() == 0.0);
  CHECK(cos(Tensor<double>::scalar(0)).item() == 1.0);
  CHECK_THROWS_AS(log(Tensor<double>::from({2}, {1.0, 0.0})), DomainError);
  CHECK_THROWS_AS(log(Tensor<double>::scalar(-2.0)), DomainError);
  const auto c = clamp(Tensor<double>::from({3}, {-3, 0.5, 3}), -1.0, 1.0);
  CHECK(oracle::values(c) == Vec{-1, 0.5, 1});
}

TEST_CASE("sin derivative at 0.3") {
  auto x = Tensor<double>::scalar(0.3, true);
  sin(x).backward();
  const double h = 1e-5;
  CHECK(std::abs(x.grad()[0] - (std::sin(0.3 + h) - std::sin(0.3 - h)) / (2 * h)) < 1e-6);
}

TEST_CASE("broadcast add/sub/mul and their gradients") {
  std::mt19937_64 rng(3);
  auto a = rand_tensor(rng, {3, 4, 5});
  auto b = rand_tensor(rng, {4, 5});
  auto s = rand_tensor(rng, {});
  const auto av = oracle::values(a), bv = oracle::values(b);
  const auto sum_ab = oracle::values(add(a, b));
  const auto prod_as = oracle::values(mul(a, s));
  for (std::size_t i = 0; i < av.size(); ++i) {
    CHECK(sum_ab[i] == doctest::Approx(av[i] + bv[i % 20]).epsilon(1e-15));
    CHECK(prod_as[i] == doctest::Approx(av[i] * s.item()).epsilon(1e-15));
  }
  CHECK(check_grad([&] { return probe(add(a, b), 1); }, {a, b}));
  CHECK(check_grad([&] { return probe(sub(b, a), 2); }, {a, b}));
  CHECK(check_grad([&] { return probe(mul(a, b), 3); }, {a, b}));
  CHECK(check_grad([&] { return probe(mul(s, a), 4); }, {a, s}));
  CHECK(check_grad([&] { return probe(sub(a, s), 5); }, {a, s}));
  CHECK_THROWS_AS(add(a, rand_tensor(rng, {3, 5})), DimensionError);
}

TEST_CASE("softmax") {
  CHECK(oracle::values(softmax(Tensor<double>::from({2}, {0, 0}), 0)) == Vec{0.5, 0.5});
  const auto big = oracle::values(softmax(Tensor<double>::from({2}, {1000, 0}), 0));
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] < 1e-300);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto v = oracle::uniform(rng, 5, -3, 3);
    CHECK(oracle::max_abs_diff(oracle::values(softmax(oracle::tensor<double>({5}, v), 0)),
                               oracle::softmax_rows(v, 5)) < 1e-9);
  }
  for (double mag : {1.0, 100.0, 1e4}) {
    const auto v = oracle::uniform(rng, 3 * 7, -mag, mag);
    const auto y = oracle::values(softmax(oracle::tensor<float>({3, 7}, v), 1));
    for (int r = 0; r < 3; ++r) {
      double total = 0;
      for (int c = 0; c < 7; ++c) total += y[r * 7 + c];
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("softmax along an inner axis") {
  std::mt19937_64 rng(5);
  const auto v = oracle::uniform(rng, 2 * 3 * 4);
  const auto y = oracle::values(softmax(oracle::tensor<double>({2, 3, 4}, v), 1));
  for (int a = 0; a < 2; ++a)
    for (int c = 0; c < 4; ++c) {
      Vec col;
      for (int b = 0; b < 3; ++b) col.push_back(v[(a * 3 + b) * 4 + c]);
      const auto want = oracle::softmax_rows(col, 3);
      for (int b = 0; b < 3; ++b) CHECK(y[(a * 3 + b) * 4 + c] == doctest::Approx(want[b]));
    }
}

TEST_CASE("layer_norm") {
  auto ones = Tensor<double>::full({4}, 1.0);
  auto bias = Tensor<double>::from({4}, {0.1, 0.2, 0.3, 0.4});
  CHECK(oracle::max_abs_diff(oracle::values(layer_norm(Tensor<double>::full({1, 4}, 5.0), ones, bias)),
                             {0.1, 0.2, 0.3, 0.4}) < 1e-12);
  const auto pm = oracle::values(
      layer_norm(Tensor<double>::from({1, 2}, {1, -1}), Tensor<double>::full({2}, 1.0),
                 Tensor<double>::zeros({2})));
  CHECK(pm[0] == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(pm[1] == doctest::Approx(-1.0).epsilon(1e-4));
  std::mt19937_64 rng(6);
  const auto x = oracle::uniform(rng, 3 * 6, -4, 4);
  const auto g = oracle::uniform(rng, 6), b = oracle::uniform(rng, 6);
  const auto got = layer_norm(oracle::tensor<double>({3, 6}, x), oracle::tensor<double>({6}, g),
                              oracle::tensor<double>({6}, b));
  CHECK(oracle::max_abs_diff(oracle::values(got), oracle::layer_norm_rows(x, 6, g, b)) < 1e-7);
}

TEST_CASE("gather_rows") {
  auto src = Tensor<double>::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  IndexMatrix zeros(2, 2, 0);
  CHECK(oracle::values(gather_rows(src, zeros)) == Vec{1, 2, 1, 2, 1, 2, 1, 2});
  IndexMatrix ident(3, 1);
  for (int i = 0; i < 3; ++i) ident.at(i, 0) = i;
  CHECK(oracle::values(gather_rows(src, ident)) == oracle::values(src));
  IndexMatrix bad(1, 1, 3);
  CHECK_THROWS_AS(gather_rows(src, bad), IndexError);

  std::mt19937_64 rng(7);
  IndexMatrix idx(4, 5);
  std::uniform_int_distribution<int> pick(0, 2);
  std::vector<double> counts(3, 0.0);
  for (auto& v : idx.data) {
    v = pick(rng);
    counts[v] += 1.0;
  }
  sum(gather_rows(src, idx)).backward();
  for (int n = 0; n < 3; ++n) {
    CHECK(src.grad()[2 * n] == counts[n]);
    CHECK(src.grad()[2 * n + 1] == counts[n]);
  }
}

TEST_CASE("gather agrees with a loop oracle up to 8x8x8") {
  std::mt19937_64 rng(8);
  for (std::size_t n = 1; n <= 8; ++n)
    for (std::size_t m = 1; m <= 8; m += 3)
      for (std::size_t d = 1; d <= 8; d += 2) {
        const auto sv = oracle::uniform(rng, n * d);
        IndexMatrix idx(m, 3);
        for (auto& v : idx.data) v = static_cast<std::int64_t>(rng() % n);
        const auto got = oracle::values(gather_rows(oracle::tensor<double>({n, d}, sv), idx));
        for (std::size_t p = 0; p < idx.data.size(); ++p)
          for (std::size_t c = 0; c < d; ++c) REQUIRE(got[p * d + c] == sv[idx.data[p] * d + c]);
      }
}

TEST_CASE("masked_max") {
  auto x = Tensor<double>::from({3, 1}, {1, 3, 2});
  CHECK(masked_max(x, Mask{1, 0, 1}).item() == 2.0);
  CHECK(masked_max(x, Mask{0, 1, 0}).item() == 3.0);
  CHECK_THROWS_AS(masked_max(x, Mask{0, 0, 0}), EmptyGroupError);

  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    const auto v = oracle::uniform(rng, 2 * 6 * 4);
    Mask m(12);
    for (int g = 0; g < 2; ++g) {
      for (int r = 0; r < 6; ++r) m[g * 6 + r] = rng() % 2;
      m[g * 6 + rng() % 6] = 1;
    }
    const auto got = oracle::values(masked_max(oracle::tensor<double>({2, 6, 4}, v), m));
    for (int g = 0; g < 2; ++g)
      for (int c = 0; c < 4; ++c) {
        double best = -INFINITY;
        for (int r = 0; r < 6; ++r)
          if (m[g * 6 + r]) best = std::max(best, v[(g * 6 + r) * 4 + c]);
        REQUIRE(got[g * 4 + c] == best);
      }
  }
}

TEST_CASE("structure ops round trip") {
  std::mt19937_64 rng(10);
  auto x = rand_tensor(rng, {2, 3, 4});
  const auto xv = oracle::values(x);
  const auto p = oracle::values(permute(x, {2, 0, 1}));
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 3; ++b)
      for (int c = 0; c < 4; ++c) CHECK(p[(c * 2 + a) * 3 + b] == xv[(a * 3 + b) * 4 + c]);
  const auto back = permute(permute(x, {2, 0, 1}), {1, 2, 0});
  CHECK(oracle::values(back) == xv);
  const auto parts = concat<double>({slice(x, 1, 0, 1), slice(x, 1, 1, 3)}, 1);
  CHECK(oracle::values(parts) == xv);
  CHECK(reshape(x, {6, 4}).shape() == Shape{6, 4});
  CHECK_THROWS_AS(reshape(x, {5, 5}), DimensionError);
}

TEST_CASE("backward basics") {
  auto x = Tensor<double>::scalar(3.0, true);
  mul(x, x).backward();
  CHECK(x.grad()[0] == 6.0);
  // A second pass without reset accumulates.
  mul(x, x).backward();
  CHECK(x.grad()[0] == 12.0);
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);

  std::mt19937_64 rng(11);
  auto v = rand_tensor(rng, {6});
  sum(softmax(v, 0)).backward();
  for (double g : v.grad()) CHECK(std::abs(g) < 1e-12);

  CHECK_THROWS_AS(v.backward(), ContractError);
}

TEST_CASE("no-grad mode records nothing") {
  auto x = Tensor<double>::scalar(2.0, true);
  Tensor<double> y;
  {
    NoGradGuard guard;
    y = mul(x, x);
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(GradMode::enabled());
}

TEST_CASE("memory and flop counters") {
  const auto before = MemoryTracker::stats().live_bytes;
  {
    auto t = Tensor<float>::zeros({10, 10});
    CHECK(MemoryTracker::stats().live_bytes == before + 400);
  }
  CHECK(MemoryTracker::stats().live_bytes == before);
  FlopCounter::reset();
  (void)matmul(Tensor<double>::zeros({2, 3, 4}), Tensor<double>::zeros({4, 5}));
  CHECK(FlopCounter::count() == 2u * 2 * 3 * 4 * 5);
}

TEST_CASE("dropout") {
  std::mt19937_64 rng(12);
  auto x = Tensor<double>::full({1000}, 1.0);
  CHECK(dropout(x, 0.5, false, rng).node() == x.node());
  const auto y = oracle::values(dropout(x, 0.25, true, rng));
  std::size_t zeros = 0;
  for (double v : y) {
    CHECK((v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-12));
    zeros += v == 0.0;
  }
  CHECK(zeros > 150);
  CHECK(zeros < 350);
  std::mt19937_64 r1(5), r2(5);
  CHECK(oracle::values(dropout(x, 0.3, true, r1)) == oracle::values(dropout(x, 0.3, true, r2)));
}

TEST_CASE("finite_diff_check controls") {
  auto x = Tensor<double>::from({3}, {0.5, -1.0, 2.0}, true);
  auto lin = [&] { return sum(scale(x, 3.0)); };
  const auto rep = finite_diff_check(lin, {{"x", x}});
  CHECK(rep.passed);
  CHECK(rep.max_rel_error < 1e-9);

  std::mt19937_64 rng(13);
  auto a = rand_tensor(rng, {2, 5});
  auto g = rand_tensor(rng, {5});
  auto b = rand_tensor(rng, {5});
  CHECK(finite_diff_check([&] { return probe(layer_norm(a, g, b), 3); },
                          {{"a", a}, {"g", g}, {"b", b}})
            .passed);

  // An op whose backward rule is off by a factor of two must be caught.
  auto broken = [&] {
    auto r = x.node_ptr().get();
    auto d = oracle::values(x);
    for (auto& v : d) v = v * v;
    auto y = make_op<double>(x.shape(), std::vector<double>(d.begin(), d.end()), {x},
                             [r](TensorNode<double>& self) {
                               auto& g = r->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 g[i] += 4.0 * r->value[i] * self.grad[i];
                             });
    return sum(y);
  };
  CHECK_FALSE(finite_diff_check(broken, {{"x", x}}).passed);
}

// At least 100 random instances across the differentiable ops.
TEST_CASE("random gradient checks for every differentiable op") {
  std::mt19937_64 rng(14);
  int instances = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = 1 + rng() % 4, k = 1 + rng() % 4, n = 1 + rng() % 4;
    auto a = rand_tensor(rng, {m, k});
    auto b = rand_tensor(rng, {k, n});
    auto c = rand_tensor(rng, {2, m, k});
    auto pos = rand_tensor(rng, {m, k}, true, 0.5, 2.0);
    // Keep relu inputs away from the kink.
    auto off = oracle::tensor<double>(
        {m, k}, [&] {
          auto v = oracle::uniform(rng, m * k, 0.1, 1.0);
          for (auto& e : v) e = rng() % 2 ? e : -e;
          return v;
        }(),
        true);
    auto g = rand_tensor(rng, {k});
    auto bias = rand_tensor(rng, {k});
    IndexMatrix idx(3, 2);
    for (auto& v : idx.data) v = static_cast<std::int64_t>(rng() % m);
    Mask mask(2 * m, 1);
    const std::uint64_t s = 100 + trial;
    const std::vector<std::pair<const char*, std::function<bool()>>> checks = {
        {"matmul", [&] { return check_grad([&] { return probe(matmul(a, b), s); }, {a, b}); }},
        {"bmm", [&] { return check_grad([&] { return probe(matmul(c, b), s); }, {c, b}); }},
        {"add", [&] { return check_grad([&] { return probe(add(c, a), s); }, {c, a}); }},
        {"mul", [&] { return check_grad([&] { return probe(mul(a, pos), s); }, {a, pos}); }},
        {"relu", [&] { return check_grad([&] { return probe(relu(off), s); }, {off}); }},
        {"sin", [&] { return check_grad([&] { return probe(sin(a), s); }, {a}); }},
        {"cos", [&] { return check_grad([&] { return probe(cos(a), s); }, {a}); }},
        {"exp", [&] { return check_grad([&] { return probe(exp(a), s); }, {a}); }},
        {"log", [&] { return check_grad([&] { return probe(log(pos), s); }, {pos}); }},
        {"tanh", [&] { return check_grad([&] { return probe(tanh(a), s); }, {a}); }},
        {"softmax", [&] { return check_grad([&] { return probe(softmax(c, 2), s); }, {c}); }},
        {"layer_norm",
         [&] { return check_grad([&] { return probe(layer_norm(a, g, bias), s); }, {a, g, bias}); }},
        {"gather", [&] { return check_grad([&] { return probe(gather_rows(a, idx), s); }, {a}); }},
        {"masked_max", [&] { return check_grad([&] { return probe(masked_max(c, mask), s); }, {c}); }},
        {"permute", [&] { return check_grad([&] { return probe(permute(c, {2, 0, 1}), s); }, {c}); }},
        {"concat",
         [&] { return check_grad([&] { return probe(concat<double>({a, pos}, 1), s); }, {a, pos}); }},
        {"slice", [&] { return check_grad([&] { return probe(slice(c, 2, 0, 1), s); }, {c}); }},
        {"mean", [&] { return check_grad([&] { return mean(mul(a, a)); }, {a}); }},
    };
    for (const auto& [name, fn] : checks) {
      INFO(std::string(name) << " trial " << trial);
      CHECK(fn());
      ++instances;
    }
  }
  CHECK(instances >= 100);
}
