#include <doctest.h>

#include <cmath>
#include <sstream>

#include "glsm/nn.hpp"
#include "glsm/ops.hpp"
#include "glsm/optim.hpp"
#include "glsm/serialize.hpp"
#include "gradcheck.hpp"

using namespace glsm;
using glsm::testing::grad_check;
using glsm::testing::random_tensor;
using glsm::testing::weighted_sum;

namespace {
constexpr double kDoubleTol = 1e-6;
}

TEST_CASE("matmul identity and hand product") {
  Rng rng(1);
  Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor x = random_tensor({3, 4}, rng, 1.0, false);
  Tensor y = ops::matmul(eye, x);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));

  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 1}, {1, 1});
  Tensor c = ops::matmul(a, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c.at(0) == 3.0);
  CHECK(c.at(1) == 7.0);

  CHECK_THROWS_AS(ops::matmul(a, Tensor({3, 1})), ShapeError);
}

TEST_CASE("matmul adjoints match central differences") {
  Rng rng(2);
  Tensor a = random_tensor({4, 5}, rng);
  Tensor b = random_tensor({5, 3}, rng);
  auto r = grad_check([&] { return weighted_sum(ops::matmul(a, b)); }, {a, b});
  CHECK_MESSAGE(r.max_rel_err < kDoubleTol, r.worst);
}

TEST_CASE("softmax_rows values, stability and gradient") {
  Tensor z({1, 2}, {0, 0});
  auto s = ops::softmax_rows(z);
  CHECK(s.at(0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s.at(1) == doctest::Approx(0.5).epsilon(1e-15));

  auto big = ops::softmax_rows(Tensor({1, 2}, {1000, 1000}));
  CHECK(big.at(0) == 0.5);
  CHECK(big.at(1) == 0.5);

  Rng rng(3);
  Tensor x = random_tensor({3, 4}, rng, 3.0);
  auto r = grad_check([&] { return weighted_sum(ops::softmax_rows(x)); }, {x});
  CHECK_MESSAGE(r.max_rel_err < kDoubleTol, r.worst);
}

TEST_CASE("softmax rows are distributions (property)") {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = 1 + rng.index(6), c = 1 + rng.index(9);
    auto y = ops::softmax_rows(random_tensor({r, c}, rng, 10.0, false));
    for (std::size_t i = 0; i < r; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double p = y.at(i, j);
        CHECK(p >= 0.0);
        CHECK(p <= 1.0);
        total += p;
      }
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("layer_norm analytic cases and gradient") {
  Tensor gain({3}, {1, 1, 1});
  Tensor bias({3}, {0, 0, 0});
  auto flat = ops::layer_norm(Tensor({1, 3}, {5, 5, 5}), gain, bias);
  for (double v : flat.values()) CHECK(v == 0.0);

  auto y = ops::layer_norm(Tensor({1, 3}, {1, 2, 3}), gain, bias);
  const double expected = 1.0 / std::sqrt(2.0 / 3.0 + 1e-5);
  CHECK(y.at(0) == doctest::Approx(-expected).epsilon(1e-14));
  CHECK(y.at(1) == doctest::Approx(0.0));
  CHECK(y.at(2) == doctest::Approx(expected).epsilon(1e-14));
  CHECK(std::abs(y.at(2) - std::sqrt(1.5)) < 1e-4);

  Rng rng(5);
  Tensor x = random_tensor({4, 6}, rng);
  Tensor g = random_tensor({6}, rng);
  Tensor b = random_tensor({6}, rng);
  auto r = grad_check([&] { return weighted_sum(ops::layer_norm(x, g, b)); }, {x, g, b});
  CHECK_MESSAGE(r.max_rel_err < kDoubleTol, r.worst);

  CHECK_THROWS_AS(ops::layer_norm(Tensor({2, 1}), Tensor({1}), Tensor({1})), ShapeError);
}

TEST_CASE("conv1d hand cases") {
  Tensor x({5, 2}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
  Tensor ident({1, 2, 2}, {1, 0, 0, 1});
  auto y = ops::conv1d(x, ident, {}, 5, 1);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));

  Tensor avg({3, 1, 1}, {1.0 / 3, 1.0 / 3, 1.0 / 3});
  auto z = ops::conv1d(Tensor({3, 1}, {0, 3, 0}), avg, {}, 3, 1);
  CHECK(z.at(1) == doctest::Approx(1.0).epsilon(1e-15));

  auto strided = ops::conv1d(Tensor({7, 1}), avg, {}, 7, 2);
  CHECK(strided.rows() == 4);  // ceil(7 / 2)

  // Kernel wider than the sequence reads zero padding.
  auto shortseq = ops::conv1d(Tensor({2, 1}, {2, 4}), avg, {}, 2, 1);
  CHECK(shortseq.at(0) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(shortseq.at(1) == doctest::Approx(2.0).epsilon(1e-15));

  CHECK_THROWS_AS(ops::conv1d(Tensor({5, 1}), avg, {}, 2, 1), ShapeError);
}

TEST_CASE("conv1d gradient, stride 1 and 2, batched sequences") {
  Rng rng(6);
  for (std::size_t stride : {1u, 2u}) {
    Tensor x = random_tensor({2 * 8, 3}, rng);
    Tensor k = random_tensor({3, 3, 4}, rng);
    Tensor b = random_tensor({4}, rng);
    auto r = grad_check([&] { return weighted_sum(ops::conv1d(x, k, b, 8, stride)); }, {x, k, b});
    CHECK_MESSAGE(r.max_rel_err < kDoubleTol, r.worst);
  }
}

TEST_CASE("conv1d keeps batched sequences independent") {
  Rng rng(7);
  Tensor x = random_tensor({2 * 6, 2}, rng, 1.0, false);
  Tensor k = random_tensor({3, 2, 2}, rng, 1.0, false);
  auto y0 = ops::conv1d(x, k, {}, 6, 1);
  auto vals = x.values_mut();
  for (std::size_t i = 6 * 2; i < vals.size(); ++i) vals[i] += 1.0;  // perturb 2nd sequence
  auto y1 = ops::conv1d(x, k, {}, 6, 1);
  for (std::size_t i = 0; i < 6 * 2; ++i) CHECK(y0.at(i) == y1.at(i));
}

TEST_CASE("elementwise, gather, pooling and activation gradients") {
  Rng rng(8);
  Tensor a = random_tensor({4, 3}, rng);
  Tensor b = random_tensor({4, 3}, rng);
  Tensor row = random_tensor({3}, rng);
  const std::vector<std::size_t> idx{3, 0, 0, 2};
  const std::vector<std::size_t> flat{11, 0, 5, 5, 7, 1};

  struct Case {
    const char* name;
    std::function<Tensor()> fn;
    std::vector<Tensor> inputs;
  };
  std::vector<Case> cases{
      {"add", [&] { return weighted_sum(ops::add(a, b)); }, {a, b}},
      {"sub", [&] { return weighted_sum(ops::sub(a, b)); }, {a, b}},
      {"mul", [&] { return weighted_sum(ops::mul(a, b)); }, {a, b}},
      {"scale", [&] { return weighted_sum(ops::scale(a, -1.7)); }, {a}},
      {"add_row", [&] { return weighted_sum(ops::add_row(a, row)); }, {a, row}},
      {"gather_rows", [&] { return weighted_sum(ops::gather_rows(a, idx)); }, {a}},
      {"gather_elements", [&] { return weighted_sum(ops::gather_elements(a, flat, {2, 3})); }, {a}},
      {"concat_cols", [&] { return weighted_sum(ops::concat_cols(a, b)); }, {a, b}},
      {"concat_rows", [&] { return weighted_sum(ops::concat_rows(a, ops::gather_rows(b, idx))); }, {a, b}},
      {"gelu", [&] { return weighted_sum(ops::gelu(a)); }, {a}},
      {"silu", [&] { return weighted_sum(ops::silu(a)); }, {a}},
      {"upsample", [&] { return weighted_sum(ops::upsample_rows(a, 2, 3)); }, {a}},
      {"upsample_linear", [&] { return weighted_sum(ops::upsample_linear_rows(a, 2, 3)); }, {a}},
      {"avg_pool", [&] { return weighted_sum(ops::avg_pool_rows(a, 4, 2)); }, {a}},
      {"reshape", [&] { return weighted_sum(ops::reshape(a, {2, 6})); }, {a}},
      {"mean", [&] { return ops::mean(ops::mul(a, a)); }, {a}},
      {"mse", [&] { return ops::mse(a, b); }, {a, b}},
  };
  for (auto& c : cases) {
    auto r = grad_check(c.fn, c.inputs);
    CHECK_MESSAGE(r.max_rel_err < kDoubleTol, c.name << " " << r.worst);
  }
}

TEST_CASE("linear upsampling hand case") {
  // Two sequences [0, 1] and [2, 6]; odd rows interpolate, the tail clamps.
  Tensor x({4, 1}, {0.0, 1.0, 2.0, 6.0});
  auto y = ops::upsample_linear_rows(x, 2, 2);
  const std::vector<double> want{0.0, 0.5, 1.0, 1.0, 2.0, 4.0, 6.0, 6.0};
  REQUIRE(y.rows() == 8);
  for (std::size_t k = 0; k < 8; ++k) CHECK(y.at(k) == doctest::Approx(want[k]).epsilon(1e-15));
  auto same = ops::upsample_linear_rows(x, 2, 1);
  for (std::size_t k = 0; k < 4; ++k) CHECK(same.at(k) == x.at(k));
}

TEST_CASE("linear and grouped_linear gradients") {
  Rng rng(9);
  Tensor x = random_tensor({6, 4}, rng);
  Tensor w = random_tensor({4, 5}, rng);
  Tensor b = random_tensor({5}, rng);
  auto r = grad_check([&] { return weighted_sum(ops::linear(x, w, b)); }, {x, w, b});
  CHECK_MESSAGE(r.max_rel_err < kDoubleTol, r.worst);

  Tensor gw = random_tensor({3, 4, 2}, rng);
  Tensor gb = random_tensor({3, 2}, rng);
  auto r2 = grad_check([&] { return weighted_sum(ops::grouped_linear(x, gw, gb)); }, {x, gw, gb});
  CHECK_MESSAGE(r2.max_rel_err < kDoubleTol, r2.worst);

  // Row 4 belongs to group 1.
  NoGradGuard guard;
  auto y = ops::grouped_linear(x, gw, gb);
  double expect = gb.at(1 * 2 + 0);
  for (std::size_t i = 0; i < 4; ++i) expect += x.at(4, i) * gw.at((1 * 4 + i) * 2 + 0);
  CHECK(y.at(4, 0) == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("attention gradient with logit bias, unequal query/key lengths") {
  Rng rng(10);
  const ops::AttentionShape shape{3, 4, 2};
  Tensor q = random_tensor({2 * 3, 4}, rng);
  Tensor k = random_tensor({2 * 4, 4}, rng);
  Tensor v = random_tensor({2 * 4, 4}, rng);
  Tensor bias = random_tensor({2, 3, 4}, rng);
  auto r = grad_check([&] { return weighted_sum(ops::attention(q, k, v, shape, bias)); },
                      {q, k, v, bias});
  CHECK_MESSAGE(r.max_rel_err < kDoubleTol, r.worst);
}

TEST_CASE("attention with one key returns that value") {
  Rng rng(11);
  Tensor q = random_tensor({3, 4}, rng, 1.0, false);
  Tensor k = random_tensor({1, 4}, rng, 1.0, false);
  Tensor v = random_tensor({1, 4}, rng, 1.0, false);
  auto w = ops::attention_weights(q, k, {3, 1, 2});
  for (double p : w) CHECK(p == 1.0);
  auto y = ops::attention(q, k, v, {3, 1, 2});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 4; ++c) CHECK(y.at(i, c) == doctest::Approx(v.at(c)).epsilon(1e-15));
}

TEST_CASE("backward basics") {
  Tensor x({1}, {3.0}, true);
  backward(ops::mul(x, x));
  CHECK(x.grad()[0] == 6.0);
  // Accumulates until zeroed.
  backward(ops::mul(x, x));
  CHECK(x.grad()[0] == 12.0);
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);

  Rng rng(12);
  Tensor s = random_tensor({3, 5}, rng);
  backward(ops::sum(ops::softmax_rows(s)));
  for (double g : s.grad()) CHECK(std::abs(g) < 1e-15);

  Tensor v = random_tensor({2, 2}, rng);
  CHECK_THROWS_AS(backward(ops::mul(v, v)), ShapeError);
}

TEST_CASE("shared subexpressions receive summed adjoints") {
  Tensor x({1}, {2.0}, true);
  auto y = ops::mul(x, x);
  backward(ops::add(y, y));  // 2x^2 -> 4x
  CHECK(x.grad()[0] == 8.0);
}

TEST_CASE("non-finite forward values trip an error") {
  Tensor big({1, 1}, {1e308}, true);
  CHECK_THROWS_AS(ops::scale(big, 10.0), NumericError);
  CHECK_THROWS_AS(Tensor({1}, {std::nan("")}), NumericError);
}

TEST_CASE("stop_gradient_replace forwards b and routes gradient to a") {
  Tensor a({2}, {1, 2}, true);
  Tensor b({2}, {5, 7});
  auto y = ops::stop_gradient_replace(a, b);
  CHECK(y.at(0) == 5.0);
  CHECK(y.at(1) == 7.0);
  backward(ops::sum(ops::scale(y, 3.0)));
  CHECK(a.grad()[0] == 3.0);
  CHECK(a.grad()[1] == 3.0);
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x({2}, {1, 2}, true);
  NoGradGuard g;
  auto y = ops::mul(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("adam step cases") {
  Tensor p({1}, {1.0}, true);
  Adam opt({p}, {.lr = 0.001});
  p.grad_mut()[0] = 0.0;
  opt.step();
  CHECK(p.at(0) == 1.0);

  Tensor q({1}, {1.0}, true);
  Adam opt2({q}, {.lr = 0.001});
  q.grad_mut()[0] = 1.0;
  opt2.step();
  // m_hat = 1, v_hat = 1 -> q = 1 - 0.001 / (1 + 1e-8)
  CHECK(q.at(0) == doctest::Approx(1.0 - 0.001 / (1.0 + 1e-8)).epsilon(1e-15));
  CHECK(std::abs(q.at(0) - 0.999) < 1e-9);
  CHECK(opt2.state().first_moment[0].size() == 1);
}

TEST_CASE("adam converges on a quadratic bowl") {
  Tensor p({2}, {2.0, -3.0}, true);
  Tensor target({2}, {0.5, 1.5});
  Adam opt({p}, {.lr = 0.05});
  for (int i = 0; i < 2000; ++i) {
    opt.zero_grad();
    backward(ops::mse(p, target));
    opt.step();
  }
  CHECK(std::abs(p.at(0) - 0.5) < 1e-3);
  CHECK(std::abs(p.at(1) - 1.5) < 1e-3);
}

TEST_CASE("forward and backward are deterministic") {
  auto run = [] {
    Rng rng(13);
    Tensor x = random_tensor({4, 8}, rng);
    FeedForward ffn(8, 16, rng);
    ParamList params;
    ffn.collect(params, "ffn");
    backward(weighted_sum(ffn(x)));
    std::vector<double> out;
    for (auto& p : params) out.insert(out.end(), p.tensor.grad().begin(), p.tensor.grad().end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("tensor container round trip and errors") {
  Rng rng(14);
  Tensor t = random_tensor({2, 3, 4}, rng, 1.0, false);
  std::stringstream ss;
  write_tensor(ss, t);
  auto bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "GLSM");
  CHECK(bytes.size() == 4 + 2 + 1 + 3 * 4 + 1 + 24 * 8);
  auto back = read_tensor(ss);
  CHECK(back.shape() == t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) CHECK(back.at(i) == t.at(i));

  std::stringstream s32;
  write_tensor(s32, t, DType::F32);
  auto b32 = read_tensor(s32);
  for (std::size_t i = 0; i < t.numel(); ++i) CHECK(b32.at(i) == static_cast<double>(static_cast<float>(t.at(i))));

  auto corrupt = bytes;
  corrupt[0] = 'X';
  std::stringstream bad(corrupt);
  CHECK_THROWS_WITH_AS(read_tensor(bad), doctest::Contains("version mismatch"), FormatError);

  std::stringstream cut(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_WITH_AS(read_tensor(cut), doctest::Contains("truncated"), FormatError);
}
