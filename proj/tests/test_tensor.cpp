#include "gazeloss/gzt.hpp"
#include "gazeloss/nn.hpp"
#include "gazeloss/tensor.hpp"

#include <doctest.h>

#include "support/oracles.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace gazeloss;

namespace {

Tensor<float> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
  Tensor<float> t = Tensor<float>::zeros(std::move(shape), requires_grad);
  for (int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<float>(rng.uniform_in(lo, hi));
  return t;
}

}  // namespace

TEST_CASE("conv2d output sizes match the paper architectures") {
  Rng rng(1);
  SUBCASE("84x84 single frame, 7x7 stride 3") {
    auto x = random_tensor({1, 84, 84}, rng);
    auto k = random_tensor({16, 1, 7, 7}, rng);
    auto y = conv2d(x, k, 3);
    CHECK(y.shape() == Shape{16, 26, 26});
  }
  SUBCASE("4x84x84 stack, 8x8 stride 4") {
    auto x = random_tensor({4, 84, 84}, rng);
    auto k = random_tensor({32, 4, 8, 8}, rng);
    auto y = conv2d(x, k, 4);
    CHECK(y.shape() == Shape{32, 20, 20});
  }
}

TEST_CASE("conv2d zero kernel gives a zero map") {
  auto x = Tensor<float>::from_data({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto k = Tensor<float>::zeros({1, 1, 3, 3});
  auto y = conv2d(x, k, 1);
  CHECK(y.shape() == Shape{1, 1, 1});
  CHECK(y.data()[0] == 0.0f);
}

TEST_CASE("conv2d equals the quadruple-loop reference") {
  Rng rng(7);
  for (int trial = 0; trial < 4; ++trial) {
    const int c_in = 1 + static_cast<int>(rng.uniform_int(3));
    const int c_out = 1 + static_cast<int>(rng.uniform_int(4));
    const int h = 6 + static_cast<int>(rng.uniform_int(6));
    const int w = 6 + static_cast<int>(rng.uniform_int(6));
    const int kh = 2 + static_cast<int>(rng.uniform_int(3));
    const int kw = 2 + static_cast<int>(rng.uniform_int(3));
    const int stride = 1 + static_cast<int>(rng.uniform_int(2));
    auto x = random_tensor({c_in, h, w}, rng);
    auto k = random_tensor({c_out, c_in, kh, kw}, rng);
    auto y = conv2d(x, k, stride);

    std::vector<double> xin(x.data(), x.data() + x.numel());
    std::vector<double> kin(k.data(), k.data() + k.numel());
    int ho = 0, wo = 0;
    auto ref = oracles::naive_conv2d(xin, c_in, h, w, kin, c_out, kh, kw, stride, ho, wo);
    REQUIRE(y.shape() == Shape{c_out, ho, wo});
    for (int64_t i = 0; i < y.numel(); ++i)
      CHECK(std::abs(y.data()[i] - ref[static_cast<size_t>(i)]) < 1e-6);
  }
}

TEST_CASE("conv2d rejects mismatched shapes naming the axes") {
  Rng rng(3);
  auto x = random_tensor({2, 8, 8}, rng);
  auto k = random_tensor({4, 3, 3, 3}, rng);
  CHECK_THROWS_AS(conv2d(x, k, 1), DimensionError);
  auto big = random_tensor({1, 2, 9, 9}, rng);
  auto small = random_tensor({2, 4, 4}, rng);
  CHECK_THROWS_AS(conv2d(small, big, 1), DimensionError);
}

TEST_CASE("relu and leaky_relu values and subgradients") {
  auto x = Tensor<float>::from_data({3}, {-1, 0, 2});
  auto y = relu(x);
  CHECK(y.data()[0] == 0.0f);
  CHECK(y.data()[1] == 0.0f);
  CHECK(y.data()[2] == 2.0f);

  auto z = Tensor<float>::from_data({1}, {-10});
  auto ly = leaky_relu(z, 0.01f);
  CHECK(ly.data()[0] == doctest::Approx(-0.1f));

  auto p = Tensor<float>::from_data({1}, {-3}, true);
  auto l = sum(leaky_relu(p, 0.01f));
  backward(l);
  CHECK(p.grad()[0] == doctest::Approx(0.01f));

  // relu subgradient at exactly 0 is 0; leaky keeps the slope.
  auto q = Tensor<float>::from_data({1}, {0}, true);
  auto lr = sum(relu(q));
  backward(lr);
  CHECK(q.grad()[0] == 0.0f);
  q.zero_grad();
  auto ll = sum(leaky_relu(q, 0.25f));
  backward(ll);
  CHECK(q.grad()[0] == doctest::Approx(0.25f));
}

TEST_CASE("fully_connected matches hand cases and the loop oracle") {
  auto x = Tensor<float>::from_data({2}, {3, 4});
  auto eye = Tensor<float>::from_data({2, 2}, {1, 0, 0, 1});
  auto zero_b = Tensor<float>::zeros({2});
  auto y = fully_connected(x, eye, zero_b);
  CHECK(y.data()[0] == 3.0f);
  CHECK(y.data()[1] == 4.0f);

  auto zero_w = Tensor<float>::zeros({2, 2});
  auto b = Tensor<float>::from_data({2}, {1, 2});
  auto y2 = fully_connected(x, zero_w, b);
  CHECK(y2.data()[0] == 1.0f);
  CHECK(y2.data()[1] == 2.0f);

  Rng rng(11);
  auto xv = random_tensor({5}, rng);
  auto w = random_tensor({3, 5}, rng);
  auto bias = random_tensor({3}, rng);
  auto out = fully_connected(xv, w, bias);
  for (int m = 0; m < 3; ++m) {
    double acc = bias.data()[m];
    for (int n = 0; n < 5; ++n) acc += double(w.data()[m * 5 + n]) * xv.data()[n];
    CHECK(std::abs(out.data()[m] - acc) < 1e-6);
  }

  CHECK_THROWS_AS(fully_connected(xv, eye, bias), DimensionError);
}

TEST_CASE("softmax_cross_entropy values, stability, and gradient") {
  auto logits = Tensor<float>::filled({4}, 0.7f);
  auto loss = softmax_cross_entropy(logits, 2);
  CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));

  auto extreme = Tensor<float>::from_data({2}, {1000, 0});
  auto stable = softmax_cross_entropy(extreme, 0);
  CHECK(std::isfinite(stable.item()));
  CHECK(stable.item() == doctest::Approx(0.0).epsilon(1e-6));

  CHECK_THROWS_AS(softmax_cross_entropy(extreme, 2), IndexError);
  CHECK_THROWS_AS(softmax_cross_entropy(extreme, -1), IndexError);

  // Central finite differences at k=6.
  Rng rng(5);
  auto l6 = random_tensor({6}, rng, -1, 1, true);
  const int label = 3;
  auto out = softmax_cross_entropy(l6, label);
  backward(out);
  const double h = 1e-3;
  for (int i = 0; i < 6; ++i) {
    const float saved = l6.data()[i];
    l6.data()[i] = saved + static_cast<float>(h);
    const double lp = softmax_cross_entropy(l6, label).item();
    l6.data()[i] = saved - static_cast<float>(h);
    const double lm = softmax_cross_entropy(l6, label).item();
    l6.data()[i] = saved;
    const double fd = (lp - lm) / (2 * h);
    CHECK(std::abs(fd - l6.grad()[i]) / std::max({1e-4, std::abs(fd), double(std::abs(l6.grad()[i]))}) <
          1e-4);
  }
}

TEST_CASE("backward seeds, accumulates, and ignores unused parameters") {
  auto x = Tensor<float>::from_data({3}, {1, 2, 3}, true);
  auto loss = sum(x);
  backward(loss);
  for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0f);

  // x*x at x=3 -> d/dx = 6
  auto v = Tensor<float>::from_data({1}, {3}, true);
  auto sq = sum(mul(v, v));
  backward(sq);
  CHECK(v.grad()[0] == doctest::Approx(6.0f));

  // repeated backward without reset accumulates
  backward(sq);
  CHECK(v.grad()[0] == doctest::Approx(12.0f));

  // a parameter the loss ignores gets no gradient at all
  auto unused = Tensor<float>::from_data({2}, {5, 5}, true);
  auto loss2 = sum(mul(x, x));
  backward(loss2);
  CHECK_FALSE(unused.has_grad());

  CHECK_THROWS_AS(backward(x), ContractError);
}

TEST_CASE("compute graph visits each node once in reverse creation order") {
  auto a = Tensor<float>::from_data({2}, {1, 2}, true);
  auto b = mul(a, a);       // diamond: b feeds two consumers
  auto c = add(b, b);
  auto loss = sum(c);
  ComputeGraph<float> graph(loss);
  auto order = graph.visit_order();
  CHECK(order.size() == 4);  // a, b, c, loss
  for (size_t i = 1; i < order.size(); ++i) CHECK(order[i - 1] > order[i]);
  graph.run_backward();
  // d/da sum(2*a^2) = 4a
  CHECK(a.grad()[0] == doctest::Approx(4.0f));
  CHECK(a.grad()[1] == doctest::Approx(8.0f));
}

TEST_CASE("three-layer conv net gradients match finite differences") {
  Rng rng(13);
  auto input = random_tensor({1, 10, 10}, rng, 0.05, 1.0);
  auto k1 = random_tensor({3, 1, 3, 3}, rng, -0.5, 0.5, true);
  auto k2 = random_tensor({3, 3, 3, 3}, rng, -0.5, 0.5, true);
  auto k3 = random_tensor({2, 3, 3, 3}, rng, -0.5, 0.5, true);
  auto loss_of = [&]() {
    auto h1 = leaky_relu(conv2d(input, k1, 1), 0.1f);
    auto h2 = leaky_relu(conv2d(h1, k2, 1), 0.1f);
    auto h3 = conv2d(h2, k3, 1);
    return sum(mul(h3, h3));
  };
  auto loss = loss_of();
  backward(loss);
  const double h = 1e-3;
  for (auto* k : {&k1, &k2, &k3}) {
    double max_rel = 0;
    double scale = 1e-8;
    for (int64_t i = 0; i < k->numel(); ++i) scale = std::max(scale, std::abs(double(k->grad()[i])));
    for (int64_t i = 0; i < k->numel(); i += 7) {  // sampled coordinates
      const float saved = k->data()[i];
      k->data()[i] = saved + static_cast<float>(h);
      const double lp = loss_of().item();
      k->data()[i] = saved - static_cast<float>(h);
      const double lm = loss_of().item();
      k->data()[i] = saved;
      const double fd = (lp - lm) / (2 * h);
      max_rel = std::max(max_rel, std::abs(fd - k->grad()[i]) / scale);
    }
    CHECK(max_rel < 1e-3);
  }
}

TEST_CASE("adam: zero gradients leave parameters unchanged, moments decay") {
  auto p = Tensor<float>::from_data({3}, {1, -2, 3}, true);
  std::vector<Tensor<float>> params{p};
  auto st = AdamState<float>::for_params(params, 1e-2f);
  st.first_moment[0].setConstant(0.5f);
  st.second_moment[0].setConstant(0.25f);
  // no grad populated -> treated as zero
  auto st0_m = st.first_moment[0][0];
  adam_step(params, st);
  CHECK(st.step == 1);
  CHECK(st.first_moment[0][0] == doctest::Approx(0.9f * st0_m));
  const float fresh[3] = {1, -2, 3};
  // params move only through the stale moments; with zero moments they stay put
  std::vector<Tensor<float>> params2{Tensor<float>::from_data({3}, {1, -2, 3}, true)};
  auto st2 = AdamState<float>::for_params(params2, 1e-2f);
  adam_step(params2, st2);
  for (int i = 0; i < 3; ++i) CHECK(params2[0].data()[i] == fresh[i]);
}

TEST_CASE("adam first step with constant gradient moves by about the learning rate") {
  auto p = Tensor<float>::zeros({4}, true);
  p.mutable_grad() = VecX<float>::Constant(4, 0.37f);
  std::vector<Tensor<float>> params{p};
  auto st = AdamState<float>::for_params(params, 1e-3f);
  adam_step(params, st);
  for (int i = 0; i < 4; ++i)
    CHECK(std::abs(p.data()[i]) == doctest::Approx(1e-3).epsilon(1e-3));
}

TEST_CASE("fixed seed reproduces bitwise-identical adam trajectories") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    auto w = random_tensor({4, 4}, rng, -1, 1, true);
    std::vector<Tensor<float>> params{w};
    auto st = AdamState<float>::for_params(params, 1e-3f);
    auto x = random_tensor({4}, rng);
    for (int step = 0; step < 100; ++step) {
      w.zero_grad();
      auto y = fully_connected(x, w, Tensor<float>::zeros({4}));
      auto loss = sum(mul(y, y));
      backward(loss);
      adam_step(params, st);
    }
    return std::vector<float>(w.data(), w.data() + w.numel());
  };
  auto a = run(42);
  auto b = run(42);
  CHECK(a == b);  // bitwise
  auto c = run(43);
  CHECK(a != c);
}

TEST_CASE("GZT1 round trip and golden header bytes") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "gazeloss_gzt_test";
  fs::create_directories(dir);
  const std::string path = (dir / "t.gzt").string();

  Rng rng(3);
  auto t = random_tensor({2, 3, 4}, rng);
  write_gzt(path, t);
  auto back = read_gzt<float>(path);
  REQUIRE(back.shape() == t.shape());
  for (int64_t i = 0; i < t.numel(); ++i) CHECK(back.data()[i] == t.data()[i]);

  std::ifstream is(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  REQUIRE(bytes.size() == 4 + 4 + 3 * 4 + 24 * 4);
  CHECK(bytes.substr(0, 4) == "GZT1");
  CHECK(static_cast<unsigned char>(bytes[4]) == 3);  // rank, little endian
  CHECK(static_cast<unsigned char>(bytes[8]) == 2);
  CHECK(static_cast<unsigned char>(bytes[12]) == 3);
  CHECK(static_cast<unsigned char>(bytes[16]) == 4);

  // corrupt payloads are rejected
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os << "GZTX";
  os.close();
  CHECK_THROWS_AS(read_gzt<float>(path), FormatError);
}
