#include <doctest.h>

#include "cloak/optim.hpp"
#include "cloak/sequential.hpp"
#include "testutil.hpp"

using namespace cloak;
using testutil::check_gradients;
using testutil::randomize;

namespace {

using DSeq = Sequential<double>;

// Mixed-layer toy network covering the obfuscator's layer vocabulary.
DSeq make_autoencoder_toy(Rng& rng) {
  DSeq net("toy");
  net.emplace<Conv2d<double>>("c1", 2, 3, 3, 1, 1, true, 0.1);
  net.emplace<BatchNorm2d<double>>("bn1", 3);
  net.emplace<LeakyReLU<double>>("a1", 0.1);
  net.emplace<DepthwiseConv2d<double>>("dw", 3, 3, 2, 1, true, 0.1);
  net.emplace<BatchNorm2d<double>>("bn2", 3);
  net.emplace<LeakyReLU<double>>("a2", 0.1);
  net.emplace<NearestUpsample2x<double>>("up");
  net.emplace<Conv2d<double>>("c2", 3, 2, 1, 1, 0, false, 0.1);
  net.emplace<Sigmoid<double>>("out");
  net.init(rng);
  return net;
}

DSeq make_classifier_toy(Rng& rng) {
  DSeq net("toy_clf");
  net.emplace<Conv2d<double>>("c1", 2, 4, 3, 2, 1, false, 0.0);
  net.emplace<BatchNorm2d<double>>("bn1", 4);
  net.emplace<LeakyReLU<double>>("a1", 0.0);
  net.emplace<MaxPool2d<double>>("mp", 2, 2, 0);
  net.emplace<GlobalAvgPool<double>>("gap");
  net.emplace<Linear<double>>("fc", 4, 3);
  net.init(rng);
  return net;
}

DSeq make_residual_toy(Rng& rng) {
  DSeq net("toy_res");
  net.emplace<Conv2d<double>>("c1", 1, 4, 3, 1, 1, false, 0.0);
  net.emplace<BatchNorm2d<double>>("bn1", 4);
  net.emplace<LeakyReLU<double>>("a1", 0.0);
  {
    DSeq main("blk.main");
    main.emplace<Conv2d<double>>("conv1", 4, 4, 3, 2, 1, false, 0.0);
    main.emplace<BatchNorm2d<double>>("bn1", 4);
    DSeq shortcut("blk.shortcut");
    shortcut.emplace<Conv2d<double>>("conv", 4, 4, 1, 2, 0, false, 0.0);
    net.emplace<ResidualBlock<double>>("blk", std::move(main), std::move(shortcut), 0.0);
  }
  net.emplace<GlobalAvgPool<double>>("gap");
  net.emplace<Linear<double>>("fc", 4, 2);
  net.init(rng);
  return net;
}

DSeq make_inception_toy(Rng& rng) {
  DSeq net("toy_inc");
  {
    std::vector<DSeq> branches;
    DSeq b1("b1");
    b1.emplace<Conv2d<double>>("c", 2, 2, 1, 1, 0, true, 0.0);
    DSeq b2("b2");
    b2.emplace<Conv2d<double>>("c", 2, 3, 3, 1, 1, true, 0.0);
    b2.emplace<LeakyReLU<double>>("a", 0.0);
    DSeq b3("b3");
    b3.emplace<MaxPool2d<double>>("p", 3, 1, 1);
    b3.emplace<Conv2d<double>>("c", 2, 2, 1, 1, 0, true, 0.0);
    branches.push_back(std::move(b1));
    branches.push_back(std::move(b2));
    branches.push_back(std::move(b3));
    net.emplace<InceptionBlock<double>>("inc", std::move(branches));
  }
  net.emplace<GlobalAvgPool<double>>("gap");
  net.emplace<Linear<double>>("fc", 7, 3);
  net.init(rng);
  return net;
}

}  // namespace

TEST_CASE("analytic gradients match central finite differences on toy nets") {
  // 10 random seeds across four layer mixes; tolerance from the gradient
  // correctness contract.
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    {
      DSeq net = make_autoencoder_toy(rng);
      REQUIRE(net.param_count() <= 1000);
      TensorT<double> x(2, 2, 4, 4);
      randomize(x, rng);
      TensorT<double> target(2, 2, 4, 4);
      randomize(target, rng, 0.0, 1.0);
      auto rep = check_gradients(net, x, testutil::mse_against(target));
      INFO("seed ", seed, " worst ", rep.worst);
      CHECK(rep.max_rel_err < 1e-4);
    }
    {
      DSeq net = make_classifier_toy(rng);
      REQUIRE(net.param_count() <= 1000);
      TensorT<double> x(3, 2, 8, 8);
      randomize(x, rng);
      auto rep = check_gradients(net, x, testutil::crossentropy_against({0, 2, 1}));
      INFO("seed ", seed, " worst ", rep.worst);
      CHECK(rep.max_rel_err < 1e-4);
    }
    {
      DSeq net = make_residual_toy(rng);
      REQUIRE(net.param_count() <= 1000);
      TensorT<double> x(2, 1, 6, 6);
      randomize(x, rng);
      auto rep = check_gradients(net, x, testutil::crossentropy_against({1, 0}));
      INFO("seed ", seed, " worst ", rep.worst);
      CHECK(rep.max_rel_err < 1e-4);
    }
    {
      DSeq net = make_inception_toy(rng);
      REQUIRE(net.param_count() <= 1000);
      TensorT<double> x(2, 2, 5, 5);
      randomize(x, rng);
      auto rep = check_gradients(net, x, testutil::crossentropy_against({2, 0}));
      INFO("seed ", seed, " worst ", rep.worst);
      CHECK(rep.max_rel_err < 1e-4);
    }
  }
}

TEST_CASE("all-zero input through a zero-weight linear net stays zero") {
  Sequential<float> net("lin");
  net.emplace<Linear<float>>("fc", 8, 4);
  // weights default to zero until init() runs
  Tensor x(3, 8, 1, 1);
  Tensor y = net.infer(x);
  for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == 0.0f);
}

TEST_CASE("upsample replicates each pixel into its 2x2 block") {
  NearestUpsample2x<float> up("up");
  Tensor x(1, 1, 2, 2);
  x.at(0, 0, 0, 0) = 1;
  x.at(0, 0, 0, 1) = 2;
  x.at(0, 0, 1, 0) = 3;
  x.at(0, 0, 1, 1) = 4;
  Tensor y = up.infer(x);
  CHECK(y.h() == 4);
  CHECK(y.w() == 4);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      CHECK(y.at(0, 0, i, j) == x.at(0, 0, i / 2, j / 2));
}

TEST_CASE("adam reduces a simple quadratic") {
  Sequential<float> net("q");
  auto* fc = net.emplace<Linear<float>>("fc", 4, 1);
  (void)fc;
  Rng rng(7);
  net.init(rng);
  Adam<float> opt(net.params());

  Tensor x(16, 4, 1, 1);
  testutil::randomize(x, rng);
  Tensor target(16, 1, 1, 1);
  for (int i = 0; i < 16; ++i) target[i] = 0.5f;

  double first = -1, last = -1;
  for (int it = 0; it < 200; ++it) {
    opt.zero_grad();
    Tensor y = net.forward(x);
    double L = reconstruction_loss(target, y);
    if (first < 0) first = L;
    last = L;
    Tensor dy = reconstruction_loss_grad(target, y);
    net.backward(dy, true);
    opt.step(0.05);
  }
  CHECK(last < first * 0.01);
}
