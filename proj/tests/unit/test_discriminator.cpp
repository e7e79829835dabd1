#include "doctest_torch.hpp"

#include "agecycle/discriminator.hpp"
#include "agecycle/errors.hpp"

using namespace agecycle;

namespace {

DiscriminatorConfig narrow(int resolution, int n_groups = 4) {
  DiscriminatorConfig c;
  c.resolution = resolution;
  c.n_groups = n_groups;
  c.base_width = 4;
  c.max_width = 16;
  return c;
}

}  // namespace

TEST_SUITE("patch_discriminator") {

TEST_CASE("patch map halves six times") {
  for (int res : {64, 128, 256}) {
    auto d = init_discriminator(1, narrow(res));
    torch::NoGradGuard no_grad;
    const auto out = d->forward(torch::rand({2, 3, res, res}) * 2 - 1);
    const int side = res / 64;
    CHECK(out.patch_scores.sizes() == torch::IntArrayRef({2, 1, side, side}));
    CHECK(out.age_vector.sizes() == torch::IntArrayRef({2, 4}));
  }
}

TEST_CASE("age vector length follows the group count") {
  auto d = init_discriminator(1, narrow(64, 9));
  torch::NoGradGuard no_grad;
  CHECK(d->forward(torch::zeros({1, 3, 64, 64})).age_vector.size(1) == 9);
}

TEST_CASE("default widths double from 32 and cap at 512") {
  DiscriminatorConfig c;
  std::vector<int> widths;
  for (int i = 0; i < DiscriminatorConfig::kConvLayers; ++i) widths.push_back(c.width(i));
  CHECK(widths == std::vector<int>{32, 64, 128, 256, 512, 512});
}

TEST_CASE("six convolutions with 4x4 stride-2 kernels") {
  auto d = init_discriminator(1, narrow(64));
  for (int i = 0; i < DiscriminatorConfig::kConvLayers; ++i) {
    const auto& opt = d->conv_layer(i)->options;
    CHECK(opt.kernel_size()->at(0) == 4);
    CHECK(opt.stride()->at(0) == 2);
  }
  CHECK(d->patch_head()->options.kernel_size()->at(0) == 4);
  CHECK(d->patch_head()->options.stride()->at(0) == 1);
}

TEST_CASE("same seed gives identical parameters") {
  auto a = init_discriminator(3, narrow(64));
  auto b = init_discriminator(3, narrow(64));
  const auto pa = a->parameters();
  const auto pb = b->parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(torch::equal(pa[i], pb[i]));
}

TEST_CASE("outputs are finite at initialization") {
  auto d = init_discriminator(4, narrow(128));
  torch::NoGradGuard no_grad;
  torch::manual_seed(0);
  const auto out = d->forward(torch::rand({8, 3, 128, 128}) * 2 - 1);
  CHECK(torch::isfinite(out.patch_scores).all().item<bool>());
  CHECK(torch::isfinite(out.age_vector).all().item<bool>());
}

TEST_CASE("age vector magnitudes stay small at initialization") {
  DiscriminatorConfig c;
  c.resolution = 64;
  auto d = init_discriminator(5, c);
  torch::NoGradGuard no_grad;
  torch::manual_seed(1);
  const auto out = d->forward(torch::rand({100, 3, 64, 64}) * 2 - 1);
  CHECK(out.age_vector.abs().max().item<double>() < 10.0);
}

TEST_CASE("leaky slope scales negative responses") {
  auto d = init_discriminator(1, narrow(64));
  auto conv = d->conv_layer(0);
  {
    // Identity-like probe: output channel k copies input channel k at one tap.
    torch::NoGradGuard no_grad;
    conv->weight.zero_();
    conv->bias.zero_();
    for (int k = 0; k < 3; ++k) conv->weight[k][k][1][1] = 1.0;
  }
  const auto x = torch::full({1, 3, 64, 64}, -2.0);
  torch::NoGradGuard no_grad;
  const auto y = d->conv_block(0, x);
  CHECK(y.slice(1, 0, 3).slice(2, 1).slice(3, 1).max().item<double>() ==
        doctest::Approx(-0.4));
  const auto pos = d->conv_block(0, -x);
  CHECK(pos.slice(1, 0, 3).slice(2, 1).slice(3, 1).min().item<double>() ==
        doctest::Approx(2.0));
}

TEST_CASE("wrong input shape is rejected") {
  auto d = init_discriminator(1, narrow(64));
  CHECK_THROWS_AS(d->forward(torch::zeros({1, 3, 128, 128})), InvalidInput);
  CHECK_THROWS_AS(d->forward(torch::zeros({3, 64, 64})), InvalidInput);
}

TEST_CASE("resolution must support six halvings") {
  CHECK_THROWS_AS(PatchDiscriminator(narrow(32)), InvalidInput);
  CHECK_THROWS_AS(PatchDiscriminator(narrow(96)), InvalidInput);
}

}  // TEST_SUITE
