#include <gtest/gtest.h>

#include <numeric>

#include "covidx/architectures.hpp"
#include "covidx/gradcheck.hpp"
#include "oracles.hpp"
#include "structure_checks.hpp"

using namespace covidx;

namespace {

ArchConfig small_config(std::uint64_t seed = 1) {
  ArchConfig c;
  c.input_size = 32;
  c.init_seed = seed;
  return c;
}

Tensor<float> random_batch(std::size_t b, std::size_t s, std::uint64_t seed) {
  Rng rng(seed);
  return test::random_tensor<float>({b, 3, s, s}, rng, 0.0, 1.0);
}

}  // namespace

TEST(Families, NamesParseCaseInsensitively) {
  EXPECT_EQ(kAllFamilies.size(), 7u);
  EXPECT_EQ(parse_family("VGG19"), FamilyId::vgg);
  EXPECT_EQ(parse_family("MobileNetV2"), FamilyId::mobilenet_v2);
  for (FamilyId f : kAllFamilies) EXPECT_EQ(parse_family(family_name(f)), f);
  try {
    parse_family("alexnet");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::usage);
    for (FamilyId f : kAllFamilies) EXPECT_NE(std::string(e.what()).find(family_name(f)), std::string::npos);
  }
}

TEST(Families, ConfigValidation) {
  ArchConfig c = small_config();
  c.input_size = 16;
  EXPECT_THROW(build_family<float>(FamilyId::vgg, c), Error);
  c = small_config();
  c.width_mult = 0.0;
  EXPECT_THROW(build_family<float>(FamilyId::resnet_v2, c), Error);
  c = small_config();
  c.num_classes = 1;
  EXPECT_THROW(build_family<float>(FamilyId::xception, c), Error);
  c = small_config();
  c.width_mult = 0.001;  // floors at one channel
  EXPECT_NO_THROW(build_family<float>(FamilyId::inception, c));
}

TEST(Families, ForwardShapesAndProbabilities) {
  for (FamilyId f : kAllFamilies) {
    auto model = build_family<float>(f, small_config());
    for (std::size_t b : {4u, 10u}) {
      auto probs = forward(model, random_batch(b, 32, 3), Mode::infer).value();
      ASSERT_EQ(probs.shape(), (Shape{b, 2})) << family_name(f);
      for (std::size_t i = 0; i < b; ++i) {
        EXPECT_GE(probs[2 * i], 0.0f);
        EXPECT_GE(probs[2 * i + 1], 0.0f);
        EXPECT_NEAR(probs[2 * i] + probs[2 * i + 1], 1.0, 1e-6) << family_name(f);
      }
    }
    EXPECT_THROW(forward(model, random_batch(2, 64, 3), Mode::infer), Error);
  }
}

TEST(Families, DuplicateImagesGiveIdenticalRows) {
  for (FamilyId f : kAllFamilies) {
    auto model = build_family<float>(f, small_config());
    auto batch = random_batch(3, 32, 5);
    const std::size_t plane = 3 * 32 * 32;
    std::copy_n(batch.data(), plane, batch.data() + 2 * plane);
    auto probs = forward(model, batch, Mode::infer).value();
    EXPECT_EQ(probs[0], probs[4]) << family_name(f);
    EXPECT_EQ(probs[1], probs[5]) << family_name(f);
  }
}

TEST(Families, StructuralLawsHold) {
  Rng rng(17);
  for (FamilyId f : kAllFamilies) {
    for (int trial = 0; trial < 3; ++trial) {
      ArchConfig c;
      c.input_size = 32 + 8 * rng.below(5);
      c.width_mult = rng.uniform(0.1, 0.5);
      c.depth_mult = rng.uniform(0.3, 1.6);
      c.init_seed = rng.next_u64();
      auto model = build_family<float>(f, c);
      EXPECT_EQ(test::check_family(model), "") << family_name(f);
    }
  }
}

TEST(Families, DenseBlockConcatenationArithmetic) {
  // Entry width 8, growth 4, three layers -> 8 + 3*4 = 20 channels.
  ArchConfig c = small_config();
  c.width_mult = 0.125;  // stem 8, growth 2
  c.width_mult = 8.0 / 64.0;
  auto model = build_family<float>(FamilyId::densenet, c);
  const auto rows = describe(model, 1);
  // With growth scale_channels(16, 0.125) = 2, the first block ends at 8 + 3*2.
  auto out = std::find_if(rows.begin(), rows.end(), [](const LayerRow& r) { return r.name == "s0/block_out"; });
  ASSERT_NE(out, rows.end());
  EXPECT_EQ(out->output_shape[1], 8u + 3u * 2u);

  c.width_mult = 0.25;  // stem 16, growth 4
  auto wide = build_family<float>(FamilyId::densenet, c);
  const auto wide_rows = describe(wide, 1);
  out = std::find_if(wide_rows.begin(), wide_rows.end(), [](const LayerRow& r) { return r.name == "s1/block_out"; });
  ASSERT_NE(out, wide_rows.end());
  // Stage-1 entry is the transition squeeze of 16 + 3*4 = 28 channels -> 14.
  EXPECT_EQ(out->output_shape[1], 14u + 3u * 4u);

  // Channel counts never decrease inside a dense block.
  std::size_t checked = 0;
  EXPECT_EQ(test::check_densenet(wide, &checked), "");
  EXPECT_GT(checked, 0u);
}

TEST(Families, MobileNetSkipFollowsStrideRule) {
  auto model = build_family<float>(FamilyId::mobilenet_v2, small_config());
  std::size_t with_skip = 0, without_skip = 0;
  EXPECT_EQ(test::check_mobilenet_v2(model, &with_skip, &without_skip), "");
  // Stage 0 keeps stride 1 and width; stages 1 and 2 open with stride 2.
  EXPECT_EQ(with_skip, 1u);
  EXPECT_EQ(without_skip, 2u);

  ArchConfig deep = small_config();
  deep.depth_mult = 1.0;
  auto deeper = build_family<float>(FamilyId::mobilenet_v2, deep);
  EXPECT_EQ(test::check_mobilenet_v2(deeper, &with_skip, &without_skip), "");
  EXPECT_EQ(with_skip, 4u);
  EXPECT_EQ(without_skip, 2u);
}

TEST(ParameterCount, ClosedForms) {
  Model<float> conv_only;
  conv_only.config = small_config();
  detail::GraphBuilder<float> g(conv_only, 0);
  g.conv(g.input(), 8, 3, 1, "conv", /*bias=*/true);
  EXPECT_EQ(parameter_count(conv_only), 3u * 3u * 3u * 8u + 8u);
  EXPECT_EQ(parameter_count(conv_only), 224u);

  Model<float> dense_only;
  dense_only.config = small_config();
  detail::GraphBuilder<float> gd(dense_only, 0);
  gd.dense(gd.flatten(gd.input(), "flat"), 5, "fc");
  const std::size_t n = 3 * 32 * 32;
  EXPECT_EQ(parameter_count(dense_only), n * 5 + 5);
}

TEST(ParameterCount, ToyVggMatchesLayerByLayerSum) {
  const ArchConfig c = small_config();
  auto model = build_family<float>(FamilyId::vgg, c);
  // Stem 3->16, then per stage: two 3x3 convs, plus one more in stages 1 and 2;
  // every conv carries a batch norm (scale + shift); head is dense 64->2.
  auto conv_bn = [](std::size_t in, std::size_t out) { return in * out * 9 + 2 * out; };
  std::size_t expect = conv_bn(3, 16);
  expect += conv_bn(16, 16) + conv_bn(16, 16);
  expect += conv_bn(16, 32) + conv_bn(32, 32) + conv_bn(32, 32);
  expect += conv_bn(32, 64) + conv_bn(64, 64) + conv_bn(64, 64);
  expect += 64 * 2 + 2;
  EXPECT_EQ(parameter_count(model), expect);

  ArchConfig c16 = c;
  c16.vgg_depth = 16;
  EXPECT_GT(parameter_count(model), parameter_count(build_family<float>(FamilyId::vgg, c16)));
}

TEST(Describe, TableIsConsistent) {
  for (FamilyId f : kAllFamilies) {
    auto model = build_family<float>(f, small_config());
    const auto rows = describe(model, 4);
    ASSERT_EQ(rows.size(), model.layers.size());
    std::size_t total = 0;
    for (const auto& r : rows) total += r.parameters;
    EXPECT_EQ(total, parameter_count(model)) << family_name(f);
    EXPECT_EQ(rows.back().output_shape, (Shape{4, 2}));
  }
}

TEST(Families, SameSeedSameParameters) {
  for (FamilyId f : kAllFamilies) {
    auto a = build_family<float>(f, small_config(5));
    auto b = build_family<float>(f, small_config(5));
    auto c = build_family<float>(f, small_config(6));
    ASSERT_EQ(a.params.size(), b.params.size());
    bool differs = false;
    for (std::size_t i = 0; i < a.params.size(); ++i) {
      EXPECT_EQ(a.params[i].value, b.params[i].value);
      differs = differs || !(a.params[i].value == c.params[i].value);
    }
    EXPECT_TRUE(differs);
  }
}

TEST(Families, TrainModeDropoutNeedsGenerator) {
  auto model = build_family<float>(FamilyId::inception, small_config());
  EXPECT_THROW(forward(model, random_batch(2, 32, 1), Mode::train), Error);
  Rng rng(1);
  EXPECT_NO_THROW(forward(model, random_batch(2, 32, 1), Mode::train, &rng));
}

TEST(Families, WholeNetworkGradientsMatchFiniteDifferences) {
  for (FamilyId f : kAllFamilies) {
    ArchConfig c = small_config(9);
    c.width_mult = 0.125;
    auto model = build_family<double>(f, c);
    Rng rng(21);
    // Move off the zero-bias initial point, where relu inputs sit exactly at 0.
    for (auto& p : model.params) {
      for (double& v : p.value.values()) v += rng.uniform(-0.05, 0.05);
    }
    const auto images = test::random_tensor<double>({2, 3, 32, 32}, rng, 0.0, 1.0);
    const auto targets = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    std::vector<Parameter<double>*> params;
    for (auto& p : model.params) params.push_back(&p);
    const auto r = gradient_check(
        [&] {
          Rng mask(77);
          return cross_entropy(forward(model, images, Mode::train, &mask), targets);
        },
        params, {1e-5, 6, 3});
    EXPECT_LT(r.max_rel_error, 1e-5) << family_name(f) << " worst " << r.worst_parameter << "["
                                     << r.worst_index << "] analytic " << r.worst_analytic
                                     << " numeric " << r.worst_numeric;
    EXPECT_GE(r.coordinates - r.kink_coordinates, 2 * params.size()) << family_name(f);
  }
}
