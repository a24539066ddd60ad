#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "forge/detector.hpp"
#include "support.hpp"

using namespace forge;

namespace {

DetectorConfig small_config(Pooling pool = Pooling::kMax, Normalization norm = Normalization::kNone) {
  DetectorConfig c;
  c.input_size = 32;
  c.width_scale = 0.5;
  c.pooling = pool;
  c.normalization = norm;
  return c;
}

template <typename T>
nn::Tensor<T> random_batch(int n, int size, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  nn::Tensor<T> x(n, 1, size, size);
  for (auto& v : x.data) v = static_cast<T>(u(gen));
  return x;
}

template <typename T>
double off_center_sum_of(std::span<const T> f, int k) {
  double s = 0.0;
  for (int i = 0; i < k * k; ++i)
    if (i != k * k / 2) s += f[i];
  return s;
}

double off_center_sum(std::span<const double> f, int k) { return off_center_sum_of(f, k); }
double off_center_sum(std::span<const float> f, int k) { return off_center_sum_of(f, k); }

}  // namespace

TEST(Projection, RescalesOffCenterTaps) {
  // 3x3: off-center taps sum to 4, center arbitrary.
  std::vector<double> w{1, 0, 0, 1, 7, 1, 0, 0, 1};
  project_constrained_weights(std::span(w), 3);
  EXPECT_EQ(w[4], -1.0);
  EXPECT_DOUBLE_EQ(w[0], 0.25);
  EXPECT_DOUBLE_EQ(w[3], 0.25);
  EXPECT_DOUBLE_EQ(w[1], 0.0);
  EXPECT_NEAR(off_center_sum(w, 3), 1.0, 1e-15);
}

TEST(Projection, NegativeSumKeepsRatios) {
  std::vector<double> w{-1, 0, 0, 0, 3, 0, 0, 0, -1};
  project_constrained_weights(std::span(w), 3);
  EXPECT_DOUBLE_EQ(w[0], 0.5);
  EXPECT_DOUBLE_EQ(w[8], 0.5);
  EXPECT_EQ(w[4], -1.0);
}

TEST(Projection, ZeroSumFallsBackToShift) {
  std::vector<double> w{1, -1, 0, 0, 0, 0, 0, 0, 0};
  project_constrained_weights(std::span(w), 3);
  EXPECT_DOUBLE_EQ(w[0], 1.125);
  EXPECT_DOUBLE_EQ(w[1], -0.875);
  EXPECT_DOUBLE_EQ(w[2], 0.125);
  EXPECT_NEAR(off_center_sum(w, 3), 1.0, 1e-15);
}

TEST(Projection, IdempotentOnRandomKernels) {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> w(3 * 25);
    for (auto& v : w) v = nd(gen);
    project_constrained_weights(std::span(w), 5);
    for (int f = 0; f < 3; ++f) {
      std::span<const double> filt(w.data() + f * 25, 25);
      EXPECT_EQ(filt[12], -1.0);
      EXPECT_NEAR(off_center_sum(filt, 5), 1.0, 1e-9);
    }
    auto again = w;
    project_constrained_weights(std::span(again), 5);
    EXPECT_EQ(again, w);
  }
}

TEST(Projection, FloatIdempotent) {
  std::mt19937_64 gen(4);
  std::normal_distribution<float> nd;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> w(25);
    for (auto& v : w) v = nd(gen);
    project_constrained_weights(std::span(w), 5);
    auto again = w;
    project_constrained_weights(std::span(again), 5);
    EXPECT_EQ(again, w);
  }
}

// Large taps after an update step: a small sum error must still be projected away.
TEST(Projection, FloatLargeTapsReprojected) {
  std::mt19937_64 gen(5);
  std::normal_distribution<float> nd(0.0f, 3.0f);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> w(25);
    for (auto& v : w) v = nd(gen);
    project_constrained_weights(std::span(w), 5);
    w[trial % 12] += 4e-5f;
    project_constrained_weights(std::span(w), 5);
    double magnitude = 0.0;
    for (int i = 0; i < 25; ++i)
      if (i != 12) magnitude += std::abs(static_cast<double>(w[i]));
    EXPECT_LE(std::abs(off_center_sum(std::span<const float>(w), 5) - 1.0),
              std::numeric_limits<float>::epsilon() * magnitude);
  }
}

TEST(Projection, EvenKernelRejected) {
  std::vector<double> w(16);
  EXPECT_THROW(project_constrained_weights(std::span(w), 4), Error);
}

TEST(Detector, FreshModelSatisfiesConstraint) {
  const auto m = nn::build_detector<double>(small_config());
  const auto& w = m.constrained_layer().weight;
  for (int f = 0; f < 3; ++f) {
    std::span<const double> filt(w.data() + f * 25, 25);
    EXPECT_EQ(filt[12], -1.0);
    EXPECT_NEAR(off_center_sum(filt, 5), 1.0, 1e-12);
  }
  EXPECT_TRUE(m.constrained_layer().bias.empty());
}

TEST(Detector, ParameterCountByHand) {
  // width 0.5, 32x32 input: conv2 8, conv3 16, conv4 16, fc1 64, fc2 64, spatial 2x2.
  const std::size_t convres = 3 * 25;
  const std::size_t conv2 = 8 * 3 * 25 + 8;
  const std::size_t conv3 = 16 * 8 * 9 + 16;
  const std::size_t conv4 = 16 * 16 + 16;
  const std::size_t fc1 = 64 * 64 + 64, fc2 = 64 * 64 + 64, fc3 = 64 * 2 + 2;
  const std::size_t plain = convres + conv2 + conv3 + conv4 + fc1 + fc2 + fc3;
  EXPECT_EQ(nn::build_detector<float>(small_config()).parameter_count(), plain);
  EXPECT_EQ(nn::build_detector<float>(small_config(Pooling::kAverage, Normalization::kBatchNorm)).parameter_count(),
            plain + 2 * (8 + 16 + 16));
  auto drop = small_config();
  drop.dropout_rate = 0.5;
  EXPECT_EQ(nn::build_detector<float>(drop).parameter_count(), plain);
}

TEST(Detector, FullWidthDims) {
  DetectorConfig c;
  c.width_scale = 1.0;
  const auto d = layer_dims(c);
  EXPECT_EQ(d.conv2, 16);
  EXPECT_EQ(d.conv3, 32);
  EXPECT_EQ(d.conv4, 32);
  EXPECT_EQ(d.fc1, 128);
  EXPECT_EQ(d.fc2, 128);
}

TEST(Detector, LatentShapes) {
  const auto m = nn::build_detector<float>(small_config());
  const auto x = random_batch<float>(3, 32, 1);
  const auto acts = nn::latent_activations(m, x, m.latent_names());
  auto shape = [&](const std::string& n) {
    const auto& t = acts.at(n);
    return std::array<int, 4>{t.n, t.c, t.h, t.w};
  };
  EXPECT_EQ(shape(kConvRes), (std::array<int, 4>{3, 3, 32, 32}));
  EXPECT_EQ(shape("conv2"), (std::array<int, 4>{3, 8, 8, 8}));
  EXPECT_EQ(shape("conv3"), (std::array<int, 4>{3, 16, 4, 4}));
  EXPECT_EQ(shape("conv4"), (std::array<int, 4>{3, 16, 2, 2}));
  EXPECT_EQ(acts.at("fc1").sample_size(), 64u);
  EXPECT_EQ(acts.at("fc2").sample_size(), 64u);
  EXPECT_EQ(acts.at(kFc3Input).sample_size(), 64u);
  EXPECT_EQ(acts.at(kFc3).sample_size(), 2u);
}

TEST(Detector, LatentNamesInNetworkOrder) {
  const auto m = nn::build_detector<float>(small_config());
  EXPECT_EQ(m.latent_names(), (std::vector<std::string>{kConvRes, "conv2", "conv3", "conv4", "fc1", "fc2",
                                                        kFc3Input, kFc3}));
}

TEST(Detector, LogitsAreAffineInFc3Input) {
  auto cfg = small_config();
  cfg.dropout_rate = 0.5;
  const auto m = nn::build_detector<double>(cfg);
  const auto x = random_batch<double>(4, 32, 2);
  const auto acts = nn::latent_activations(m, x, {kFc3Input, kFc3});
  const auto logits = nn::forward_logits(m, x);
  const auto& fc3 = m.output_layer();
  const auto& h = acts.at(kFc3Input);
  for (int i = 0; i < 4; ++i)
    for (int o = 0; o < 2; ++o) {
      double z = fc3.bias[o];
      for (int k = 0; k < fc3.in_features; ++k) z += fc3.weight[o * fc3.in_features + k] * h.sample(i)[k];
      EXPECT_NEAR(z, logits.at(i, o, 0, 0), 1e-12);
      EXPECT_EQ(logits.at(i, o, 0, 0), acts.at(kFc3).at(i, o, 0, 0));
    }
}

TEST(Detector, ConvResSilentOnConstantImage) {
  const auto m = nn::build_detector<double>(small_config());
  nn::Tensor<double> x(2, 1, 32, 32, 0.37);
  const auto acts = nn::latent_activations(m, x, {kConvRes});
  for (double v : acts.at(kConvRes).data) EXPECT_NEAR(v, 0.0, 1e-10);
}

TEST(Detector, UnknownLayerIsLookupError) {
  const auto m = nn::build_detector<float>(small_config());
  try {
    nn::latent_activations(m, random_batch<float>(1, 32, 1), {"conv9"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kLookup);
    EXPECT_NE(std::string(e.what()).find("conv2"), std::string::npos);
  }
}

TEST(Detector, WrongInputShapeRejected) {
  const auto m = nn::build_detector<float>(small_config());
  try {
    nn::forward_logits(m, random_batch<float>(1, 64, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvalidInput);
  }
}

TEST(Detector, InvalidConfigs) {
  auto bad = small_config();
  bad.input_size = 40;
  EXPECT_THROW(nn::build_detector<float>(bad), Error);
  bad = small_config();
  bad.dropout_rate = 1.0;
  EXPECT_THROW(nn::build_detector<float>(bad), Error);
  bad = small_config();
  bad.constrained_kernel = 4;
  EXPECT_THROW(nn::build_detector<float>(bad), Error);
}

TEST(Detector, BuildIsDeterministicInSeed) {
  const auto a = nn::build_detector<float>(small_config());
  const auto b = nn::build_detector<float>(small_config());
  auto c_cfg = small_config();
  c_cfg.rng_seed = 23;
  const auto c = nn::build_detector<float>(c_cfg);
  EXPECT_EQ(a.output_layer().weight, b.output_layer().weight);
  EXPECT_NE(a.output_layer().weight, c.output_layer().weight);
}

TEST(Detector, EvalIgnoresDropoutAndBatchComposition) {
  auto cfg = small_config(Pooling::kMax, Normalization::kBatchNorm);
  cfg.dropout_rate = 0.5;
  const auto m = nn::build_detector<double>(cfg);
  const auto x = random_batch<double>(5, 32, 9);
  const auto all = nn::forward_logits(m, x);
  nn::Tensor<double> one(1, 1, 32, 32);
  std::copy(x.sample(3).begin(), x.sample(3).end(), one.data.begin());
  const auto single = nn::forward_logits(m, one);
  EXPECT_NEAR(single.data[0], all.at(3, 0, 0, 0), 1e-12);
  EXPECT_NEAR(single.data[1], all.at(3, 1, 0, 0), 1e-12);
}

class GradCheck : public ::testing::TestWithParam<std::pair<Pooling, Normalization>> {};

TEST_P(GradCheck, BackwardMatchesFiniteDifferences) {
  const auto [pool, norm] = GetParam();
  auto m = nn::build_detector<double>(small_config(pool, norm));
  const auto x = random_batch<double>(3, 32, 11);
  std::mt19937_64 gen(12);
  std::normal_distribution<double> nd;
  nn::Tensor<double> c(3, 2, 1, 1);
  for (auto& v : c.data) v = nd(gen);

  auto loss = [&](const nn::Model<double>& model) {
    const auto out = nn::forward(model, x, nn::Mode::kTrain);
    return std::inner_product(out.data.begin(), out.data.end(), c.data.begin(), 0.0);
  };
  nn::Trace<double> trace;
  nn::forward(m, x, nn::Mode::kTrain, &trace);
  auto grads = m.zero_gradients();
  nn::backward(m, trace, c, nn::Mode::kTrain, &grads);

  const double h = 1e-6;
  int checked = 0;
  for (std::size_t b = 0; b < m.blocks.size(); ++b)
    for (std::size_t l = 0; l < m.blocks[b].layers.size(); ++l) {
      auto params = nn::trainable(m.blocks[b].layers[l]);
      for (std::size_t p = 0; p < params.size(); ++p) {
        auto& arr = *params[p];
        std::uniform_int_distribution<std::size_t> pick(0, arr.size() - 1);
        for (int t = 0; t < 4; ++t) {
          const std::size_t i = pick(gen);
          const double keep = arr[i];
          arr[i] = keep + h;
          const double up = loss(m);
          arr[i] = keep - h;
          const double down = loss(m);
          arr[i] = keep;
          const double numeric = (up - down) / (2 * h);
          const double analytic = grads[b][l][p][i];
          EXPECT_NEAR(analytic, numeric, 1e-4 * std::max(1.0, std::abs(numeric)))
              << m.blocks[b].name << " layer " << l << " param " << p << " index " << i;
          ++checked;
        }
      }
    }
  EXPECT_GT(checked, 20);
}

INSTANTIATE_TEST_SUITE_P(Variants, GradCheck,
                         ::testing::Values(std::pair{Pooling::kMax, Normalization::kNone},
                                           std::pair{Pooling::kAverage, Normalization::kNone},
                                           std::pair{Pooling::kMax, Normalization::kBatchNorm},
                                           std::pair{Pooling::kAverage, Normalization::kBatchNorm}));

TEST(Detector, LatentGradientMatchesFiniteDifference) {
  const auto m = nn::build_detector<double>(small_config());
  const auto x = random_batch<double>(1, 32, 21);
  const std::set<std::string> wanted{"fc1"};
  nn::Trace<double> trace;
  const auto out = nn::forward(m, x, nn::Mode::kEval, &trace, &wanted);
  nn::Tensor<double> d(1, 2, 1, 1);
  d.data = {-1.0, 1.0};
  std::map<std::string, nn::Tensor<double>> lg;
  nn::backward<double>(m, trace, d, nn::Mode::kEval, nullptr, &lg, &wanted);
  // Push the fc1 activation through the remaining blocks by hand.
  const auto& h1 = trace.captured.at("fc1");
  auto tail = [&](const std::vector<double>& a) {
    nn::Tensor<double> t(1, static_cast<int>(a.size()), 1, 1);
    t.data = a;
    for (std::size_t b = 5; b < m.blocks.size(); ++b)
      for (const auto& layer : m.blocks[b].layers)
        t = std::visit(
            [&](const auto& L) -> nn::Tensor<double> {
              using LT = std::decay_t<decltype(L)>;
              if constexpr (std::is_same_v<LT, nn::Dropout>)
                return t;
              else if constexpr (std::is_same_v<LT, nn::BatchNorm<double>>)
                return nn::forward<double>(L, t, nn::Mode::kEval, nullptr, nullptr);
              else
                return nn::forward<double>(L, t, nullptr);
            },
            layer);
    return t.data[1] - t.data[0];
  };
  EXPECT_NEAR(tail(h1.data), out.data[1] - out.data[0], 1e-12);
  for (std::size_t i = 0; i < h1.data.size(); i += 7) {
    auto up = h1.data, down = h1.data;
    up[i] += 1e-6;
    down[i] -= 1e-6;
    EXPECT_NEAR(lg.at("fc1").data[i], (tail(up) - tail(down)) / 2e-6, 1e-6);
  }
}
