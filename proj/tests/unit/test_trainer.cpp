// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "spt/trainer.hpp"

using namespace spt;
using Mat = Matrix<double>;

namespace {

ModelConfig small_config(std::size_t classes = 2) {
  ModelConfig c;
  c.layers = 2, c.hidden = 8, c.heads = 2, c.mlp_size = 16, c.num_classes = classes, c.max_len = 40;
  return c;
}

Dataset small_synthetic(std::size_t classes, std::size_t per_class, std::uint64_t seed) {
  SyntheticSpec s;
  s.num_classes = classes;
  s.motif_length = 3;
  s.min_length = 12;
  s.max_length = 20;
  s.n_per_class = per_class;
  s.seed = seed;
  return generate_synthetic(s);
}

}  // namespace

TEST(Schedule, WarmupEndsAtBaseRate) {
  TrainConfig c;
  EXPECT_DOUBLE_EQ(lr_at(50, 1000, 50, c), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(0, 1000, 50, c), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(25, 1000, 50, c), 0.5e-3);
}

TEST(Schedule, CosineReachesMinimumAtTheEnd) {
  TrainConfig c;
  c.min_lr = 1e-5;
  const std::size_t total = 1000, warm = 50;
  // one step short of the cosine endpoint
  const double granularity = 0.5 * (c.base_lr - c.min_lr) * (1 - std::cos(M_PI / double(total - warm)));
  EXPECT_NEAR(lr_at(total - 1, total, warm, c), c.min_lr, granularity + 1e-15);
  EXPECT_THROW(lr_at(total, total, warm, c), std::out_of_range);
  EXPECT_THROW(lr_at(0, 10, 10, c), std::invalid_argument);
}

TEST(Schedule, ContinuousAtWarmupAndNonIncreasingAfter) {
  TrainConfig c;
  const std::size_t total = 3000, warm = 150;
  EXPECT_NEAR(lr_at(warm - 1, total, warm, c), lr_at(warm, total, warm, c), c.base_lr / warm + 1e-15);
  for (std::size_t s = warm; s + 1 < total; ++s) EXPECT_LE(lr_at(s + 1, total, warm, c), lr_at(s, total, warm, c));
  for (std::size_t s = 0; s + 1 < warm; ++s) EXPECT_LT(lr_at(s, total, warm, c), lr_at(s + 1, total, warm, c));
}

TEST(LayerScale, GeometricInDepth) {
  EXPECT_EQ(layer_lr_scale(ParamGroup::head, 0, 12, 0.75), 1.0);
  EXPECT_DOUBLE_EQ(layer_lr_scale(ParamGroup::block, 12, 12, 0.75), 0.75);
  EXPECT_DOUBLE_EQ(layer_lr_scale(ParamGroup::block, 1, 12, 0.75), std::pow(0.75, 12));
  const double emb = layer_lr_scale(ParamGroup::embedding, 0, 12, 0.75);
  EXPECT_NEAR(emb, 0.02376, 5e-6);
  EXPECT_DOUBLE_EQ(emb, std::pow(0.75, 13));
  EXPECT_THROW(layer_lr_scale(ParamGroup::block, 13, 12, 0.75), std::out_of_range);
}

TEST(AdamW, ZeroGradientZeroDecayLeavesParameterUnchanged) {
  Mat theta = Mat::Constant(2, 2, 0.7), g = Mat::Zero(2, 2), m = Mat::Zero(2, 2), v = Mat::Zero(2, 2);
  AdamWHyper h;
  h.lr = 0.1;
  adamw_update(theta, g, m, v, 1, h);
  EXPECT_EQ(theta, Mat::Constant(2, 2, 0.7));
}

TEST(AdamW, ZeroGradientDecayShrinksByClosedForm) {
  Mat theta(1, 3);
  theta << 2.0, -1.0, 0.5;
  const Mat start = theta;
  Mat g = Mat::Zero(1, 3), m = Mat::Zero(1, 3), v = Mat::Zero(1, 3);
  AdamWHyper h;
  h.lr = 0.01;
  h.weight_decay = 0.05;
  adamw_update(theta, g, m, v, 1, h);
  for (Index i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(theta(0, i), start(0, i) * (1 - 0.01 * 0.05));
}

TEST(AdamW, FirstStepByHand) {
  Mat theta = Mat::Ones(1, 1), g = Mat::Ones(1, 1), m = Mat::Zero(1, 1), v = Mat::Zero(1, 1);
  AdamWHyper h;
  h.lr = 0.1;
  adamw_update(theta, g, m, v, 1, h);
  EXPECT_NEAR(theta(0, 0), 1 - 0.1 * (1 / (1 + 1e-8)), 1e-15);
  EXPECT_NEAR(theta(0, 0), 0.9, 1e-8);
}

TEST(AdamW, MatchesScalarAdamOracle) {
  // minimize (x - 3)^2 from x = -1 with both implementations
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double x = -1, mo = 0, vo = 0;
  Mat theta = Mat::Constant(1, 1, -1.0), m = Mat::Zero(1, 1), v = Mat::Zero(1, 1);
  AdamWHyper h;
  h.lr = lr;
  for (int t = 1; t <= 200; ++t) {
    const double g = 2 * (x - 3);
    mo = b1 * mo + (1 - b1) * g;
    vo = b2 * vo + (1 - b2) * g * g;
    const double mh = mo / (1 - std::pow(b1, t)), vh = vo / (1 - std::pow(b2, t));
    x -= lr * mh / (std::sqrt(vh) + eps);

    adamw_update(theta, Mat(Mat::Constant(1, 1, 2 * (theta(0, 0) - 3))), m, v, std::size_t(t), h);
    ASSERT_NEAR(theta(0, 0), x, 1e-12) << "step " << t;
  }
}

TEST(AdamW, ExclusionEqualsZeroDecay) {
  // One step on a model: an excluded parameter must move exactly as it would
  // with weight_decay = 0 everywhere.
  ModelConfig mc = small_config();
  auto a = build_model<double>(mc, 1);
  auto b = a;
  std::vector<Mat> grads;
  Rng rng(3);
  a.for_each_parameter([&](const ParamInfo&, const Mat& w) {
    Mat g(w.rows(), w.cols());
    for (Index i = 0; i < g.size(); ++i) g.data()[i] = uniform_unit(rng) - 0.5;
    grads.push_back(g);
  });
  TrainConfig with, without;
  without.weight_decay = 0.0;
  OptimizerState<double> sa, sb;
  adamw_step(a, grads, sa, 1e-3, with);
  adamw_step(b, grads, sb, 1e-3, without);
  std::vector<const Mat*> pb;
  b.for_each_parameter([&](const ParamInfo&, const Mat& w) { pb.push_back(&w); });
  std::size_t i = 0;
  a.for_each_parameter([&](const ParamInfo& info, const Mat& w) {
    if (info.weight_decay) {
      EXPECT_NE(w, *pb[i]) << info.name;
    } else {
      EXPECT_EQ(w, *pb[i]) << info.name;
    }
    ++i;
  });
}

TEST(AdamW, NonFiniteGradientNamesTheParameter) {
  auto m = build_model<double>(small_config(), 0);
  auto state = make_optimizer_state(m);
  std::vector<Mat> grads = state.m;
  grads[6](0, 0) = std::numeric_limits<double>::quiet_NaN();  // proj w, proj b, cls, pos, norm1 x2, wq
  try {
    adamw_step(m, grads, state, 1e-3, TrainConfig{});
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("blocks.1.attn.wq"), std::string::npos) << e.what();
  }
}

TEST(Loss, UniformLogitsGiveLogC) {
  for (double eps : {0.0, 0.1, 0.5}) {
    EXPECT_NEAR(smoothed_cross_entropy(RowVector<double>(RowVector<double>::Zero(6)), 2, eps), std::log(6.0), 1e-12);
  }
  EXPECT_NEAR(std::log(6.0), 1.7918, 1e-4);
}

TEST(Loss, ScalarOracleForSkewedLogits) {
  RowVector<double> z(6);
  z << 2, 0, 0, 0, 0, 0;
  // direct evaluation: q0 = 0.1/6 + 0.9, others 0.1/6; log p_k = z_k - log(e^2 + 5)
  const double log_z = std::log(std::exp(2.0) + 5.0);
  const double q0 = 0.1 / 6 + 0.9, qk = 0.1 / 6;
  const double oracle = -(q0 * (2.0 - log_z) + 5 * qk * (0.0 - log_z));
  EXPECT_NEAR(oracle, 0.68348018, 1e-8);
  EXPECT_NEAR(smoothed_cross_entropy(z, 0, 0.1), oracle, 1e-12);
}

TEST(Loss, ConfidentCorrectPredictionWithoutSmoothingIsNearZero) {
  RowVector<double> z = RowVector<double>::Zero(4);
  z(1) = 60;
  EXPECT_LT(smoothed_cross_entropy(z, 1, 0.0), 1e-20);
}

TEST(Loss, GradientMatchesSoftmaxMinusTargets) {
  RowVector<double> z(3);
  z << 0.3, -1.2, 2.0;
  Graph<double> g;
  const Var l = g.input(z);
  g.backward(smoothed_cross_entropy(g, l, 1, 0.1));
  const RowVector<double> p = z.array().exp() / z.array().exp().sum();
  const Mat q = smoothed_targets<double>(3, 1, 0.1);
  EXPECT_LT((g.grad(l) - (p - q.row(0))).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Evaluate, UntrainedModelIsNearChance) {
  SyntheticSpec s;
  s.n_per_class = 50;
  s.min_length = 30, s.max_length = 40;
  const Dataset ds = generate_synthetic(s);
  ModelConfig c = small_config(6);
  const auto r = evaluate(build_model<float>(c, 3), ds);
  EXPECT_NEAR(r.error_rate, 5.0 / 6.0, 0.1);
  EXPECT_EQ(r.per_class_accuracy.size(), 6u);
}

TEST(Evaluate, ConstantPredictorOnItsOwnClassHasZeroError) {
  auto m = build_model<double>(small_config(3), 0);
  m.params.head_w.setZero();
  m.params.head_b << 0, 0, 5;
  Dataset ds = small_synthetic(3, 5, 1);
  for (auto& r : ds.records) r.label = 2;
  const auto res = evaluate(m, ds, 2);
  EXPECT_EQ(res.error_rate, 0.0);
  EXPECT_TRUE(std::isnan(res.per_class_accuracy[0]));
  EXPECT_EQ(res.per_class_accuracy[2], 1.0);
}

TEST(Evaluate, WorkersDoNotChangePredictions) {
  const Dataset ds = small_synthetic(3, 10, 2);
  const auto m = build_model<float>(small_config(3), 5);
  EXPECT_EQ(predict_all(m, ds, 1), predict_all(m, ds, 3));
}

TEST(Batches, CoverEveryRecordOnce) {
  const Dataset ds = small_synthetic(3, 11, 3);
  for (Padding pad : {Padding::none, Padding::pad_batch}) {
    TrainConfig c;
    c.batch_size = 4;
    c.padding = pad;
    const auto batches = detail::make_batches(ds, c, 2);
    std::multiset<std::size_t> seen;
    for (const auto& b : batches) {
      EXPECT_LE(b.size(), 4u);
      seen.insert(b.begin(), b.end());
    }
    EXPECT_EQ(seen.size(), ds.size());
    EXPECT_EQ(std::set<std::size_t>(seen.begin(), seen.end()).size(), ds.size());
  }
}

TEST(Train, SmokeOneEpochOnTwoRecords) {
  Dataset ds = small_synthetic(2, 1, 4);
  auto m = build_model<float>(small_config(), 0);
  TrainConfig c;
  c.epochs = 1;
  c.warmup_epochs = 0;
  const auto h = train(m, ds, &ds, c);
  ASSERT_EQ(h.size(), 1u);
  EXPECT_TRUE(std::isfinite(h[0].train_loss));
  EXPECT_FALSE(std::isnan(h[0].val_err));
}

TEST(Train, SameSeedGivesIdenticalParametersAndMetrics) {
  const Dataset ds = small_synthetic(2, 12, 5);
  TrainConfig c;
  c.epochs = 3;
  c.warmup_epochs = 1;
  c.batch_size = 5;
  c.rng_seed = 17;
  auto run = [&] {
    auto m = build_model<float>(small_config(), 2);
    auto h = train(m, ds, &ds, c);
    std::ostringstream csv;
    write_metrics_csv(h, csv);
    return std::make_pair(m, csv.str());
  };
  const auto [a, csv_a] = run();
  const auto [b, csv_b] = run();
  EXPECT_EQ(csv_a, csv_b);
  EXPECT_EQ(a.params.head_w, b.params.head_w);
  EXPECT_EQ(a.params.blocks[1].fc1_w, b.params.blocks[1].fc1_w);
  EXPECT_EQ(a.params.pos, b.params.pos);

  c.rng_seed = 18;
  auto m = build_model<float>(small_config(), 2);
  train(m, ds, &ds, c);
  EXPECT_NE(m.params.head_w, a.params.head_w);
}

TEST(Train, PaddedBatchesTrain) {
  const Dataset ds = small_synthetic(2, 8, 6);
  auto m = build_model<float>(small_config(), 0);
  TrainConfig c;
  c.epochs = 2;
  c.warmup_epochs = 1;
  c.batch_size = 4;
  c.padding = Padding::pad_batch;
  const auto h = train(m, ds, nullptr, c);
  ASSERT_EQ(h.size(), 2u);
  EXPECT_TRUE(std::isfinite(h[1].train_loss));
  EXPECT_TRUE(std::isnan(h[1].val_err));
}

TEST(Train, SmoothedLossIsNonIncreasing) {
  const Dataset ds = small_synthetic(2, 40, 7);
  ModelConfig mc = small_config();
  auto m = build_model<float>(mc, 1);
  TrainConfig c;
  c.epochs = 20;
  c.warmup_epochs = 2;
  c.batch_size = 8;
  c.rng_seed = 3;
  const auto h = train(m, ds, nullptr, c);
  std::vector<double> smooth;
  for (std::size_t i = 0; i + 5 <= h.size(); ++i) {
    double s = 0;
    for (std::size_t k = i; k < i + 5; ++k) s += h[k].train_loss;
    smooth.push_back(s / 5);
  }
  for (std::size_t i = 1; i < smooth.size(); ++i) EXPECT_LE(smooth[i], smooth[i - 1]) << "window " << i;
}

TEST(Train, RejectsInconsistentInputs) {
  const Dataset ds = small_synthetic(3, 2, 8);
  auto m = build_model<float>(small_config(2), 0);
  TrainConfig c;
  c.epochs = 1;
  c.warmup_epochs = 0;
  EXPECT_THROW(train(m, ds, nullptr, c), std::invalid_argument);
  auto m3 = build_model<float>(small_config(3), 0);
  Dataset long_ds = ds;
  long_ds.records[0].sequence.resize(41, AminoAcid::from_index(0));
  EXPECT_THROW(train(m3, long_ds, nullptr, c), std::length_error);
  c.warmup_epochs = 1;
  EXPECT_THROW(train(m3, ds, nullptr, c), std::invalid_argument);
}

TEST(Train, DivergenceReportsTheStep) {
  const Dataset ds = small_synthetic(2, 4, 9);
  auto m = build_model<float>(small_config(), 0);
  m.params.head_w(0, 0) = std::numeric_limits<float>::infinity();
  TrainConfig c;
  c.epochs = 1;
  c.warmup_epochs = 0;
  try {
    train(m, ds, nullptr, c);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
  }
}

TEST(Metrics, CsvHeaderAndBlankValidation) {
  std::vector<EpochMetrics> h(1);
  h[0].epoch = 1;
  h[0].train_loss = 0.5;
  h[0].train_err = 0.25;
  h[0].lr = 1e-3;
  std::ostringstream os;
  write_metrics_csv(h, os);
  EXPECT_EQ(os.str(), "epoch,train_loss,train_err,val_err,lr\n1,0.5,0.25,,0.001\n");
}

TEST(TrainConfigJson, RoundTrips) {
  TrainConfig c;
  c.batch_size = 7;
  c.padding = Padding::pad_batch;
  c.rng_seed = 99;
  const TrainConfig back = nlohmann::json(c).get<TrainConfig>();
  EXPECT_EQ(back.batch_size, 7u);
  EXPECT_EQ(back.padding, Padding::pad_batch);
  EXPECT_EQ(back.rng_seed, 99u);
  EXPECT_EQ(back.beta2, 0.999);
}
