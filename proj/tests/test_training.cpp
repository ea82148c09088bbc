#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "fptn/errors.hpp"
#include "fptn/reference.hpp"
#include "fptn/synthetic.hpp"
#include "fptn/training.hpp"
#include "test_util.hpp"

namespace fptn {
namespace {

using testing::random_tensor;

// Scalar RAdam recurrence written out from the published algorithm.
struct ScalarRAdam {
  double lr, m = 0.0, v = 0.0;
  int t = 0;
  double step(double w, double g) {
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double m_hat = m / (1 - std::pow(b1, t));
    const double rho_inf = 2 / (1 - b2) - 1;
    const double rho = rho_inf - 2 * t * std::pow(b2, t) / (1 - std::pow(b2, t));
    if (rho <= 4) return w - lr * m_hat;
    const double l = std::sqrt(1 - std::pow(b2, t)) / (std::sqrt(v) + eps);
    const double r = std::sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho));
    return w - lr * m_hat * r * l;
  }
};

// ---- RAdam ------------------------------------------------------------------

TEST(RAdam, ZeroGradientLeavesParametersUnchanged) {
  std::mt19937_64 rng(1);
  Tensor w = random_tensor({3, 4}, rng);
  const Tensor before = w;
  const ParamRef params[] = {{"w", &w}};
  RAdam opt(params, {.lr = 1e-2});
  const Tensor zero = Tensor::zeros({3, 4});
  const Tensor* grads[] = {&zero};
  for (int i = 0; i < 50; ++i) opt.step(params, grads);
  EXPECT_EQ(w, before);
  EXPECT_EQ(opt.steps_taken(), 50u);
}

TEST(RAdam, FirstStepsTakeMomentumBranch) {
  EXPECT_LE(RAdam::rho(4, 0.999), 4.0);
  EXPECT_GT(RAdam::rho(5, 0.999), 4.0);
  EXPECT_NEAR(RAdam::rho(4, 0.999), 3.9975, 1e-4);

  Tensor w = Tensor::vector({1.0});
  const ParamRef params[] = {{"w", &w}};
  RAdam opt(params, {.lr = 1e-2});
  // Values from running the scalar recurrence for f(w) = w^2.
  const double expected[] = {0.98, 0.9602105263157894, 0.9406370168964847, 0.9212847255874955, 0.9211124194261855};
  double m = 0.0;
  for (int t = 1; t <= 5; ++t) {
    const double g = 2.0 * w[0];
    m = 0.9 * m + 0.1 * g;
    const double before = w[0];
    const Tensor grad = Tensor::vector({g});
    const Tensor* grads[] = {&grad};
    opt.step(params, grads);
    if (t <= 4) EXPECT_NEAR(w[0], before - 1e-2 * m / (1.0 - std::pow(0.9, t)), 1e-15);
    EXPECT_NEAR(w[0], expected[t - 1], 1e-15) << "step " << t;
  }
}

TEST(RAdam, QuadraticConvergesLikeReferenceRecurrence) {
  Tensor w = Tensor::vector({1.0});
  const ParamRef params[] = {{"w", &w}};
  RAdam opt(params, {.lr = 1e-2});
  ScalarRAdam oracle{.lr = 1e-2};
  double w_ref = 1.0;
  for (int i = 0; i < 2000; ++i) {
    const Tensor grad = Tensor::vector({2.0 * w[0]});
    const Tensor* grads[] = {&grad};
    opt.step(params, grads);
    w_ref = oracle.step(w_ref, 2.0 * w_ref);
    ASSERT_NEAR(w[0], w_ref, 1e-12 * std::max(1.0, std::abs(w_ref))) << "step " << i;
  }
  EXPECT_LT(std::abs(w[0]), 1e-3);
}

TEST(RAdam, OneSmallStepDecreasesConvexQuadratic) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor w = random_tensor({6}, rng, -5.0, 5.0);
    const Tensor a = random_tensor({6}, rng, 0.1, 3.0);
    auto loss = [&] {
      double s = 0.0;
      for (std::size_t i = 0; i < 6; ++i) s += a[i] * w[i] * w[i];
      return s;
    };
    const ParamRef params[] = {{"w", &w}};
    RAdam opt(params, {.lr = 1e-4});
    Tensor g({6});
    for (std::size_t i = 0; i < 6; ++i) g[i] = 2.0 * a[i] * w[i];
    const Tensor* grads[] = {&g};
    const double before = loss();
    opt.step(params, grads);
    EXPECT_LT(loss(), before);
  }
}

TEST(RAdam, NonFiniteGradientNamesParameterAndUpdatesNothing) {
  Tensor a = Tensor::vector({1.0, 2.0}), b = Tensor::vector({3.0});
  const ParamRef params[] = {{"layers.0.attn.w_query", &a}, {"head.bias", &b}};
  RAdam opt(params, {.lr = 0.1});
  const Tensor ga = Tensor::vector({0.5, 0.5});
  const Tensor gb = Tensor::vector({std::nan("")});
  const Tensor* grads[] = {&ga, &gb};
  try {
    opt.step(params, grads);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("head.bias"), std::string::npos);
  }
  EXPECT_EQ(a, Tensor::vector({1.0, 2.0}));
  EXPECT_EQ(opt.steps_taken(), 0u);
}

// ---- metrics ----------------------------------------------------------------

TEST(Metrics, WorkedExample) {
  const std::vector<double> y{10, 20}, yhat{12, 16};
  const auto r = evaluate_metrics(yhat, y);
  EXPECT_DOUBLE_EQ(r.mae, 3.0);
  EXPECT_DOUBLE_EQ(r.rmse, std::sqrt(10.0));
  ASSERT_TRUE(r.mape.has_value());
  EXPECT_DOUBLE_EQ(*r.mape, 20.0);
}

TEST(Metrics, PerfectPrediction) {
  const std::vector<double> y{3, 1, 4, 1, 5};
  const auto r = evaluate_metrics(y, y);
  EXPECT_EQ(r.mae, 0.0);
  EXPECT_EQ(r.rmse, 0.0);
  EXPECT_EQ(r.mape, 0.0);
}

TEST(Metrics, AllMaskedMapeIsUndefined) {
  const std::vector<double> y{0.0, 1e-4}, yhat{1.0, 2.0};
  const auto r = evaluate_metrics(yhat, y);
  EXPECT_FALSE(r.mape.has_value());
  EXPECT_EQ(r.masked, 2u);
  EXPECT_NE(metrics_to_json(r).find("\"mape\":null"), std::string::npos);
}

TEST(Metrics, MaeNeverExceedsRmse) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-100.0, 100.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> a(1 + trial % 37), b(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = u(rng);
      b[i] = u(rng);
    }
    const auto r = evaluate_metrics(a, b);
    EXPECT_LE(r.mae, r.rmse * (1.0 + 1e-15));
    EXPECT_GE(r.mae, 0.0);
  }
}

TEST(Metrics, MaskedEntriesNeverChangeMape) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(1.0, 50.0), tiny(-9e-4, 9e-4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> y(20), p(20);
    for (std::size_t i = 0; i < 20; ++i) {
      y[i] = u(rng);
      p[i] = u(rng);
    }
    const double base = *evaluate_metrics(p, y).mape;
    for (int k = 0; k < 5; ++k) {
      y.push_back(tiny(rng));
      p.push_back(u(rng));
    }
    EXPECT_EQ(*evaluate_metrics(p, y).mape, base);
  }
}

TEST(Metrics, InputErrors) {
  const std::vector<double> a{1, 2}, b{1};
  EXPECT_THROW(evaluate_metrics(a, b), DimensionError);
  EXPECT_THROW(evaluate_metrics(std::vector<double>{}, std::vector<double>{}), ContractError);
}

// ---- early stopping ---------------------------------------------------------

TEST(EarlyStopping, Examples) {
  {
    EarlyStopping s(2);
    for (double v : {3.0, 2.0, 1.0}) EXPECT_FALSE(s.update(v));
  }
  {
    EarlyStopping s(2);
    EXPECT_FALSE(s.update(1.0));
    EXPECT_FALSE(s.update(1.0));
    EXPECT_TRUE(s.update(1.0));
  }
  {
    EarlyStopping s(5);
    s.update(1.0);
    s.update(1.0 - 1e-12);
    EXPECT_FALSE(s.improved());
    EXPECT_EQ(s.best(), 1.0);
    EXPECT_EQ(s.epochs_since_best(), 1u);
  }
  EXPECT_THROW(EarlyStopping(0), ConfigError);
}

// ---- training loop ----------------------------------------------------------

ForecastDataset small_dataset(std::size_t sensors = 3, std::size_t steps = 240, std::uint64_t seed = 0) {
  auto series = std::make_shared<RawSeries>(generate(two_phase_spec(sensors, steps, 0.0, seed)));
  return prepare_dataset(series, 6, 3, SplitRatio::parse("6:2:2"));
}

ModelConfig small_model(std::size_t sensors = 3) {
  ModelConfig c;
  c.num_sensors = sensors;
  c.input_steps = 6;
  c.horizon = 3;
  c.d_model = 8;
  c.heads = 2;
  c.layers = 1;
  c.seed = 5;
  return c;
}

TEST(Train, PatienceOneWithFlatMetricStopsAfterTwoEpochs) {
  const auto ds = small_dataset();
  TrainConfig tc;
  tc.epochs = 50;
  tc.patience = 1;
  tc.batch_size = 16;
  tc.val_metric_hook = [](std::size_t, double) { return 7.0; };
  const auto res = train(FptnModel(small_model()), ds, tc);
  EXPECT_EQ(res.history.size(), 2u);
  EXPECT_EQ(res.best_epoch, 1u);
}

TEST(Train, DeterministicHistoryForFixedSeed) {
  const auto ds = small_dataset();
  TrainConfig tc;
  tc.epochs = 4;
  tc.batch_size = 16;
  tc.seed = 11;
  const auto a = train(FptnModel(small_model()), ds, tc);
  const auto b = train(FptnModel(small_model()), ds, tc);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].train_loss, b.history[i].train_loss);
    EXPECT_EQ(a.history[i].val_mae, b.history[i].val_mae);
    EXPECT_EQ(a.history[i].val_rmse, b.history[i].val_rmse);
  }
  EXPECT_EQ(a.best_model.params().head_weight, b.best_model.params().head_weight);
}

TEST(Train, BestCheckpointHasMinimumValidationMae) {
  const auto ds = small_dataset();
  TrainConfig tc;
  tc.epochs = 12;
  tc.batch_size = 16;
  tc.lr = 5e-3;
  auto res = train(FptnModel(small_model()), ds, tc);
  double min_val = 1e300;
  for (const auto& r : res.history) min_val = std::min(min_val, r.val_mae);
  EXPECT_EQ(res.best_val_mae, min_val);
  const auto val = evaluate_split(res.best_model, ds.splits.val, TargetScale::normalized);
  EXPECT_NEAR(val.mae, min_val, 1e-12);
}

TEST(Train, LossDecreasesOnSyntheticData) {
  const auto ds = small_dataset();
  TrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 16;
  tc.lr = 5e-3;
  const auto res = train(FptnModel(small_model()), ds, tc);
  EXPECT_LT(res.history.back().train_loss, 0.5 * res.history.front().train_loss);
  EXPECT_FALSE(res.diverged);
}

TEST(Train, DivergenceReturnsLastGoodModel) {
  const auto ds = small_dataset();
  TrainConfig tc;
  tc.epochs = 5;
  tc.batch_size = 16;
  tc.lr = 1e200;
  FptnModel start(small_model());
  const auto res = train(start, ds, tc);
  EXPECT_TRUE(res.diverged);
  EXPECT_NE(res.stop_reason.find("diverged"), std::string::npos);
  for (const auto& p : const_cast<FptnModel&>(res.best_model).parameters()) EXPECT_TRUE(all_finite(*p.tensor));
}

TEST(Train, ConfigValidation) {
  TrainConfig tc;
  tc.patience = 0;
  EXPECT_THROW(tc.validate(), ConfigError);
  tc.patience = 1;
  tc.lr = 0.0;
  EXPECT_THROW(tc.validate(), ConfigError);
}

TEST(Train, ScaleChoiceKeepsConfigOrdering) {
  // Small-amplitude series so raw-unit targets are trainable at the same lr.
  auto spec = two_phase_spec(3, 480);
  for (auto& s : spec.sensors) s.amplitude = 2.0;
  auto series = std::make_shared<RawSeries>(generate(spec));
  const auto ds = prepare_dataset(series, 6, 3, SplitRatio::parse("6:2:2"));
  auto val_mae = [&](TargetScale scale, double lr) {
    TrainConfig tc;
    tc.epochs = 15;
    tc.batch_size = 16;
    tc.lr = lr;
    tc.target_scale = scale;
    return train(FptnModel(small_model()), ds, tc).best_val_mae;
  };
  const bool normalized_order = val_mae(TargetScale::normalized, 5e-3) < val_mae(TargetScale::normalized, 1e-5);
  const bool raw_order = val_mae(TargetScale::raw, 5e-3) < val_mae(TargetScale::raw, 1e-5);
  EXPECT_EQ(normalized_order, raw_order);
  EXPECT_TRUE(normalized_order);
}

TEST(Train, HistoryCsvColumns) {
  const auto path = std::filesystem::temp_directory_path() / "fptn_history_test.csv";
  write_history_csv({{1, 0.5, 2.0, 3.0, std::nullopt, 0.1}, {2, 0.4, 1.5, 2.5, 12.0, 0.1}}, path);
  std::ifstream in(path);
  std::string header, row1, row2;
  std::getline(in, header);
  std::getline(in, row1);
  std::getline(in, row2);
  EXPECT_EQ(header, "epoch,train_loss,val_mae,val_rmse,val_mape,seconds");
  EXPECT_EQ(row1.rfind("1,0.5,2,3,,", 0), 0u) << row1;
  EXPECT_EQ(row2.rfind("2,0.40000000000000002,1.5,2.5,12,", 0), 0u) << row2;
  std::filesystem::remove(path);
}

// ---- sweep ------------------------------------------------------------------

TEST(GridSearch, SingleCellAndInvalidCells) {
  const auto ds = small_dataset();
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 16;
  const auto one = grid_search(small_model(), {{8}, {1}, {2}, {1e-3}}, ds, tc);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].d_model, 8u);
  EXPECT_EQ(one[0].status, "ok");
  const auto mixed = grid_search(small_model(), {{8, 6}, {1}, {4}, {1e-3}}, ds, tc);
  ASSERT_EQ(mixed.size(), 2u);
  EXPECT_EQ(mixed[0].status, "ok");
  EXPECT_EQ(mixed[1].status, "invalid");  // d_model 6 does not exceed T = 6
  EXPECT_THROW(grid_search(small_model(), {{}, {1}, {2}, {1e-3}}, ds, tc), ConfigError);
}

TEST(GridSearch, ReferenceOptimumIsAnnotated) {
  EXPECT_EQ(reference::kOptimumDModel, 256u);
  EXPECT_EQ(reference::kOptimumLayers, 4u);
  EXPECT_EQ(reference::kOptimumHeads, 8u);
  const auto ds = small_dataset();
  TrainConfig tc;
  tc.epochs = 1;
  // d_model 256 with h = 8 and L = 4 is far too big to train here, so pair
  // it with an invalid T to exercise only the annotation.
  ModelConfig base = small_model();
  base.input_steps = 300;
  const auto rows = grid_search(base, {{256}, {4}, {8}, {1e-3}}, ds, tc);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_TRUE(rows[0].reference_optimum);
  EXPECT_EQ(rows[0].status, "invalid");
}

TEST(GridSearch, WiderModelFitsTrainingDataAtLeastAsWell) {
  // Post-norm layers cannot reduce to the identity, so only width is a strict superset.
  const auto ds = small_dataset(3, 160);
  TrainConfig tc;
  tc.epochs = 60;
  tc.batch_size = 16;
  tc.lr = 1e-3;
  tc.patience = 1000;
  const auto rows = grid_search(small_model(), {{8, 32}, {1}, {2}, {1e-3}}, ds, tc);
  ASSERT_EQ(rows.size(), 2u);
  const SweepRow& narrow = rows[0].d_model == 8 ? rows[0] : rows[1];
  const SweepRow& wide = rows[0].d_model == 32 ? rows[0] : rows[1];
  EXPECT_LE(wide.min_train_loss, narrow.min_train_loss);
}

// ---- reference constants ----------------------------------------------------

TEST(Reference, DatasetSummaries) {
  EXPECT_EQ(reference::find_dataset("PeMSD3")->sensors, 358u);
  EXPECT_EQ(reference::find_dataset("PeMSD3")->steps, 26208u);
  EXPECT_EQ(reference::find_dataset("PeMSD4")->sensors, 307u);
  EXPECT_EQ(reference::find_dataset("PeMSD4")->steps, 16992u);
  EXPECT_EQ(reference::find_dataset("PeMSD7")->sensors, 883u);
  EXPECT_EQ(reference::find_dataset("PeMSD7")->steps, 28224u);
  EXPECT_EQ(reference::find_dataset("PeMSD8")->sensors, 170u);
  EXPECT_EQ(reference::find_dataset("PeMSD8")->steps, 17856u);
  EXPECT_EQ(reference::find_dataset("METR-LA"), nullptr);
}

TEST(Reference, ForecastScores) {
  const auto* d4 = reference::find_score("PeMSD4");
  EXPECT_EQ(d4->mae, 18.49);
  EXPECT_EQ(d4->rmse, 30.29);
  EXPECT_EQ(d4->mape, 13.10);
  EXPECT_EQ(reference::find_score("PeMSD3")->mae, 14.62);
  EXPECT_EQ(reference::find_score("PeMSD7")->mape, 8.77);
  EXPECT_EQ(reference::find_score("PeMSD8")->rmse, 23.30);
}

TEST(Reference, AblationRows) {
  EXPECT_EQ(reference::kAblation.size(), 6u);
  const auto& full = reference::kAblation[5];
  EXPECT_TRUE(full.time_embedding);
  EXPECT_EQ(full.positional, "learnable");
  EXPECT_EQ(full.mae, 18.49);
  const auto& bare = reference::kAblation[0];
  EXPECT_FALSE(bare.time_embedding);
  EXPECT_EQ(bare.positional, "none");
  EXPECT_EQ(bare.mae, 22.59);
  for (const auto& row : reference::kAblation) EXPECT_LE(full.mae, row.mae);
}

}  // namespace
}  // namespace fptn
