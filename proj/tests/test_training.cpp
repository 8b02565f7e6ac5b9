#include "support.hpp"

using namespace dtmt;
using namespace testing_support;

namespace {

// Direct evaluation of the schedule formula.
double schedule_reference(double t, double lr0, double n, double p, double s, double e) {
  const double a = 1.0 + t * (n - 1.0) / (n * p);
  const double c = n * std::pow(2.0 * n, (s - n * t) / (e - s));
  return lr0 * std::min(std::min(a, n), c);
}

TrainConfig zh_en() {
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.warmup_steps = 500;
  c.decay_start = 8000;
  c.decay_end = 64000;
  c.replicas = 1;
  return c;
}

TrainConfig small_run(std::int64_t steps) {
  TrainConfig c;
  c.learning_rate = 3e-3;
  c.batch_tokens = 40;
  c.max_steps = steps;
  c.valid_interval = 10;
  c.log_interval = 5;
  c.seed = 3;
  return c;
}

std::vector<Tensor> grads_of(const ParamStore& ps) {
  std::vector<Tensor> out;
  for (const auto& p : ps) out.push_back(p->grad);
  return out;
}

}  // namespace

TEST(Schedule, SingleReplicaIsFlatBeforeDecay) {
  const TrainConfig c = zh_en();
  for (std::int64_t t : {0, 1, 499, 500, 4000, 7999}) EXPECT_EQ(lr_schedule(t, c), 1e-3) << t;
}

TEST(Schedule, SingleReplicaHalvesAtDecayEnd) {
  EXPECT_NEAR(lr_schedule(64000, zh_en()), 0.5e-3, 1e-18);
}

TEST(Schedule, TwoReplicasReachPlateauAfterWarmup) {
  TrainConfig c = zh_en();
  c.replicas = 2;
  // warmup term is 2 at t=1000; the decay term there is 2·4^(6000/56000) > 2
  EXPECT_GT(2.0 * std::pow(4.0, (8000.0 - 2000.0) / 56000.0), 2.0);
  EXPECT_NEAR(lr_schedule(1000, c), 2e-3, 1e-18);
  EXPECT_NEAR(lr_schedule(250, c), 1.25e-3, 1e-18);
}

TEST(Schedule, MatchesDirectEvaluationAtSampledSteps) {
  for (std::int64_t n : {1, 2, 4}) {
    TrainConfig c = zh_en();
    c.replicas = n;
    for (std::int64_t t = 0; t < 64000; t += 640) {
      EXPECT_NEAR(lr_schedule(t, c), schedule_reference(double(t), 1e-3, double(n), 500, 8000, 64000), 1e-12);
    }
  }
}

TEST(Schedule, ContinuousAndNonIncreasingAfterDecayStart) {
  const TrainConfig c = zh_en();
  double prev = lr_schedule(8000, c);
  for (std::int64_t t = 8001; t <= 80000; ++t) {
    const double lr = lr_schedule(t, c);
    EXPECT_LE(lr, prev);
    EXPECT_LT(prev - lr, 1e-7);
    prev = lr;
  }
}

TEST(TrainConfig, RejectsInvalidSettings) {
  auto expect_bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  expect_bad([](TrainConfig& c) { c.warmup_steps = 0; });
  expect_bad([](TrainConfig& c) { c.decay_start = c.decay_end; });
  expect_bad([](TrainConfig& c) { c.replicas = 0; });
  expect_bad([](TrainConfig& c) { c.batch_tokens = 0; });
  expect_bad([](TrainConfig& c) { c.valid_beam = 0; });
  TrainConfig ok;
  EXPECT_NO_THROW(ok.validate());
}

TEST(Adam, FirstStepMatchesHandFormula) {
  ParamStore ps;
  Parameter& p = ps.add("w", Shape{4});
  p.value = Tensor::vector({1.0, -2.0, 0.5, 0.0});
  p.grad = Tensor::vector({0.3, -4.0, 1e-7, 0.0});
  TrainConfig c;
  AdamState st = AdamState::for_params(ps);
  const double lr = 0.01;
  const Tensor before = p.value;
  const Tensor g = p.grad;
  adam_step(ps, st, lr, c);
  for (std::size_t i = 0; i < 4; ++i) {
    // m̂ = g, v̂ = g² after bias correction
    const double expect = before[i] - lr * g[i] / (std::abs(g[i]) + 1e-6);
    EXPECT_NEAR(p.value[i], expect, 1e-15);
    EXPECT_NEAR(st.m[0][i], 0.1 * g[i], 1e-15);
    EXPECT_NEAR(st.v[0][i], 0.001 * g[i] * g[i], 1e-15);
  }
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, SecondStepMatchesRecurrence) {
  ParamStore ps;
  Parameter& p = ps.add("w", Shape{1});
  p.value[0] = 0.7;
  TrainConfig c;
  AdamState st = AdamState::for_params(ps);
  double m = 0.0, v = 0.0, w = 0.7;
  const double grads[] = {0.5, -0.2, 0.05};
  for (int k = 1; k <= 3; ++k) {
    const double g = grads[k - 1];
    p.grad[0] = g;
    adam_step(ps, st, 1e-2, c);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    w -= 1e-2 * (m / (1 - std::pow(0.9, k))) / (std::sqrt(v / (1 - std::pow(0.999, k))) + 1e-6);
    EXPECT_NEAR(p.value[0], w, 1e-15);
  }
}

TEST(Adam, ZeroGradientsLeaveParametersAndDecayMoments) {
  ParamStore ps;
  Parameter& p = ps.add("w", Shape{3}, 0.25);
  TrainConfig c;
  AdamState st = AdamState::for_params(ps);
  st.m[0].fill(0.5);
  st.v[0].fill(0.0);
  st.step = 10;
  p.grad.fill(0.0);
  adam_step(ps, st, 0.1, c);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(st.m[0][i], 0.45, 1e-15);
  ps.find("w")->value.fill(0.25);
  st.m[0].fill(0.0);
  adam_step(ps, st, 0.1, c);
  for (double v : p.value.span()) EXPECT_EQ(v, 0.25);
}

TEST(Adam, NonFiniteGradientNamesTheTensor) {
  ParamStore ps;
  ps.add("first", Shape{2});
  Parameter& bad = ps.add("second.W", Shape{2});
  bad.grad[1] = std::numeric_limits<double>::quiet_NaN();
  AdamState st = AdamState::for_params(ps);
  try {
    adam_step(ps, st, 0.1, TrainConfig{});
    FAIL() << "expected a numeric error";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("second.W"), std::string::npos);
  }
}

TEST(Adam, IdenticalRunsAreBitIdentical) {
  auto run = [] {
    ParamStore ps;
    ps.add("w", Shape{5});
    init_params(ps, 9);
    AdamState st = AdamState::for_params(ps);
    Rng rng(2);
    for (int k = 0; k < 20; ++k) {
      for (auto& g : ps[0].grad.span()) g = rng.uniform(-1, 1);
      adam_step(ps, st, 0.01, TrainConfig{});
    }
    return ps[0].value;
  };
  EXPECT_TRUE(bitwise_equal(run(), run()));
}

TEST(Init, ValuesInRangeWithUnitGainsAndZeroBiases) {
  Model m(toy_model(10, 2));
  init_params(m.params(), 5);
  for (const auto& p : m.params()) {
    for (double v : p->value.span()) {
      if (is_layer_norm_gain(p->name)) {
        EXPECT_EQ(v, 1.0);
      } else if (is_layer_norm_bias(p->name)) {
        EXPECT_EQ(v, 0.0);
      } else {
        EXPECT_GE(v, -0.08);
        EXPECT_LE(v, 0.08);
      }
    }
  }
}

TEST(Init, SameSeedIsBitIdenticalAndSeedsDiffer) {
  Model a(toy_model(10)), b(toy_model(10)), c(toy_model(10));
  init_params(a.params(), 5);
  init_params(b.params(), 5);
  init_params(c.params(), 6);
  EXPECT_TRUE(tensors_bitwise_equal(a.params(), b.params()));
  EXPECT_FALSE(tensors_bitwise_equal(a.params(), c.params()));
}

TEST(Init, EmpiricalMomentsOfUniform) {
  ParamStore ps;
  ps.add("w", Shape{100000});
  init_params(ps, 1);
  double mean = 0.0, sq = 0.0;
  for (double v : ps[0].value.span()) {
    mean += v;
    sq += v * v;
  }
  mean /= 1e5;
  sq /= 1e5;
  EXPECT_LT(std::abs(mean), 0.002);
  EXPECT_NEAR(sq, 0.08 * 0.08 / 3.0, 1e-4);
}

TEST(Clipping, PreservesDirectionAndBoundsNorm) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    ParamStore ps;
    ps.add("a", Shape{3, 4});
    ps.add("b", Shape{7});
    Rng rng(seed);
    for (auto& p : ps)
      for (auto& g : p->grad.span()) g = rng.uniform(-10, 10);
    const auto before = grads_of(ps);
    const double norm = clip_grad_norm(ps, 5.0);
    EXPECT_GT(norm, 5.0);
    EXPECT_NEAR(global_grad_norm(ps), 5.0, 1e-12);
    for (std::size_t k = 0; k < ps.size(); ++k)
      for (std::size_t i = 0; i < before[k].size(); ++i) EXPECT_NEAR(ps[k].grad[i], before[k][i] * 5.0 / norm, 1e-14);
  }
}

TEST(Clipping, SmallGradientsAndDisabledClippingAreUntouched) {
  ParamStore ps;
  ps.add("a", Shape{2});
  ps[0].grad = Tensor::vector({0.3, 0.4});
  clip_grad_norm(ps, 5.0);
  EXPECT_EQ(ps[0].grad, Tensor::vector({0.3, 0.4}));
  ps[0].grad = Tensor::vector({30, 40});
  clip_grad_norm(ps, 0.0);
  EXPECT_EQ(ps[0].grad, Tensor::vector({30, 40}));
}

TEST(Batching, EveryExampleOnceWithinBudget) {
  const auto data = toy_task(TaskKind::copy, 8, 200);
  for (std::size_t budget : {1u, 20u, 64u, 500u}) {
    const auto batches = make_batches(data.train, budget);
    std::vector<int> seen(data.train.size(), 0);
    for (const auto& b : batches) {
      ASSERT_FALSE(b.empty());
      std::size_t tokens = 0;
      for (auto i : b) {
        ++seen[i];
        tokens += data.train[i].src.size() + data.train[i].tgt.size();
      }
      if (b.size() > 1) EXPECT_LE(tokens, budget);
    }
    for (int s : seen) EXPECT_EQ(s, 1);
  }
}

TEST(Batching, ScheduleVisitsEachBatchOncePerEpoch) {
  BatchSchedule a(7, 11), b(7, 11);
  std::vector<std::size_t> first;
  for (std::int64_t k = 0; k < 21; ++k) {
    const auto i = a.batch_at(k);
    EXPECT_EQ(i, b.batch_at(k));
    if (k < 7) first.push_back(i);
  }
  std::sort(first.begin(), first.end());
  for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(first[i], i);
  BatchSchedule c(7, 11);
  EXPECT_EQ(c.batch_at(15), a.batch_at(15));
}

TEST(BatchGradients, TokenWeightedMeanOfSentenceLosses) {
  const auto data = toy_task(TaskKind::copy, 6, 8);
  Model m(toy_model(10));
  init_params(m.params(), 2);
  const std::vector<std::size_t> batch = {0, 3, 5};
  const double loss = batch_gradients(m, data.train, batch, 0, 1);
  double expect = 0.0;
  std::size_t tokens = 0;
  for (auto i : batch) tokens += data.train[i].tgt.size();
  for (auto i : batch) {
    Graph g;
    const auto r = forward_teacher_forced(g, m, data.train[i].src, data.train[i].tgt, {});
    expect += r.loss.value().item() * double(data.train[i].tgt.size()) / double(tokens);
  }
  EXPECT_NEAR(loss, expect, 1e-12);
}

TEST(BatchGradients, IndependentOfThreadCount) {
  const auto data = toy_task(TaskKind::reverse, 6, 16);
  ModelConfig c = toy_model(10);
  c.dropout_candidate = 0.2;
  c.dropout_output = 0.3;
  Model m(c);
  init_params(m.params(), 4);
  std::vector<std::size_t> batch(10);
  std::iota(batch.begin(), batch.end(), 0);
  const double l1 = batch_gradients(m, data.train, batch, 7, 3, 1);
  const auto g1 = grads_of(m.params());
  m.params().zero_grad();
  const double l3 = batch_gradients(m, data.train, batch, 7, 3, 3);
  const auto g3 = grads_of(m.params());
  EXPECT_EQ(l1, l3);
  for (std::size_t k = 0; k < g1.size(); ++k) EXPECT_TRUE(bitwise_equal(g1[k], g3[k])) << m.params()[k].name;
}

TEST(Training, RepeatedBatchOverfitsCopyTask) {
  const auto data = toy_task(TaskKind::copy, 6, 4);
  ModelConfig c = toy_model(10, 1, 16, 2);
  c.label_smoothing = 0.0;
  Model m(c);
  init_params(m.params(), 1);
  TrainConfig tc;
  tc.learning_rate = 1e-2;
  AdamState st = AdamState::for_params(m.params());
  const std::vector<std::size_t> batch = {0, 1, 2, 3};
  double first = 0.0, last = 0.0;
  for (int k = 0; k < 200; ++k) {
    const double l = batch_gradients(m, data.train, batch, k, 1);
    if (k == 0) first = l;
    last = l;
    clip_grad_norm(m.params(), tc.clip_norm);
    adam_step(m.params(), st, tc.learning_rate, tc);
    m.params().zero_grad();
  }
  EXPECT_LT(last, 0.1 * first) << "first " << first << " last " << last;
}

TEST(Training, FrozenParametersStopAfterPatienceValidations) {
  const auto data = toy_task();
  Model m(toy_model(12));
  TrainConfig tc = small_run(1000);
  tc.learning_rate = 0.0;
  tc.patience = 2;
  const auto r = train_loop(m, data, tc);
  EXPECT_EQ(r.reason, StopReason::patience);
  EXPECT_EQ(r.validations, 2);
  EXPECT_EQ(r.steps, 20);
  EXPECT_EQ(r.final_metric, r.baseline_metric);
}

TEST(Training, TargetMetricStopsEarly) {
  const auto data = toy_task();
  Model m(toy_model(12));
  TrainConfig tc = small_run(1000);
  tc.target_metric = 1e-9;
  const auto r = train_loop(m, data, tc);
  EXPECT_EQ(r.reason, StopReason::target);
  EXPECT_EQ(r.steps, 10);
}

TEST(Training, ResumeReproducesUninterruptedRunBitForBit) {
  const auto data = toy_task(TaskKind::reverse);
  const std::string dir = temp_dir("resume");
  ModelConfig mc = toy_model(12);
  mc.dropout_candidate = 0.1;

  Model full(mc);
  const auto rf = train_loop(full, data, small_run(30), {dir + "/full.dtck", dir + "/full.tsv"});

  Model part(mc);
  train_loop(part, data, small_run(20), {dir + "/part.dtck", dir + "/part.tsv"});
  Model resumed(mc);
  const auto rr = train_loop(resumed, data, small_run(30), {dir + "/part.dtck", dir + "/part.tsv", true});

  EXPECT_TRUE(tensors_bitwise_equal(full.params(), resumed.params()));
  EXPECT_EQ(rr.steps, 30);
  EXPECT_EQ(rf.final_metric, rr.final_metric);
  EXPECT_EQ(read_file(dir + "/full.tsv"), read_file(dir + "/part.tsv"));
  EXPECT_EQ(read_file(dir + "/full.dtck.optim"), read_file(dir + "/part.dtck.optim"));
}

TEST(Training, MetricsFileIsDeterministicAndWellFormed) {
  const auto data = toy_task();
  const std::string dir = temp_dir("tsv");
  for (const char* name : {"a", "b"}) {
    Model m(toy_model(12));
    train_loop(m, data, small_run(20), {dir + "/" + name + ".dtck", dir + "/" + name + ".tsv"});
  }
  const std::string a = read_file(dir + "/a.tsv");
  EXPECT_EQ(a, read_file(dir + "/b.tsv"));
  EXPECT_EQ(read_file(dir + "/a.dtck"), read_file(dir + "/b.dtck"));
  std::istringstream in(a);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step\tlr\ttrain_loss\tval_metric");
  std::vector<std::string> steps;
  while (std::getline(in, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), '\t'), 3) << line;
    steps.push_back(line.substr(0, line.find('\t')));
  }
  EXPECT_EQ(steps, (std::vector<std::string>{"0", "5", "10", "15", "20"}));
  EXPECT_NE(a.find("0\t0.0030000000000000001\tNA\t"), std::string::npos);
}

TEST(Training, ThreadCountDoesNotChangeTheRun) {
  const auto data = toy_task(TaskKind::lexsub);
  Model a(toy_model(12)), b(toy_model(12));
  TrainConfig tc = small_run(20);
  const auto ra = train_loop(a, data, tc);
  tc.threads = 4;
  const auto rb = train_loop(b, data, tc);
  EXPECT_TRUE(tensors_bitwise_equal(a.params(), b.params()));
  EXPECT_EQ(ra.final_metric, rb.final_metric);
}

TEST(Training, NonFiniteLossAbortsAndKeepsLastCheckpoint) {
  const auto data = toy_task();
  const std::string dir = temp_dir("nonfinite");
  Model m(toy_model(12));
  TrainConfig tc = small_run(50);
  tc.learning_rate = 1e300;
  tc.clip_norm = 0.0;
  const std::string ckpt = dir + "/m.dtck";
  EXPECT_THROW(train_loop(m, data, tc, {ckpt, dir + "/m.tsv"}), NumericError);
  ASSERT_TRUE(std::filesystem::exists(ckpt));
  Model reloaded(toy_model(12));
  load_params(reloaded.params(), read_container(ckpt));
  for (const auto& p : reloaded.params()) EXPECT_TRUE(p->value.all_finite()) << p->name;
  Model fresh(toy_model(12));
  init_params(fresh.params(), tc.seed);
  EXPECT_TRUE(tensors_bitwise_equal(fresh.params(), reloaded.params()));
}

TEST(Training, EmptyCorporaAreDataErrors) {
  auto data = toy_task();
  Model m(toy_model(12));
  auto no_valid = data;
  no_valid.valid.clear();
  EXPECT_THROW(train_loop(m, no_valid, small_run(5)), DataError);
  data.train.clear();
  EXPECT_THROW(train_loop(m, data, small_run(5)), DataError);
}
