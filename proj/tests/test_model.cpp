#include "support.hpp"

using namespace dtmt;
using namespace testing_support;

namespace {

// Logits of a full teacher-forced pass computed with plain loops.
std::vector<oracle::Vec> oracle_logits(Model& m, const Sentence& src, const Sentence& tgt) {
  const ModelConfig& c = m.config();
  auto embed = [&](Parameter& table, TokenId id, std::size_t pos) {
    oracle::Vec e(c.emb_dim);
    const Tensor pe = positional_encoding(pos, c.emb_dim);
    for (std::size_t i = 0; i < c.emb_dim; ++i) e[i] = table.value.at(id, i) + (c.positional_encoding ? pe[i] : 0.0);
    return e;
  };
  std::vector<oracle::Vec> emb;
  for (std::size_t j = 0; j < src.size(); ++j) emb.push_back(embed(m.src_embedding(), src[j], j));
  const auto ann = oracle::encode(m.encoder_forward(), m.encoder_backward(), emb);
  oracle::Vec s(c.hidden_dim, 0.0);
  TokenId prev = Vocabulary::bos;
  std::vector<oracle::Vec> out;
  for (std::size_t t = 0; t < tgt.size(); ++t) {
    const auto y = embed(m.tgt_embedding(), prev, t);
    const auto st = oracle::decoder_step(m.query_transition(), m.decoder_transition(), m.attention(), y, s, ann.joined);
    s = st.state;
    oracle::Vec feat = st.state;
    feat.insert(feat.end(), st.context.begin(), st.context.end());
    feat.insert(feat.end(), y.begin(), y.end());
    auto hidden = oracle::vecmat(feat, m.readout_hidden().value);
    for (auto& v : hidden) v = std::tanh(v);
    out.push_back(oracle::vecmat(hidden, m.readout_output().value));
    prev = tgt[t];
  }
  return out;
}

double loss_of(Model& m, const Sentence& src, const Sentence& tgt, std::optional<double> eps = std::nullopt) {
  Graph g;
  g.set_grad_enabled(false);
  return forward_teacher_forced(g, m, src, tgt, {}, eps).loss.value().item();
}

}  // namespace

TEST(PositionalEncoding, PositionZero) {
  EXPECT_EQ(positional_encoding(0, 4), Tensor::vector({0.0, 0.5, 0.0, 0.5}));
}

TEST(PositionalEncoding, PositionOneWidthTwo) {
  const Tensor pe = positional_encoding(1, 2);
  EXPECT_NEAR(pe[0], std::sin(1.0) / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(pe[1], std::cos(1.0) / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(pe[0], 0.5950098395293859, 1e-15);
  EXPECT_NEAR(pe[1], 0.38205142437008976, 1e-15);
}

TEST(PositionalEncoding, BoundedByScale) {
  for (std::size_t d : {2u, 8u, 64u})
    for (std::size_t pos = 0; pos < 200; pos += 7) {
      const Tensor pe = positional_encoding(pos, d);
      for (double v : pe.span()) EXPECT_LE(std::abs(v), 1.0 / std::sqrt(double(d)) + 1e-15);
    }
}

TEST(PositionalEncoding, OddWidthIsAContractError) {
  EXPECT_THROW(positional_encoding(3, 5), ContractError);
}

TEST(Loss, UniformLogitsGiveLogV) {
  for (std::size_t V : {2u, 5u, 8u, 100u}) {
    for (double eps : {0.0, 0.1, 0.5}) {
      Graph g;
      EXPECT_NEAR(label_smoothed_loss(g.constant(Tensor(Shape{V})), 1, eps).value().item(), std::log(double(V)), 1e-12);
    }
  }
}

TEST(Loss, ZeroOutputLayerGivesLogVPerToken) {
  auto data = toy_task(TaskKind::copy, 4);
  Model m(toy_model(8));
  init_params(m.params(), 3);
  m.readout_output().value.fill(0.0);
  EXPECT_NEAR(loss_of(m, data.train[0].src, data.train[0].tgt), std::log(8.0), 1e-12);
  EXPECT_NEAR(std::log(8.0), 2.0794, 1e-4);
}

TEST(Loss, NoSmoothingIsPlainCrossEntropy) {
  Graph g;
  const Tensor logits = Tensor::vector({0.3, -1.0, 2.0, 0.5});
  Var l = label_smoothed_loss(g.constant(logits), 2, 0.0);
  const auto lsm = log_softmax_values(logits.span());
  EXPECT_EQ(l.value().item(), -lsm[2]);
}

TEST(Loss, ConcentratedLogitsDriveUnsmoothedLossToZero) {
  double prev = 1e9;
  for (double k : {1.0, 5.0, 10.0, 20.0, 40.0}) {
    Graph g;
    const double l = label_smoothed_loss(g.constant(Tensor::vector({k, 0, 0})), 0, 0.0).value().item();
    EXPECT_LT(l, prev);
    prev = l;
  }
  EXPECT_LT(prev, 1e-15);
}

TEST(Loss, FiveClassExampleMatchesDirectSummation) {
  Graph g;
  const double l = label_smoothed_loss(g.constant(Tensor::vector({2, 0, 0, 0, 0})), 0, 0.1).value().item();
  // log Z = log(e² + 4); q_gold = 0.92, q_other = 0.02
  const double lz = std::log(std::exp(2.0) + 4.0);
  const double expect = -(0.92 * (2.0 - lz) + 4 * 0.02 * (0.0 - lz));
  EXPECT_NEAR(l, expect, 1e-12);
  EXPECT_NEAR(l, oracle::smoothed_ce({2, 0, 0, 0, 0}, 0, 0.1), 1e-12);
}

TEST(Loss, PermutingClassesConsistentlyLeavesLossUnchanged) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    const Tensor logits = random_vector(rng, 7, 3.0);
    std::vector<std::size_t> perm(7);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    Tensor permuted(Shape{7});
    for (std::size_t i = 0; i < 7; ++i) permuted[perm[i]] = logits[i];
    const std::size_t gold = rng.below(7);
    Graph g;
    const double a = label_smoothed_loss(g.constant(logits), gold, 0.1).value().item();
    const double b = label_smoothed_loss(g.constant(permuted), perm[gold], 0.1).value().item();
    EXPECT_NEAR(a, b, 1e-13);
  }
}

TEST(Loss, ShiftingLogitsLeavesLossUnchanged) {
  Rng rng(3);
  const Tensor logits = random_vector(rng, 6);
  Graph g;
  const double a = label_smoothed_loss(g.constant(logits), 4, 0.1).value().item();
  const double b = label_smoothed_loss(shift(g.constant(logits), 17.0), 4, 0.1).value().item();
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(Loss, GoldOutOfRangeIsADataError) {
  Graph g;
  EXPECT_THROW(label_smoothed_loss(g.constant(Tensor(Shape{4})), 4, 0.1), DataError);
}

TEST(Forward, MatchesScalarOracleEndToEnd) {
  for (std::size_t depth : {0u, 1u, 2u}) {
    Model m(toy_model(9, depth));
    randomize(m.params(), depth + 1, 0.4);
    const Sentence src = {4, 5, 6, 7}, tgt = {8, 4, Vocabulary::eos};
    Graph g;
    const auto r = forward_teacher_forced(g, m, src, tgt, {});
    const auto ref = oracle_logits(m, src, tgt);
    ASSERT_EQ(r.logits.size(), ref.size());
    double loss = 0.0;
    for (std::size_t t = 0; t < ref.size(); ++t) {
      EXPECT_LE(max_diff(ref[t], r.logits[t].value()), 1e-12) << "depth " << depth << " t " << t;
      loss += oracle::smoothed_ce(ref[t], tgt[t], 0.1);
    }
    EXPECT_NEAR(r.loss.value().item(), loss / 3.0, 1e-12);
  }
}

TEST(Forward, TwoTokenLossMatchesHandComputation) {
  Model m(toy_model(6));
  randomize(m.params(), 42, 0.5);
  const Sentence src = {4, 5}, tgt = {5, Vocabulary::eos};
  const auto logits = oracle_logits(m, src, tgt);
  const double hand = 0.5 * (oracle::smoothed_ce(logits[0], 5, 0.1) + oracle::smoothed_ce(logits[1], 2, 0.1));
  EXPECT_NEAR(loss_of(m, src, tgt), hand, 1e-12);
}

TEST(Forward, PadPositionsAreMasked) {
  Model m(toy_model(8));
  randomize(m.params(), 4);
  const Sentence src = {4, 5, 6};
  const Sentence tgt = {4, Vocabulary::pad, Vocabulary::eos};
  const auto logits = oracle_logits(m, src, tgt);
  const double expect = 0.5 * (oracle::smoothed_ce(logits[0], 4, 0.1) + oracle::smoothed_ce(logits[2], 2, 0.1));
  EXPECT_NEAR(loss_of(m, src, tgt), expect, 1e-12);
}

TEST(Forward, InvalidInputs) {
  Model m(toy_model(8));
  EXPECT_THROW(loss_of(m, {4, 5}, {4, 5}), ContractError);
  EXPECT_THROW(loss_of(m, {}, {Vocabulary::eos}), ContractError);
  EXPECT_THROW(loss_of(m, {4, 8}, {Vocabulary::eos}), DataError);
  EXPECT_THROW(loss_of(m, {4}, {9, Vocabulary::eos}), DataError);
}

TEST(Forward, TrainAndEvalAgreeWithoutDropoutOrLayerNorm) {
  ModelConfig c = toy_model(8);
  c.layer_norm = false;
  Model m(c);
  init_params(m.params(), 5, 0.3);
  Rng rng(1);
  Graph g1, g2;
  const Sentence src = {4, 5, 6}, tgt = {6, 5, 4, Vocabulary::eos};
  const double eval = forward_teacher_forced(g1, m, src, tgt, {}).loss.value().item();
  const double train = forward_teacher_forced(g2, m, src, tgt, {Mode::train, &rng}).loss.value().item();
  EXPECT_EQ(eval, train);
}

TEST(Forward, OutputNetworkGradientCheck) {
  Model m(toy_model(7));
  randomize(m.params(), 8, 0.5);
  Rng rng(8);
  const auto errs = check_gradients(
      [&](Graph& g, const std::vector<Var>& v) { return label_smoothed_loss(output_network(g, m, v[0], v[1], v[2], {}), 3, 0.1); },
      {random_vector(rng, 8), random_vector(rng, 16), random_vector(rng, 8)}, 1e-5);
  for (double e : errs) EXPECT_LT(e, 1e-4);
}

TEST(Forward, ZeroReadoutGivesZeroLogits) {
  Model m(toy_model(7));
  Graph g;
  Rng rng(1);
  Var logits = output_network(g, m, g.constant(random_vector(rng, 8)), g.constant(random_vector(rng, 16)),
                              g.constant(random_vector(rng, 8)), {});
  for (double v : logits.value().span()) EXPECT_EQ(v, 0.0);
}

TEST(ModelParams, EnumerationMatchesClosedForm) {
  for (std::size_t depth = 0; depth <= 3; ++depth) {
    for (bool ln : {false, true}) {
      for (bool share : {false, true}) {
        ModelConfig c = toy_model(11, depth, 6, 3);
        c.emb_dim = 4;
        c.layer_norm = ln;
        c.share_embeddings = share;
        Model m(c);
        std::size_t enumerated = 0;
        for (const auto& p : m.params()) enumerated += p->value.size();
        EXPECT_EQ(enumerated, count_model_params(c));
        EXPECT_EQ(param_breakdown(m).total, enumerated);
      }
    }
  }
}

TEST(ModelParams, ComponentBreakdownFollowsConstructionOrder) {
  Model m(toy_model(10, 1));
  const auto b = param_breakdown(m);
  std::vector<std::string> names;
  for (const auto& [n, c] : b.components) names.push_back(n);
  const std::vector<std::string> expect = {"embedding.src", "embedding.tgt", "encoder.fwd",        "encoder.bwd",
                                           "decoder.query", "attention",     "decoder.transition", "output"};
  EXPECT_EQ(names, expect);
}

TEST(ModelConfig, Validation) {
  ModelConfig c = toy_model(8);
  c.label_smoothing = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_model(8);
  c.dropout_output = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_model(8);
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_model(4);
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_model(8);
  c.emb_dim = 7;
  EXPECT_THROW(c.validate(), ConfigError);
  c.positional_encoding = false;
  EXPECT_NO_THROW(c.validate());
}

TEST(Training, RepeatedBatchLossDecreasesMonotonicallyOver50Steps) {
  const auto data = toy_task(TaskKind::copy, 6, 8);
  Model m(toy_model(10));
  init_params(m.params(), 1);
  TrainConfig tc;
  tc.learning_rate = 3e-3;
  AdamState st = AdamState::for_params(m.params());
  const std::vector<Example> batch(data.train.begin(), data.train.begin() + 4);
  auto total_loss = [&] {
    double l = 0.0;
    for (const auto& ex : batch) l += loss_of(m, ex.src, ex.tgt);
    return l;
  };
  double prev = total_loss();
  for (int step = 0; step < 50; ++step) {
    {
      Graph g;
      g.backward(batch_loss(g, m, batch));
    }
    adam_step(m.params(), st, tc.learning_rate, tc);
    m.params().zero_grad();
    const double now = total_loss();
    EXPECT_LT(now, prev) << "step " << step;
    prev = now;
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const std::string dir = temp_dir("ckpt");
  Model a(toy_model(9, 2));
  init_params(a.params(), 17);
  const auto vocab = toy_task().src_vocab;
  save_checkpoint(dir + "/m.dtck", a.params(), vocab, vocab);
  Model b(toy_model(9, 2));
  const auto ts = read_container(dir + "/m.dtck");
  check_vocab_hashes(ts, vocab, vocab);
  load_params(b.params(), ts);
  EXPECT_TRUE(tensors_bitwise_equal(a.params(), b.params()));
  EXPECT_EQ(read_file(dir + "/m.dtck").substr(0, 4), "DTCK");
}

TEST(Checkpoint, VocabularyMismatchNamesBothHashes) {
  const std::string dir = temp_dir("ckpt-vocab");
  Model a(toy_model(9));
  const auto v1 = Vocabulary::from_tokens({"a", "b", "c", "d", "e"});
  const auto v2 = Vocabulary::from_tokens({"a", "b", "c", "d", "f"});
  save_checkpoint(dir + "/m.dtck", a.params(), v1, v1);
  const auto ts = read_container(dir + "/m.dtck");
  try {
    check_vocab_hashes(ts, v2, v1);
    FAIL() << "expected a data error";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(hex64(v1.hash())), std::string::npos) << msg;
    EXPECT_NE(msg.find(hex64(v2.hash())), std::string::npos) << msg;
  }
}

TEST(Checkpoint, ShapeMismatchIsADataError) {
  const std::string dir = temp_dir("ckpt-shape");
  Model a(toy_model(9, 1, 8));
  const auto v = toy_task().src_vocab;
  save_checkpoint(dir + "/m.dtck", a.params(), v, v);
  Model b(toy_model(9, 1, 6));
  EXPECT_THROW(load_params(b.params(), read_container(dir + "/m.dtck")), DataError);
}

TEST(Checkpoint, TruncatedFileIsADataError) {
  const std::string dir = temp_dir("ckpt-trunc");
  Model a(toy_model(9));
  const auto v = toy_task().src_vocab;
  save_checkpoint(dir + "/m.dtck", a.params(), v, v);
  const std::string bytes = read_file(dir + "/m.dtck");
  EXPECT_THROW(decode_container(bytes.substr(0, bytes.size() / 2)), DataError);
  EXPECT_THROW(decode_container("XXXX" + bytes.substr(4)), DataError);
}

TEST(Vocab, ReservedIdsAndRoundTrip) {
  const auto v = Vocabulary::from_tokens({"x", "y"});
  EXPECT_EQ(v.size(), 6u);
  EXPECT_EQ(v.id("<pad>"), 0u);
  EXPECT_EQ(v.id("<s>"), 1u);
  EXPECT_EQ(v.id("</s>"), 2u);
  EXPECT_EQ(v.id("<unk>"), 3u);
  EXPECT_EQ(v.encode("x y zz"), (Sentence{4, 5, Vocabulary::unk}));
  EXPECT_EQ(v.decode({5, 4}), "y x");
  const std::string dir = temp_dir("vocab");
  v.save(dir + "/v.txt");
  EXPECT_EQ(Vocabulary::load(dir + "/v.txt").hash(), v.hash());
}
