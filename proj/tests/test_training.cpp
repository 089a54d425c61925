#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "selfablate/selfablate.hpp"

using namespace selfablate;

namespace {

std::filesystem::path temp_file(const std::string& name, const std::string& contents) {
  auto dir = std::filesystem::temp_directory_path() / "selfablate_training_tests";
  std::filesystem::create_directories(dir);
  const auto p = dir / name;
  std::ofstream(p, std::ios::binary) << contents;
  return p;
}

ModelConfig desk_model(AblationMode mode) {
  ModelConfig c;
  c.d_model = 64;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_mlp = 256;
  c.max_pos = 64;
  c.ablation_mode = mode;
  c.seed = 7;
  return c;
}

ModelConfig tiny_model(AblationMode mode) {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_mlp = 64;
  c.max_pos = 16;
  c.ablation_mode = mode;
  c.k_attn = 1;
  c.k_mlp = 4;
  c.seed = 11;
  return c;
}

TrainConfig tiny_train(std::size_t steps) {
  TrainConfig t;
  t.total_steps = steps;
  t.batch_size = 4;
  t.seq_len = 16;
  t.seed = 5;
  t.eval_interval = 5;
  t.eval_batches = 2;
  return t;
}

const std::vector<std::string>& small_corpus() {
  static const auto docs = synthesize_stories(20'000, 3);
  return docs;
}

std::vector<float> flat_values(const Transformer<float>& m, bool gates) {
  std::vector<float> out;
  for (const auto& [name, t] : m.parameters()) {
    if (is_gate_parameter(name) == gates) out.insert(out.end(), t.data().begin(), t.data().end());
  }
  return out;
}

}  // namespace

TEST(LoadCorpus, PlainTextSplitsOnBlankLines) {
  EXPECT_EQ(load_corpus(temp_file("a.txt", "a\n\nb").string()), (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(load_corpus(temp_file("b.txt", "one\ntwo\n\n\nthree\n\n\n\n").string()),
            (std::vector<std::string>{"one\ntwo", "three"}));
}

TEST(LoadCorpus, JsonlReadsTextField) {
  EXPECT_EQ(load_corpus(temp_file("c.jsonl", "{\"text\":\"hi\"}\n{\"text\":\"yo\"}").string()),
            (std::vector<std::string>{"hi", "yo"}));
  EXPECT_EQ(load_corpus(temp_file("d.jsonl", "{\"text\":\"\"}\n{\"text\":\"x\"}\n\n").string()),
            (std::vector<std::string>{"x"}));
}

TEST(LoadCorpus, Errors) {
  try {
    load_corpus(temp_file("e.jsonl", "{\"text\":\"ok\"}\n{not json\n").string());
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_corpus("/nonexistent/corpus.txt"), Error);
}

TEST(Tokenizer, RoundTripsArbitraryBytes) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    std::string s(rng() % 64, '\0');
    for (auto& c : s) c = static_cast<char>(rng() & 0xFF);
    const auto ids = ByteTokenizer::encode(s);
    EXPECT_EQ(ids.size(), s.size());
    for (auto id : ids) EXPECT_LT(id, ByteTokenizer::kEos);
    EXPECT_EQ(ByteTokenizer::decode(ids), s);
  }
  EXPECT_EQ(ByteTokenizer::decode(ByteTokenizer::encode("naïve ✓")), "naïve ✓");
}

TEST(BatchStream, WindowsTargetsAndDeterminism) {
  const std::size_t seq = 8;
  const std::vector<std::string> docs = {std::string(2 * seq + 1, 'q')};  // + EOS = 2 * (seq + 1) tokens
  const BatchStream s(docs, seq, 1, 0);
  EXPECT_EQ(s.window_count(), 2u);

  const BatchStream a(small_corpus(), 16, 4, 9), b(small_corpus(), 16, 4, 9), c(small_corpus(), 16, 4, 10);
  bool differs = false;
  for (std::size_t step = 0; step < 5; ++step) {
    const auto ba = a.batch(step);
    EXPECT_EQ(ba.input.ids, b.batch(step).input.ids);
    differs |= ba.input.ids != c.batch(step).input.ids;
    for (std::size_t r = 0; r < 4; ++r) {
      for (std::size_t t = 0; t + 1 < 16; ++t) EXPECT_EQ(ba.targets[r * 16 + t], ba.input.ids[r * 16 + t + 1]);
    }
  }
  EXPECT_TRUE(differs);
  EXPECT_THROW(BatchStream({"short"}, 16, 1, 0), Error);
}

TEST(CombinedLoss, Examples) {
  const std::size_t V = 257;
  const std::vector<std::int32_t> targets = {3, 200};
  const Tensor<float> uniform = Tensor<float>::zeros({1, 2, V});
  EXPECT_NEAR(combined_loss(uniform, uniform, targets).total.item(), 2 * std::log(257.0), 1e-5);
  EXPECT_NEAR(2 * std::log(257.0), 11.098, 1e-3);

  std::vector<float> peaked(2 * V, -30.0f);
  peaked[3] = 30.0f;
  peaked[V + 200] = 30.0f;
  const Tensor<float> perfect({1, 2, V}, peaked);
  EXPECT_NEAR(combined_loss(perfect, perfect, targets).total.item(), 0.0, 1e-6);

  std::mt19937_64 rng(2);
  std::normal_distribution<float> n;
  std::vector<float> v(2 * V);
  for (auto& x : v) x = n(rng);
  const Tensor<float> logits({1, 2, V}, v);
  const auto l = combined_loss(logits, logits, targets);
  EXPECT_EQ(l.total.item(), 2 * l.clean);
  EXPECT_EQ(l.clean, cross_entropy(logits, targets).item());
  EXPECT_THROW(combined_loss(logits, Tensor<float>::zeros({1, 1, V}), targets), ShapeError);
}

TEST(CosineLr, Examples) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 1e-3), 1e-3);
  EXPECT_NEAR(cosine_lr(100, 100, 1e-3, 1e-5), 1e-5, 1e-18);
  EXPECT_NEAR(cosine_lr(50, 100, 1e-3, 1e-5), (1e-3 + 1e-5) / 2, 1e-15);
  for (std::size_t s = 1; s <= 100; ++s) EXPECT_LE(cosine_lr(s, 100, 1e-3), cosine_lr(s - 1, 100, 1e-3));
}

TEST(AdamW, BiasCorrectedFirstStep) {
  std::vector<Tensor<float>> p = {Tensor<float>({1}, {1.0f}, true)};
  p[0].mutable_grad()[0] = 1.0f;
  auto st = AdamState<float>::for_params(p);
  adamw_step(p, st, 0.1, {0.9, 0.999, 1e-8, 0.0});
  EXPECT_NEAR(p[0].item(), 0.9, 1e-6);
  EXPECT_EQ(st.step, 1u);
}

TEST(AdamW, ZeroGradientLeavesParamsUnchanged) {
  std::vector<Tensor<float>> p = {Tensor<float>({3}, {1.0f, -2.0f, 0.5f}, true)};
  p[0].mutable_grad();  // zero-filled
  auto st = AdamState<float>::for_params(p);
  for (int i = 0; i < 3; ++i) adamw_step(p, st, 0.1, {});
  EXPECT_EQ(p[0].values(), (std::vector<float>{1.0f, -2.0f, 0.5f}));
}

TEST(AdamW, NonFiniteGradientAbortsStep) {
  std::vector<Tensor<float>> p = {Tensor<float>({2}, {1.0f, 2.0f}, true)};
  p[0].mutable_grad()[1] = std::numeric_limits<float>::quiet_NaN();
  auto st = AdamState<float>::for_params(p);
  EXPECT_THROW(adamw_step(p, st, 0.1, {}), NonFiniteError);
  EXPECT_EQ(p[0].values(), (std::vector<float>{1.0f, 2.0f}));
  EXPECT_EQ(st.step, 0u);
}

TEST(GradClip, GlobalNormTwoIsHalved) {
  std::vector<Tensor<float>> p = {Tensor<float>({2}, {0, 0}, true), Tensor<float>({1}, {0}, true)};
  p[0].mutable_grad()[0] = 1.2f;
  p[0].mutable_grad()[1] = 1.6f;
  p[1].mutable_grad()[0] = 0.0f;
  EXPECT_NEAR(clip_grad_norm(p, 1.0), 2.0, 1e-6);
  EXPECT_NEAR(p[0].grad()[0], 0.6f, 1e-6);
  EXPECT_NEAR(p[0].grad()[1], 0.8f, 1e-6);
  EXPECT_NEAR(grad_global_norm(p), 1.0, 1e-6);

  p[0].mutable_grad()[0] = 0.3f;
  p[0].mutable_grad()[1] = 0.4f;
  clip_grad_norm(p, 1.0);  // below the threshold: untouched
  EXPECT_FLOAT_EQ(p[0].grad()[0], 0.3f);
}

TEST(Perplexity, UniformModelGivesVocabularySize) {
  ModelConfig c = tiny_model(AblationMode::none);
  Transformer<float> m(c);
  for (auto& v : const_cast<Tensor<float>&>(m.param("wte")).values()) v = 0.0f;
  const auto batches = BatchStream(small_corpus(), 16, 4, 0).sequential_batches(3);
  EXPECT_NEAR(evaluate_perplexity(m, batches), 257.0, 1e-3);
}

TEST(Perplexity, IsExpOfMeanCleanCrossEntropyAndDeterministic) {
  const Transformer<float> m(tiny_model(AblationMode::local));
  const auto batches = BatchStream(small_corpus(), 16, 4, 0).sequential_batches(3);
  const double ppl = evaluate_perplexity(m, batches);
  EXPECT_EQ(ppl, std::exp(mean_token_ce(m, batches)));
  EXPECT_EQ(ppl, evaluate_perplexity(m, batches));
  EXPECT_THROW(mean_token_ce(m, {}), Error);
}

TEST(RunConfig, ParsesAndRejectsBadKeys) {
  const json good = {{"model", {{"d_model", 32}, {"n_layers", 1}, {"n_heads", 2}, {"max_pos", 32}}},
                     {"train", {{"seq_len", 16}}},
                     {"paths", {{"train_data", "x.txt"}}}};
  const auto rc = run_config_from_json(good);
  EXPECT_EQ(rc.model.d_mlp, 128u);
  EXPECT_EQ(rc.model.vocab_size, 257u);
  EXPECT_EQ(rc.train.lr, 1.4e-3);

  auto bad = good;
  bad["model"]["colour"] = 1;
  EXPECT_THROW(run_config_from_json(bad), ConfigError);
  bad = good;
  bad["extra"] = json::object();
  EXPECT_THROW(run_config_from_json(bad), ConfigError);
  bad = good;
  bad["model"].erase("d_model");
  try {
    run_config_from_json(bad);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("model.d_model"), std::string::npos) << e.what();
  }
  bad = good;
  bad["train"]["seq_len"] = 64;  // > max_pos
  EXPECT_THROW(run_config_from_json(bad), ConfigError);
  bad = good;
  bad["train"]["lr"] = -1;
  EXPECT_THROW(run_config_from_json(bad), ConfigError);
}

TEST(Trainer, TwoHundredStepsCutLossByThirtyPercent) {
  const auto docs = synthesize_stories(100'000, 21);
  TrainConfig t;
  t.total_steps = 200;
  t.batch_size = 8;
  t.seq_len = 64;
  t.seed = 1;
  t.eval_interval = 200;
  t.eval_batches = 1;
  Trainer trainer(desk_model(AblationMode::none), t, docs, {});
  std::vector<double> losses;
  trainer.run({}, [&](const StepResult& r) {
    ASSERT_TRUE(std::isfinite(r.loss));
    EXPECT_LE(r.clipped_grad_norm, t.grad_clip + 1e-6);
    losses.push_back(r.loss_clean);
  });
  ASSERT_EQ(losses.size(), 200u);
  const double first = losses.front();
  double last = 0;
  for (std::size_t i = 190; i < 200; ++i) last += losses[i] / 10;
  EXPECT_LE(last, 0.7 * first) << "initial " << first << ", final " << last;
}

TEST(Trainer, ModeNoneMatchesPlainTransformerLoop) {
  const auto cfg = tiny_model(AblationMode::none);
  const auto tc = tiny_train(6);
  Trainer trainer(cfg, tc, small_corpus(), {});

  Transformer<float> ref(cfg);
  std::vector<Tensor<float>> params;
  for (const auto& [_, p] : ref.parameters()) params.push_back(p);
  auto state = AdamState<float>::for_params(params);
  const BatchStream stream(small_corpus(), tc.seq_len, tc.batch_size, tc.seed);

  for (std::size_t s = 0; s < tc.total_steps; ++s) {
    const auto r = trainer.step();
    EXPECT_EQ(r.loss, 2 * r.loss_clean);
    EXPECT_EQ(r.loss_clean, r.loss_ablated);

    Tape<float>::current().clear();
    ref.zero_grad();
    const auto b = stream.batch(s);
    const Tensor<float> loss = scale(cross_entropy(ref.forward_clean(b.input), b.targets), 2.0f);
    backward(loss);
    clip_grad_norm(params, tc.grad_clip);
    adamw_step(params, state, cosine_lr(s, tc.total_steps, tc.lr), {tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay});
    EXPECT_EQ(r.loss, loss.item()) << "step " << s;
  }
}

TEST(Trainer, DeterministicAcrossRuns) {
  for (auto mode : {AblationMode::none, AblationMode::local, AblationMode::global}) {
    auto run = [&] {
      Trainer t(tiny_model(mode), tiny_train(5), small_corpus(), {});
      std::vector<double> l;
      while (!t.done()) l.push_back(t.step().loss);
      return l;
    };
    EXPECT_EQ(run(), run()) << to_string(mode);
  }
}

TEST(Trainer, ResumeReproducesNextStepExactly) {
  for (auto mode : {AblationMode::local, AblationMode::global}) {
    const auto tc = tiny_train(10);
    Trainer full(tiny_model(mode), tc, small_corpus(), {});
    std::vector<double> losses;
    while (!full.done()) losses.push_back(full.step().loss);

    Trainer first(tiny_model(mode), tc, small_corpus(), {});
    for (int i = 0; i < 4; ++i) first.step();
    const auto path = temp_file("resume.sabt", "");
    save_checkpoint(path.string(), first.checkpoint());

    Trainer resumed(load_checkpoint(path.string()), tc, small_corpus(), {});
    EXPECT_EQ(resumed.current_step(), 4u);
    for (std::size_t s = 4; s < 10; ++s) EXPECT_EQ(resumed.step().loss, losses[s]) << to_string(mode) << " step " << s;
    EXPECT_TRUE(resumed.done());
    EXPECT_THROW(resumed.step(), Error);
  }
}

TEST(Trainer, GateAndBaseParametersBothChange) {
  for (auto mode : {AblationMode::local, AblationMode::global}) {
    Trainer t(tiny_model(mode), tiny_train(3), small_corpus(), {});
    const auto base0 = flat_values(t.model(), false);
    const auto gate0 = flat_values(t.model(), true);
    ASSERT_FALSE(gate0.empty());
    while (!t.done()) t.step();
    EXPECT_NE(flat_values(t.model(), false), base0) << to_string(mode);
    EXPECT_NE(flat_values(t.model(), true), gate0) << to_string(mode);
  }
}

TEST(Trainer, MetricsEveryEvalIntervalAndAtEnd) {
  auto tc = tiny_train(12);
  tc.eval_interval = 5;
  Trainer t(tiny_model(AblationMode::local), tc, small_corpus(), {});
  std::vector<std::size_t> steps;
  t.run([&](const MetricsRecord& m) {
    steps.push_back(m.step);
    EXPECT_GT(m.ppl, 1.0);
    const json j = m.to_json();
    for (const char* key : {"step", "lr", "loss_clean", "loss_ablated", "ppl"}) EXPECT_TRUE(j.contains(key)) << key;
  });
  EXPECT_EQ(steps, (std::vector<std::size_t>{5, 10, 12}));
}
