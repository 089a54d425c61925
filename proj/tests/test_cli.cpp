#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
  json result() const { return json::parse(out); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path work_dir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "selfablate_cli_tests";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

RunResult run_cli(const std::string& args) {
  const auto out = work_dir() / "stdout.txt", err = work_dir() / "stderr.txt";
  const std::string cmd = std::string("\"") + SELFABLATE_CLI_PATH + "\" " + args + " >\"" + out.string() + "\" 2>\"" +
                          err.string() + "\"";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

json tiny_config(const fs::path& data) {
  return {{"model",
           {{"d_model", 16}, {"n_layers", 2}, {"n_heads", 2}, {"max_pos", 32}, {"ablation_mode", "local"},
            {"k_attn", 1}, {"k_mlp", 8}, {"seed", 3}}},
          {"train",
           {{"total_steps", 6}, {"batch_size", 4}, {"seq_len", 32}, {"eval_interval", 3}, {"eval_batches", 2},
            {"checkpoint_interval", 3}, {"seed", 1}}},
          {"paths", {{"train_data", data.string()}}}};
}

fs::path write_json(const std::string& name, const json& j) {
  const auto p = work_dir() / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

/// Shared corpus, written once through the CLI itself.
const fs::path& corpus() {
  static const fs::path p = [] {
    const auto path = work_dir() / "corpus.txt";
    const auto r = run_cli("gen-corpus --bytes 30000 --seed 4 --out \"" + path.string() + "\"");
    EXPECT_EQ(r.code, 0) << r.err;
    return path;
  }();
  return p;
}

std::vector<json> read_jsonl(const fs::path& p) {
  std::vector<json> rows;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) rows.push_back(json::parse(line));
  }
  return rows;
}

/// Trained once; later tests reuse its outputs.
const fs::path& trained_run() {
  static const fs::path dir = [] {
    const auto d = work_dir() / "run";
    const auto cfg = write_json("tiny.json", tiny_config(corpus()));
    const auto r = run_cli("train --config \"" + cfg.string() + "\" --out \"" + d.string() + "\"");
    EXPECT_EQ(r.code, 0) << r.err;
    return d;
  }();
  return dir;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

}  // namespace

TEST(CliTrain, MissingKeyIsConfigError) {
  auto cfg = tiny_config(corpus());
  cfg["model"].erase("d_model");
  const auto r = run_cli("train --config " + q(write_json("missing.json", cfg)) + " --out " + q(work_dir() / "x"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("model.d_model"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(work_dir() / "x" / "final.sabt"));
}

TEST(CliTrain, UnknownKeyAndBadValuesAreConfigErrors) {
  auto cfg = tiny_config(corpus());
  cfg["train"]["learning_rate"] = 0.1;
  auto r = run_cli("train --config " + q(write_json("unknown.json", cfg)) + " --out " + q(work_dir() / "y"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("learning_rate"), std::string::npos) << r.err;

  cfg = tiny_config(corpus());
  cfg["model"]["ablation_mode"] = "sideways";
  r = run_cli("train --config " + q(write_json("mode.json", cfg)) + " --out " + q(work_dir() / "y"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("ablation_mode"), std::string::npos) << r.err;
}

TEST(CliTrain, WritesCheckpointsMetricsAndManifest) {
  const auto& d = trained_run();
  EXPECT_TRUE(fs::exists(d / "final.sabt"));
  EXPECT_TRUE(fs::exists(d / "step_3.sabt"));
  const auto rows = read_jsonl(d / "metrics.jsonl");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0]["step"], 3);
  EXPECT_EQ(rows[1]["step"], 6);
  for (const auto& row : rows) {
    for (const char* key : {"lr", "loss_clean", "loss_ablated", "ppl"}) EXPECT_TRUE(row.contains(key)) << key;
  }
  const auto manifest = json::parse(slurp(d / "manifest.json"));
  EXPECT_EQ(manifest["config"]["model"]["d_model"], 16);
  EXPECT_TRUE(manifest.contains("version"));
  EXPECT_TRUE(manifest["inputs"]["train_data"].contains("hash"));
}

TEST(CliTrain, ResumeContinuesStepCounter) {
  const auto& d = trained_run();
  const auto resumed = work_dir() / "resumed";
  const auto r = run_cli("train --config " + q(work_dir() / "tiny.json") + " --out " + q(resumed) + " --resume " +
                         q(d / "step_3.sabt"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = read_jsonl(resumed / "metrics.jsonl");
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0]["step"], 6);
  EXPECT_EQ(r.result()["step"], 6);
  EXPECT_EQ(slurp(resumed / "final.sabt"), slurp(d / "final.sabt"));

  auto other = tiny_config(corpus());
  other["model"]["d_model"] = 32;
  const auto bad = run_cli("train --config " + q(write_json("other.json", other)) + " --out " + q(work_dir() / "z") +
                           " --resume " + q(d / "step_3.sabt"));
  EXPECT_EQ(bad.code, 2);
}

TEST(CliExport, ExportThenEvalMatchesOriginal) {
  const auto& d = trained_run();
  const auto exported = work_dir() / "exported.sabt";
  const auto ex = run_cli("export --ckpt " + q(d / "final.sabt") + " --out " + q(exported));
  ASSERT_EQ(ex.code, 0) << ex.err;
  EXPECT_EQ(ex.result()["parameters_out"], ex.result()["baseline_parameters"]);
  EXPECT_LT(ex.result()["parameters_out"].get<std::size_t>(), ex.result()["parameters_in"].get<std::size_t>());

  const auto a = run_cli("eval --ckpt " + q(d / "final.sabt") + " --data " + q(corpus()));
  const auto b = run_cli("eval --ckpt " + q(exported) + " --data " + q(corpus()));
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_NEAR(a.result()["ppl"].get<double>(), b.result()["ppl"].get<double>(), 1e-6);
  EXPECT_EQ(a.result()["tokens"], b.result()["tokens"]);
}

TEST(CliIoi, GenerationIsByteIdentical) {
  const auto a = work_dir() / "ioi_a.jsonl", b = work_dir() / "ioi_b.jsonl";
  ASSERT_EQ(run_cli("ioi-gen --n 8 --seed 7 --out " + q(a)).code, 0);
  ASSERT_EQ(run_cli("ioi-gen --n 8 --seed 7 --out " + q(b)).code, 0);
  EXPECT_EQ(slurp(a), slurp(b));
  EXPECT_EQ(read_jsonl(a).size(), 8u);
}

TEST(CliCircuit, EmitsTauAndEdgeCount) {
  const auto prompts = work_dir() / "ioi_circuit.jsonl";
  ASSERT_EQ(run_cli("ioi-gen --n 4 --seed 1 --out " + q(prompts)).code, 0);
  const auto big = tiny_config(corpus());
  // IOI prompts need a longer context than the tiny training config.
  auto cfg = big;
  cfg["model"]["max_pos"] = 96;
  cfg["train"]["total_steps"] = 1;
  cfg["train"].erase("checkpoint_interval");
  const auto d = work_dir() / "circuit_run";
  ASSERT_EQ(run_cli("train --config " + q(write_json("circuit.json", cfg)) + " --out " + q(d)).code, 0);

  const auto out = work_dir() / "graph.json";
  const auto r = run_cli("circuit --ckpt " + q(d / "final.sabt") + " --prompts " + q(prompts) + " --tau 0.03 --out " +
                         q(out));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_DOUBLE_EQ(r.result()["tau"].get<double>(), 0.03);
  EXPECT_TRUE(r.result()["edge_count"].is_number_unsigned());
  const auto graph = json::parse(slurp(out));
  EXPECT_DOUBLE_EQ(graph["tau"].get<double>(), 0.03);
  EXPECT_EQ(graph["edge_count"], r.result()["edge_count"]);
  EXPECT_EQ(graph["edges"].size(), graph["total_edges"].get<std::size_t>());
  EXPECT_TRUE(fs::exists(work_dir() / "graph.dot"));

  const auto inf = run_cli("circuit --ckpt " + q(d / "final.sabt") + " --prompts " + q(prompts) +
                           " --tau inf --out " + q(work_dir() / "graph_inf.json"));
  ASSERT_EQ(inf.code, 0) << inf.err;
  EXPECT_EQ(inf.result()["edge_count"], 0);
  EXPECT_EQ(run_cli("circuit --ckpt " + q(d / "final.sabt") + " --prompts " + q(prompts) + " --tau abc --out " +
                    q(work_dir() / "g.json")).code,
            2);
}

TEST(CliAnalysis, RecordSaeAndMetrics) {
  const auto& d = trained_run();
  const auto rec = work_dir() / "rec.sabt";
  const auto r = run_cli("record --ckpt " + q(d / "final.sabt") + " --data " + q(corpus()) +
                         " --site mlp_out --max-tokens 2000 --out " + q(rec));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.result()["n_tokens"], 2000);
  EXPECT_EQ(r.result()["d_site"], 16);
  EXPECT_EQ(r.result()["layer"], 0);  // penultimate of two blocks

  const auto again = run_cli("record --ckpt " + q(d / "final.sabt") + " --data " + q(corpus()) +
                             " --site mlp_out --max-tokens 2000 --out " + q(work_dir() / "rec2.sabt"));
  EXPECT_EQ(slurp(rec), slurp(work_dir() / "rec2.sabt"));

  const auto sae = work_dir() / "sae.sabt";
  const auto t = run_cli("sae train --record " + q(rec) + " --out " + q(sae) +
                         " --expansion 2 --steps 20 --batch-tokens 256 --l1-warmup 5 --lr-decay-steps 5");
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_EQ(t.result()["d_dict"], 32);

  const auto e = run_cli("sae eval --sae " + q(sae) + " --ckpt " + q(d / "final.sabt") + " --data " + q(corpus()) +
                         " --max-tokens 1000 --max-batches 2");
  ASSERT_EQ(e.code, 0) << e.err;
  const double score = e.result()["ce_score"].get<double>();
  EXPECT_GE(score, 0.0);
  EXPECT_LE(score, 1.0);
  EXPECT_LE(e.result()["l0"].get<double>(), 32.0);

  const auto m = run_cli("metrics --ckpt " + q(d / "final.sabt") + " --data " + q(corpus()) + " --max-batches 2");
  ASSERT_EQ(m.code, 0) << m.err;
  EXPECT_GT(m.result()["weight_l1"].get<double>(), 0.0);
  EXPECT_GT(m.result()["activation_l1"].get<double>(), 0.0);
  EXPECT_GT(m.result()["parameters"]["gate"].get<std::size_t>(), 0u);
  EXPECT_EQ(m.result()["ablation_mode"], "local");
}

TEST(CliErrors, UsageAndRuntimeExitCodes) {
  EXPECT_EQ(run_cli("").code, 2);
  EXPECT_EQ(run_cli("frobnicate").code, 2);
  EXPECT_EQ(run_cli("eval --ckpt only").code, 2);
  EXPECT_EQ(run_cli("eval --ckpt " + q(work_dir() / "nope.sabt") + " --data " + q(corpus())).code, 1);
  EXPECT_EQ(run_cli("record --ckpt " + q(trained_run() / "final.sabt") + " --data " + q(corpus()) +
                    " --site mlp_gate --out " + q(work_dir() / "r.sabt")).code,
            2);
  const auto v = run_cli("--version");
  EXPECT_EQ(v.code, 0);
  EXPECT_NE(v.out.find("0.1.0"), std::string::npos);
}
