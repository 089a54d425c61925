// selfablate: train, evaluate, export and analyse self-ablating transformers.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "selfablate/selfablate.hpp"

namespace fs = std::filesystem;
using namespace selfablate;
using selfablate::json;

namespace {

constexpr const char* kVersion = "0.1.0";

class UsageError : public Error {
 public:
  using Error::Error;
};

void print_json(const json& j) { std::cout << j.dump(2) << std::endl; }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

std::string file_hash(const std::string& path) { return hex64(fnv1a(read_file_bytes(path))); }

std::vector<Batch> eval_batches(const std::vector<std::string>& docs, const ModelConfig& mc, std::size_t seq_len,
                                std::size_t batch_size, std::size_t max_batches) {
  if (seq_len == 0) seq_len = std::min<std::size_t>(128, mc.max_pos);
  if (seq_len > mc.max_pos) throw UsageError("--seq-len exceeds the model's max_pos");
  return BatchStream(docs, seq_len, batch_size, 0)
      .sequential_batches(max_batches ? max_batches : std::numeric_limits<std::size_t>::max());
}

struct EvalOptions {
  std::size_t seq_len = 0;
  std::size_t batch_size = 16;
  std::size_t max_batches = 0;

  void add_to(CLI::App* app) {
    app->add_option("--seq-len", seq_len, "Evaluation window length (default: min(128, max_pos))");
    app->add_option("--batch-size", batch_size, "Windows per batch")->check(CLI::PositiveNumber);
    app->add_option("--max-batches", max_batches, "Limit on evaluation batches (0 = all)");
  }
};

// ------------------------------------------------------------------ train

struct TrainArgs {
  std::string config;
  std::string out;
  std::string resume;
};

int cmd_train(const TrainArgs& a) {
  const RunConfig rc = load_run_config(a.config);
  const auto all_docs = load_corpus(rc.paths.train_data);
  std::vector<std::string> train_docs, val_docs;
  if (rc.paths.val_data.empty()) {
    std::tie(train_docs, val_docs) = split_holdout(all_docs, 0.05);
  } else {
    train_docs = all_docs;
    val_docs = load_corpus(rc.paths.val_data);
  }

  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) {
    resume = load_checkpoint(a.resume);
    if (!(resume->config == rc.model)) throw ConfigError("resume checkpoint's model config differs from '" + a.config + "'");
    if (resume->step > rc.train.total_steps) throw ConfigError("resume checkpoint is past train.total_steps");
  }

  const fs::path out(a.out);
  fs::create_directories(out);
  json manifest = {{"tool", "selfablate"},
                   {"version", kVersion},
                   {"command", "train"},
                   {"config", to_json(rc)},
                   {"seeds", {{"model", rc.model.seed}, {"train", rc.train.seed}}},
                   {"inputs", {{"config", {{"path", a.config}, {"hash", file_hash(a.config)}}},
                               {"train_data", {{"path", rc.paths.train_data}, {"hash", file_hash(rc.paths.train_data)}}}}},
                   {"artifacts", {{"metrics", (out / "metrics.jsonl").string()}, {"final", (out / "final.sabt").string()}}},
                   {"parameters", {{"base", count_parameters(rc.model).base}, {"gate", count_parameters(rc.model).gate}}}};
  if (!rc.paths.val_data.empty()) {
    manifest["inputs"]["val_data"] = {{"path", rc.paths.val_data}, {"hash", file_hash(rc.paths.val_data)}};
  }
  if (resume) {
    manifest["inputs"]["resume"] = {{"path", a.resume}, {"hash", file_hash(a.resume)}, {"step", resume->step}};
  }
  write_text(out / "manifest.json", manifest.dump(2) + "\n");

  Trainer trainer = resume ? Trainer(*resume, rc.train, train_docs, val_docs)
                           : Trainer(rc.model, rc.train, train_docs, val_docs);
  std::ofstream metrics(out / "metrics.jsonl", resume ? std::ios::app : std::ios::trunc);
  if (!metrics) throw Error("cannot write metrics.jsonl");
  trainer.run(
      [&](const MetricsRecord& m) {
        metrics << m.to_json().dump() << "\n" << std::flush;
        std::cerr << "step " << m.step << " loss_clean " << m.loss_clean << " loss_ablated " << m.loss_ablated
                  << " ppl " << m.ppl << "\n";
      },
      [&](const StepResult& r) {
        const std::size_t done = r.step + 1;
        if (rc.train.checkpoint_interval && done % rc.train.checkpoint_interval == 0 && !trainer.done()) {
          save_checkpoint((out / ("step_" + std::to_string(done) + ".sabt")).string(), trainer.checkpoint());
        }
      });
  const Checkpoint final_ckpt = trainer.checkpoint();
  save_checkpoint((out / "final.sabt").string(), final_ckpt);
  print_json({{"final", (out / "final.sabt").string()},
              {"step", final_ckpt.step},
              {"ppl", trainer.validation_perplexity()}});
  return 0;
}

// ------------------------------------------------------------------- eval

int cmd_eval(const std::string& ckpt_path, const std::string& data, const EvalOptions& o) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const auto model = load_model<float>(ckpt);
  const auto batches = eval_batches(load_corpus(data), ckpt.config, o.seq_len, o.batch_size, o.max_batches);
  const double ce = mean_token_ce(model, batches);
  std::size_t tokens = 0;
  for (const auto& b : batches) tokens += b.targets.size();
  print_json({{"ckpt", ckpt_path}, {"ce", ce}, {"ppl", std::exp(ce)}, {"tokens", tokens}});
  return 0;
}

int cmd_export(const std::string& ckpt_path, const std::string& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Checkpoint exported = export_standard(ckpt);
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  save_checkpoint(out, exported);
  print_json({{"out", out},
              {"parameters_in", ckpt.parameter_count()},
              {"parameters_out", exported.parameter_count()},
              {"baseline_parameters", count_parameters(exported.config).base}});
  return 0;
}

int cmd_record(const std::string& ckpt_path, const std::string& data, const std::string& site_name, int layer,
               std::size_t max_tokens, const std::string& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Site site = parse_site(site_name);
  const std::size_t l = layer < 0 ? analysis::penultimate_layer(ckpt.config) : static_cast<std::size_t>(layer);
  const auto rec = analysis::record_activations(ckpt, load_corpus(data), site, l, max_tokens);
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  analysis::save_record(out, rec);
  print_json({{"out", out},
              {"site", to_string(rec.site)},
              {"layer", rec.layer},
              {"n_tokens", rec.n_tokens},
              {"d_site", rec.d_site},
              {"checkpoint_hash", rec.checkpoint_hash},
              {"data_hash", rec.data_hash},
              {"record_hash", rec.content_hash()}});
  return 0;
}

// -------------------------------------------------------------------- sae

int cmd_sae_train(const std::string& record_path, const analysis::SaeConfig& cfg, const std::string& out) {
  const auto rec = analysis::load_record(record_path);
  const auto sae = analysis::sae_train(rec, cfg, [&](const analysis::SaeStepLog& s) {
    if (s.step % 200 == 0 || s.step + 1 == cfg.total_steps) {
      std::cerr << "sae step " << s.step << " mse " << s.mse << " l1 " << s.l1 << " lambda " << s.l1_coef << "\n";
    }
  });
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  save_container(out, analysis::to_container(sae, cfg, rec));
  print_json({{"out", out},
              {"d_dict", sae.d_dict},
              {"l0", analysis::sae_l0(sae, rec)},
              {"mse", analysis::sae_mse(sae, rec)},
              {"norm_scale", sae.norm_scale}});
  return 0;
}

int cmd_sae_eval(const std::string& sae_path, const std::string& ckpt_path, const std::string& data,
                 std::size_t max_tokens, const EvalOptions& o) {
  const auto loaded = analysis::sae_from_container(load_container(sae_path));
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  if (analysis::site_width(ckpt.config, loaded.site) != loaded.sae.d_in || loaded.layer >= ckpt.config.n_layers) {
    throw UsageError("SAE site does not match the checkpoint");
  }
  const auto docs = load_corpus(data);
  const auto rec = analysis::record_activations(ckpt, docs, loaded.site, loaded.layer, max_tokens);
  const auto model = load_model<float>(ckpt);
  const auto batches = eval_batches(docs, ckpt.config, o.seq_len, o.batch_size, o.max_batches);
  const auto& sae = loaded.sae;
  const auto report = analysis::evaluate_ce_score<float>(model, batches, loaded.layer, loaded.site, [&](Tensor<float>& t) {
    const Shape shape = t.shape();
    t = reshape(sae.reconstruct(reshape(t, {t.size() / sae.d_in, sae.d_in})), shape);
  });
  print_json({{"site", to_string(loaded.site)},
              {"layer", loaded.layer},
              {"d_dict", sae.d_dict},
              {"l0", analysis::sae_l0(sae, rec)},
              {"ce_score", report.score},
              {"h_clean", report.h_clean},
              {"h_sae", report.h_replaced},
              {"h_zero", report.h_zero}});
  return 0;
}

// --------------------------------------------------------- ioi / circuit

int cmd_ioi_gen(std::size_t n, std::uint64_t seed, const std::string& pools_path, const std::string& out) {
  const auto pools = pools_path.empty() ? analysis::default_ioi_pools() : analysis::load_ioi_pools(pools_path);
  const auto prompts = analysis::generate_ioi(n, seed, pools);
  write_text(out, analysis::ioi_to_jsonl(prompts));
  print_json({{"out", out}, {"n", prompts.size()}, {"seed", seed}});
  return 0;
}

int cmd_circuit(const std::string& ckpt_path, const std::string& prompts_path, const std::string& tau_text,
                const std::string& out) {
  double tau = 0.0;
  if (tau_text == "inf" || tau_text == "+inf") {
    tau = std::numeric_limits<double>::infinity();
  } else {
    try {
      std::size_t used = 0;
      tau = std::stod(tau_text, &used);
      if (used != tau_text.size()) throw std::invalid_argument(tau_text);
    } catch (const std::exception&) {
      throw UsageError("--tau must be a number or 'inf', got '" + tau_text + "'");
    }
  }
  if (!(tau >= 0.0)) throw UsageError("--tau must be non-negative");
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const auto prompts = analysis::load_ioi_jsonl(prompts_path);
  if (prompts.empty()) throw UsageError("prompt file '" + prompts_path + "' has no prompts");
  const auto graph = analysis::discover_circuit(ckpt, prompts, tau);
  json result = graph.to_json();
  result["n_prompts"] = prompts.size();
  write_text(out, result.dump(2) + "\n");
  fs::path dot(out);
  dot.replace_extension(".dot");
  write_text(dot, graph.to_dot());
  print_json({{"tau", result["tau"]},
              {"edge_count", graph.edge_count()},
              {"total_edges", graph.edges.size()},
              {"circuit_kl", graph.circuit_kl},
              {"out", out},
              {"dot", dot.string()}});
  return 0;
}

int cmd_metrics(const std::string& ckpt_path, const std::string& data, const EvalOptions& o) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const auto model = load_model<float>(ckpt);
  const auto batches = eval_batches(load_corpus(data), ckpt.config, o.seq_len, o.batch_size, o.max_batches);
  const auto counts = count_parameters(ckpt.config);
  print_json({{"weight_l1", analysis::weight_l1(ckpt)},
              {"activation_l1", analysis::activation_l1(model, batches)},
              {"ppl", evaluate_perplexity(model, batches)},
              {"parameters", {{"base", counts.base}, {"gate", counts.gate}, {"total", counts.total()}}},
              {"ablation_mode", to_string(ckpt.config.ablation_mode)}});
  return 0;
}

int cmd_gen_corpus(std::size_t bytes, std::uint64_t seed, const std::string& out) {
  const auto docs = synthesize_stories(bytes, seed);
  const std::string text = join_documents(docs);
  write_text(out, text);
  print_json({{"out", out}, {"documents", docs.size()}, {"bytes", text.size()}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-ablating transformer toolkit", "selfablate"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON config");
  train_cmd->add_option("--config", train.config, "Run config (JSON)")->required();
  train_cmd->add_option("--out", train.out, "Output directory")->required();
  train_cmd->add_option("--resume", train.resume, "Checkpoint to continue from");

  std::string ckpt, data, out, site = "mlp_out", prompts, tau = "0.03", pools, record, sae_path;
  int layer = -1;
  std::size_t max_tokens = 0, n = 0, bytes = 1000000;
  std::uint64_t seed = 0;
  EvalOptions eval_opts;

  auto* eval_cmd = app.add_subcommand("eval", "Validation perplexity of a checkpoint");
  eval_cmd->add_option("--ckpt", ckpt)->required();
  eval_cmd->add_option("--data", data)->required();
  eval_opts.add_to(eval_cmd);

  auto* export_cmd = app.add_subcommand("export", "Strip gate projections into a standard checkpoint");
  export_cmd->add_option("--ckpt", ckpt)->required();
  export_cmd->add_option("--out", out)->required();

  auto* record_cmd = app.add_subcommand("record", "Record activations at a hook site");
  record_cmd->add_option("--ckpt", ckpt)->required();
  record_cmd->add_option("--data", data)->required();
  record_cmd->add_option("--site", site, "attn_out | mlp_hidden | mlp_out | resid")->capture_default_str();
  record_cmd->add_option("--layer", layer, "Block index (default: penultimate)");
  record_cmd->add_option("--max-tokens", max_tokens, "Stop after this many tokens (0 = all)");
  record_cmd->add_option("--out", out)->required();

  analysis::SaeConfig sae_cfg;
  auto* sae_cmd = app.add_subcommand("sae", "Sparse autoencoder training and evaluation");
  sae_cmd->require_subcommand(1);
  auto* sae_train_cmd = sae_cmd->add_subcommand("train", "Train an SAE on an activation record");
  sae_train_cmd->add_option("--record", record)->required();
  sae_train_cmd->add_option("--out", out)->required();
  sae_train_cmd->add_option("--expansion", sae_cfg.expansion)->capture_default_str();
  sae_train_cmd->add_option("--l1-coef", sae_cfg.l1_coef)->capture_default_str();
  sae_train_cmd->add_option("--l1-warmup", sae_cfg.l1_warmup_steps)->capture_default_str();
  sae_train_cmd->add_option("--lr", sae_cfg.lr)->capture_default_str();
  sae_train_cmd->add_option("--lr-decay-steps", sae_cfg.lr_decay_steps)->capture_default_str();
  sae_train_cmd->add_option("--steps", sae_cfg.total_steps)->capture_default_str();
  sae_train_cmd->add_option("--batch-tokens", sae_cfg.batch_tokens)->capture_default_str();
  sae_train_cmd->add_option("--seed", sae_cfg.seed)->capture_default_str();
  auto* sae_eval_cmd = sae_cmd->add_subcommand("eval", "L0 and CE-score of a trained SAE");
  sae_eval_cmd->add_option("--sae", sae_path)->required();
  sae_eval_cmd->add_option("--ckpt", ckpt)->required();
  sae_eval_cmd->add_option("--data", data)->required();
  sae_eval_cmd->add_option("--max-tokens", max_tokens, "Tokens used for L0 (0 = all)");
  eval_opts.add_to(sae_eval_cmd);

  auto* ioi_cmd = app.add_subcommand("ioi-gen", "Generate IOI prompt pairs as JSONL");
  ioi_cmd->add_option("--n", n)->required();
  ioi_cmd->add_option("--seed", seed)->capture_default_str();
  ioi_cmd->add_option("--pools", pools, "JSON file with names/places/objects");
  ioi_cmd->add_option("--out", out)->required();

  auto* circuit_cmd = app.add_subcommand("circuit", "Edge-pruning circuit discovery on IOI prompts");
  circuit_cmd->add_option("--ckpt", ckpt)->required();
  circuit_cmd->add_option("--prompts", prompts)->required();
  circuit_cmd->add_option("--tau", tau, "Pruning threshold (number or inf)")->capture_default_str();
  circuit_cmd->add_option("--out", out, "Graph JSON path; DOT is written alongside")->required();

  auto* metrics_cmd = app.add_subcommand("metrics", "Weight and activation L1, perplexity, parameter counts");
  metrics_cmd->add_option("--ckpt", ckpt)->required();
  metrics_cmd->add_option("--data", data)->required();
  eval_opts.add_to(metrics_cmd);

  auto* corpus_cmd = app.add_subcommand("gen-corpus", "Write a synthetic story corpus");
  corpus_cmd->add_option("--bytes", bytes)->capture_default_str();
  corpus_cmd->add_option("--seed", seed)->capture_default_str();
  corpus_cmd->add_option("--out", out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) return cmd_train(train);
    if (*eval_cmd) return cmd_eval(ckpt, data, eval_opts);
    if (*export_cmd) return cmd_export(ckpt, out);
    if (*record_cmd) return cmd_record(ckpt, data, site, layer, max_tokens, out);
    if (*sae_train_cmd) return cmd_sae_train(record, sae_cfg, out);
    if (*sae_eval_cmd) return cmd_sae_eval(sae_path, ckpt, data, max_tokens, eval_opts);
    if (*ioi_cmd) return cmd_ioi_gen(n, seed, pools, out);
    if (*circuit_cmd) return cmd_circuit(ckpt, prompts, tau, out);
    if (*metrics_cmd) return cmd_metrics(ckpt, data, eval_opts);
    if (*corpus_cmd) return cmd_gen_corpus(bytes, seed, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
