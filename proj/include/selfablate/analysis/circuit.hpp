#pragma once

// Component-level circuit discovery by edge patching.
//
// Nodes are the token embedding, every attention head, every MLP and the
// output. A node's input is the sum of the outputs of all earlier nodes that
// write to the residual stream before it (plus constant attention output
// biases), so each such (src, dst) pair is an edge. Patching an edge feeds
// dst the corrupt-run output of src in place of its current output.
//
// Pruning visits destinations in reverse topological order and, for each,
// its incoming edges in reverse topological order of source. An edge is
// removed for good when doing so raises mean KL(clean || circuit) at the
// final prompt position by less than tau.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "selfablate/analysis/ioi.hpp"
#include "selfablate/analysis/metrics.hpp"
#include "selfablate/checkpoint.hpp"
#include "selfablate/data.hpp"
#include "selfablate/ops.hpp"
#include "selfablate/parallel.hpp"

namespace selfablate::analysis {

struct CircuitNode {
  enum class Kind { embed, head, mlp, output };
  Kind kind = Kind::embed;
  std::size_t layer = 0;
  std::size_t head = 0;

  std::string name() const {
    switch (kind) {
      case Kind::embed: return "embed";
      case Kind::head: return "L" + std::to_string(layer) + ".H" + std::to_string(head);
      case Kind::mlp: return "L" + std::to_string(layer) + ".MLP";
      case Kind::output: return "output";
    }
    return "?";
  }
};

struct CircuitEdge {
  std::size_t src = 0;
  std::size_t dst = 0;
  bool retained = true;
  double kl_delta = 0.0;
};

struct CircuitGraph {
  std::vector<CircuitNode> nodes;  // topological order
  std::vector<CircuitEdge> edges;  // grouped by dst, then src, both ascending
  double tau = 0.0;
  double circuit_kl = 0.0;         // mean KL(clean || circuit) after pruning

  std::size_t edge_count() const {
    std::size_t n = 0;
    for (const auto& e : edges) n += e.retained ? 1 : 0;
    return n;
  }

  json to_json() const {
    json j;
    j["nodes"] = json::array();
    for (const auto& n : nodes) j["nodes"].push_back(n.name());
    j["edges"] = json::array();
    for (const auto& e : edges) {
      j["edges"].push_back({{"src", nodes[e.src].name()},
                            {"dst", nodes[e.dst].name()},
                            {"retained", e.retained},
                            {"kl_delta", e.kl_delta}});
    }
    if (std::isinf(tau)) j["tau"] = "inf";
    else j["tau"] = tau;
    j["edge_count"] = edge_count();
    j["total_edges"] = edges.size();
    j["circuit_kl"] = circuit_kl;
    return j;
  }

  /// Retained edges only; isolated nodes are drawn dashed.
  std::string to_dot() const {
    std::vector<bool> used(nodes.size(), false);
    for (const auto& e : edges) {
      if (e.retained) used[e.src] = used[e.dst] = true;
    }
    std::ostringstream os;
    os << "digraph circuit {\n  rankdir=BT;\n";
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      os << "  \"" << nodes[i].name() << "\"" << (used[i] ? "" : " [style=dashed]") << ";\n";
    }
    for (const auto& e : edges) {
      if (!e.retained) continue;
      os << "  \"" << nodes[e.src].name() << "\" -> \"" << nodes[e.dst].name() << "\" [label=\"" << e.kl_delta
         << "\"];\n";
    }
    os << "}\n";
    return os.str();
  }
};

/// Full component graph for a config, every edge retained.
inline CircuitGraph build_component_graph(const ModelConfig& c) {
  using K = CircuitNode::Kind;
  CircuitGraph g;
  g.nodes.push_back({K::embed, 0, 0});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    for (std::size_t h = 0; h < c.n_heads; ++h) g.nodes.push_back({K::head, l, h});
    g.nodes.push_back({K::mlp, l, 0});
  }
  g.nodes.push_back({K::output, c.n_layers, 0});
  // A source feeds dst if it writes to the residual stream before dst reads.
  auto feeds = [](const CircuitNode& s, const CircuitNode& d) {
    if (s.kind == K::output || d.kind == K::embed) return false;
    if (s.kind == K::embed || d.kind == K::output) return true;
    if (d.kind == K::head) return s.layer < d.layer;
    return s.layer < d.layer || (s.layer == d.layer && s.kind == K::head);  // d is an MLP
  };
  for (std::size_t d = 0; d < g.nodes.size(); ++d) {
    for (std::size_t s = 0; s < d; ++s) {
      if (feeds(g.nodes[s], g.nodes[d])) g.edges.push_back({s, d, true, 0.0});
    }
  }
  return g;
}

/// Token ids for an IOI prompt as scored: the text plus a trailing space, so
/// the final position predicts the first byte of the answer name.
inline std::vector<std::int32_t> ioi_tokens(const std::string& text) { return ByteTokenizer::encode(text + " "); }

/// Re-runs the model node by node with an arbitrary set of patched edges.
/// Computation is in double precision.
class PatchingHarness {
 public:
  PatchingHarness(const Checkpoint& ckpt, const std::vector<IoiPrompt>& prompts)
      : model_(load_model<double>(export_standard(ckpt))), graph_(build_component_graph(ckpt.config)) {
    NoGradGuard no_grad;
    const ModelConfig& c = model_.config();
    const std::size_t D = c.d_model, H = c.n_heads, hd = c.head_dim();
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const std::string p = "h." + std::to_string(l) + ".attn.";
      std::vector<HeadWeights> heads(H);
      for (std::size_t h = 0; h < H; ++h) {
        heads[h].q = column_slice(model_.param(p + "q.weight"), h * hd, hd);
        heads[h].k = column_slice(model_.param(p + "k.weight"), h * hd, hd);
        heads[h].v = column_slice(model_.param(p + "v.weight"), h * hd, hd);
        const auto& w = model_.param(p + "out.weight").values();
        heads[h].out = Tensor<double>({hd, D}, std::vector<double>(w.begin() + static_cast<std::ptrdiff_t>(h * hd * D),
                                                                     w.begin() + static_cast<std::ptrdiff_t>((h + 1) * hd * D)));
      }
      heads_.push_back(std::move(heads));
    }
    for (std::size_t e = 0; e < graph_.edges.size(); ++e) incoming_[graph_.edges[e].dst].push_back(e);

    for (const auto& prompt : prompts) {
      PromptState s;
      s.clean = ioi_tokens(prompt.clean);
      const auto corrupt = ioi_tokens(prompt.corrupt);
      if (corrupt.size() != s.clean.size()) throw Error("clean and corrupt prompts tokenize to different lengths");
      if (s.clean.size() > c.max_pos) throw RangeError("IOI prompt longer than max_pos");
      const std::vector<bool> none(graph_.edges.size(), false);
      s.corrupt_outputs = run_nodes(corrupt, none, nullptr);
      states_.push_back(std::move(s));
    }
    const std::vector<bool> none(graph_.edges.size(), false);
    for (auto& s : states_) s.clean_logits = final_logits(s, none);
  }

  const CircuitGraph& graph() const { return graph_; }
  std::size_t prompt_count() const { return states_.size(); }
  const Transformer<double>& model() const { return model_; }

  /// Unpatched final-position logits of prompt i.
  const std::vector<double>& clean_logits(std::size_t i) const { return states_.at(i).clean_logits; }

  /// Final-position logits of prompt i with `patched[e]` edges fed corrupt
  /// source outputs.
  std::vector<double> logits(std::size_t i, const std::vector<bool>& patched) const {
    NoGradGuard no_grad;
    return final_logits(states_.at(i), patched);
  }

  /// Mean KL(clean || patched) over all prompts, sharded across workers.
  double mean_kl(const std::vector<bool>& patched, std::size_t workers = 1) const {
    std::vector<double> per(states_.size(), 0.0);
    parallel_for(states_.size(), workers, [&](std::size_t i) {
      per[i] = kl_divergence(states_[i].clean_logits, final_logits(states_[i], patched));
    });
    double total = 0.0;
    for (double v : per) total += v;  // fixed order: bit-reproducible
    return states_.empty() ? 0.0 : total / static_cast<double>(states_.size());
  }

 private:
  struct HeadWeights {
    Tensor<double> q, k, v, out;
  };
  struct PromptState {
    std::vector<std::int32_t> clean;
    std::vector<Tensor<double>> corrupt_outputs;
    std::vector<double> clean_logits;
  };

  static Tensor<double> column_slice(const Tensor<double>& w, std::size_t start, std::size_t width) {
    const std::size_t rows = w.dim(0), cols = w.dim(1);
    std::vector<double> out(rows * width);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < width; ++c) out[r * width + c] = w.values()[r * cols + start + c];
    }
    return Tensor<double>({rows, width}, std::move(out));
  }

  std::vector<double> final_logits(const PromptState& s, const std::vector<bool>& patched) const {
    const auto outs = run_nodes(s.clean, patched, &s.corrupt_outputs);
    const Tensor<double>& logits = outs.back();
    const std::size_t V = model_.config().vocab_size;
    const std::size_t T = s.clean.size();
    return std::vector<double>(logits.values().begin() + static_cast<std::ptrdiff_t>((T - 1) * V), logits.values().end());
  }

  /// Outputs of every node in topological order; the output node yields
  /// logits. With `corrupt` null nothing is patched.
  std::vector<Tensor<double>> run_nodes(const std::vector<std::int32_t>& embed_tokens, const std::vector<bool>& patched,
                                        const std::vector<Tensor<double>>* corrupt) const {
    NoGradGuard no_grad;
    using K = CircuitNode::Kind;
    const ModelConfig& c = model_.config();
    const std::size_t T = embed_tokens.size();
    const Shape shape{1, T, c.d_model};
    std::vector<Tensor<double>> outs(graph_.nodes.size());
    for (std::size_t n = 0; n < graph_.nodes.size(); ++n) {
      const CircuitNode& node = graph_.nodes[n];
      if (node.kind == K::embed) {
        std::vector<std::int32_t> pos(T);
        for (std::size_t t = 0; t < T; ++t) pos[t] = static_cast<std::int32_t>(t);
        outs[n] = add(embedding<double>(embed_tokens, {1, T}, model_.param("wte")),
                      embedding<double>(pos, {1, T}, model_.param("wpe")));
        continue;
      }
      std::vector<double> in(T * c.d_model, 0.0);
      for (std::size_t e : incoming_.at(n)) {
        const std::size_t src = graph_.edges[e].src;
        const auto& v = (corrupt && patched[e]) ? (*corrupt)[src].values() : outs[src].values();
        for (std::size_t i = 0; i < in.size(); ++i) in[i] += v[i];
      }
      // Attention output biases of every attention layer upstream of n.
      const std::size_t bias_layers = node.kind == K::head ? node.layer
                                      : node.kind == K::mlp ? node.layer + 1
                                                            : c.n_layers;
      for (std::size_t l = 0; l < bias_layers; ++l) {
        const auto& b = model_.param("h." + std::to_string(l) + ".attn.out.bias").values();
        for (std::size_t i = 0; i < in.size(); ++i) in[i] += b[i % c.d_model];
      }
      const Tensor<double> x(shape, std::move(in));
      const std::string p = "h." + std::to_string(node.layer) + ".";
      switch (node.kind) {
        case K::head: {
          const auto& w = heads_[node.layer][node.head];
          const Tensor<double> h = layer_norm(x, model_.param(p + "ln_1.weight"), model_.param(p + "ln_1.bias"));
          const Tensor<double> z = causal_attention(linear(h, w.q), linear(h, w.k), linear(h, w.v), 1);
          outs[n] = linear(z, w.out);
          break;
        }
        case K::mlp: {
          const Tensor<double> h = layer_norm(x, model_.param(p + "ln_2.weight"), model_.param(p + "ln_2.bias"));
          const Tensor<double> hidden = gelu(linear(h, model_.param(p + "mlp.fc.weight"), model_.param(p + "mlp.fc.bias")));
          outs[n] = linear(hidden, model_.param(p + "mlp.proj.weight"), model_.param(p + "mlp.proj.bias"));
          break;
        }
        case K::output: {
          const Tensor<double> h = layer_norm(x, model_.param("ln_f.weight"), model_.param("ln_f.bias"));
          outs[n] = linear(h, transpose(model_.param("wte")));
          break;
        }
        case K::embed: break;
      }
    }
    return outs;
  }

  Transformer<double> model_;
  CircuitGraph graph_;
  std::vector<std::vector<HeadWeights>> heads_;
  std::map<std::size_t, std::vector<std::size_t>> incoming_;
  std::vector<PromptState> states_;
};

/// Greedy edge pruning at threshold tau.
inline CircuitGraph discover_circuit(const PatchingHarness& harness, double tau, std::size_t workers = 1) {
  if (!(tau >= 0.0)) throw ConfigError("tau must be non-negative");
  CircuitGraph g = harness.graph();
  g.tau = tau;
  std::vector<bool> patched(g.edges.size(), false);
  double current = harness.mean_kl(patched, workers);
  for (std::size_t e = g.edges.size(); e-- > 0;) {
    patched[e] = true;
    const double kl = harness.mean_kl(patched, workers);
    g.edges[e].kl_delta = kl - current;
    if (g.edges[e].kl_delta < tau) {
      g.edges[e].retained = false;
      current = kl;
    } else {
      patched[e] = false;
    }
  }
  g.circuit_kl = current;
  return g;
}

inline CircuitGraph discover_circuit(const Checkpoint& ckpt, const std::vector<IoiPrompt>& prompts, double tau,
                                     std::size_t workers = worker_count()) {
  return discover_circuit(PatchingHarness(ckpt, prompts), tau, workers);
}

}  // namespace selfablate::analysis
