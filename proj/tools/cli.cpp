// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <fmt/format.h>
#include <fmt/ostream.h>

#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <utility>

#include "hcattn/accounting.hpp"
#include "hcattn/rng.hpp"
#include "hcattn/tensor_io.hpp"

namespace hcattn::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Datasets

namespace {

std::uint64_t key_tag(std::size_t l, std::size_t h) { return 0x10000 + l * 0x100 + h; }
std::uint64_t value_tag(std::size_t l, std::size_t h) { return 0x20000 + l * 0x100 + h; }
constexpr std::uint64_t kQueryTag = 0x30000;

std::size_t resolve_groups(std::size_t groups, std::size_t d) {
  if (groups != 0) return groups;
  return d >= 2 && d % 2 == 0 ? d / 2 : d;
}

Matrix generate(SyntheticSpec spec) { return to_matrix(gen_synthetic(spec)); }

}  // namespace

Dataset synthesize(const GenOptions& opt) {
  SyntheticSpec key_spec;
  if (opt.kind == "gaussian") {
    key_spec.kind = SyntheticSpec::Kind::gaussian;
  } else if (opt.kind == "planted") {
    key_spec.kind = SyntheticSpec::Kind::planted_clusters;
  } else {
    throw std::invalid_argument("unknown synthetic kind '" + opt.kind + "'");
  }
  if (opt.layers == 0 || opt.kv_heads == 0 || opt.q_heads == 0 || opt.steps == 0) {
    throw std::invalid_argument("gen: layers, heads and steps must be >= 1");
  }
  if (opt.q_heads % opt.kv_heads != 0) {
    throw std::invalid_argument("gen: kv-heads must divide q-heads");
  }
  key_spec.n = opt.n;
  key_spec.d = opt.d;
  key_spec.groups = resolve_groups(opt.groups, opt.d);
  key_spec.clusters_per_group = opt.clusters;
  key_spec.noise_stddev = opt.noise;
  key_spec.scale = opt.key_scale;

  Dataset ds;
  ds.layers = opt.layers;
  ds.kv_heads = opt.kv_heads;
  ds.q_heads = opt.q_heads;
  ds.d = opt.d;
  ds.n = opt.n;
  ds.keys.resize(opt.layers);
  ds.values.resize(opt.layers);
  for (std::size_t l = 0; l < opt.layers; ++l) {
    for (std::size_t h = 0; h < opt.kv_heads; ++h) {
      key_spec.seed = derive_seed(opt.seed, key_tag(l, h));
      ds.keys[l].push_back(generate(key_spec));
      SyntheticSpec vs;
      vs.n = opt.n;
      vs.d = opt.d;
      vs.seed = derive_seed(opt.seed, value_tag(l, h));
      ds.values[l].push_back(generate(vs));
    }
  }
  SyntheticSpec qs;
  qs.n = opt.steps * opt.layers * opt.q_heads;
  qs.d = opt.d;
  qs.scale = opt.query_scale;
  qs.seed = derive_seed(opt.seed, kQueryTag);
  const Matrix q = generate(qs);
  ds.queries.resize(opt.steps);
  for (std::size_t s = 0; s < opt.steps; ++s) {
    for (std::size_t l = 0; l < opt.layers; ++l) {
      Matrix block(0, opt.d);
      for (std::size_t h = 0; h < opt.q_heads; ++h) {
        block.append_row(q.row((s * opt.layers + l) * opt.q_heads + h));
      }
      ds.queries[s].push_back(std::move(block));
    }
  }
  return ds;
}

namespace {

TensorDump pack_heads(const HeadTensors& t, std::size_t n, std::size_t d) {
  std::vector<float> flat;
  for (const auto& layer : t) {
    for (const auto& m : layer) flat.insert(flat.end(), m.data.begin(), m.data.end());
  }
  return TensorDump::from_floats({t.size(), t.front().size(), n, d}, std::move(flat));
}

HeadTensors unpack_heads(const TensorDump& t, const char* what) {
  std::vector<std::uint64_t> shape = t.shape;
  if (shape.size() == 2) shape.insert(shape.begin(), {1, 1});
  if (shape.size() != 4) {
    throw std::invalid_argument(std::string(what) + ": expected rank 2 [n,d] or rank 4 [L,H,n,d]");
  }
  const std::vector<float> flat = t.to_floats();
  const std::size_t n = shape[2], d = shape[3];
  HeadTensors out(shape[0]);
  std::size_t offset = 0;
  for (auto& layer : out) {
    for (std::size_t h = 0; h < shape[1]; ++h) {
      Matrix m(n, d);
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), n * d, m.data.begin());
      offset += n * d;
      layer.push_back(std::move(m));
    }
  }
  return out;
}

void write_atomically(const fs::path& path, const TensorDump& t) {
  fs::path tmp = path;
  tmp += ".tmp";
  write_tensor(tmp, t);
  fs::rename(tmp, path);
}

void write_text_atomically(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << text;
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(dir);
  write_atomically(fs::path(dir) / "keys.hcat", pack_heads(ds.keys, ds.n, ds.d));
  write_atomically(fs::path(dir) / "values.hcat", pack_heads(ds.values, ds.n, ds.d));
  std::vector<float> q;
  for (const auto& step : ds.queries) {
    for (const auto& block : step) q.insert(q.end(), block.data.begin(), block.data.end());
  }
  write_atomically(fs::path(dir) / "queries.hcat",
                   TensorDump::from_floats({ds.steps(), ds.layers, ds.q_heads, ds.d}, std::move(q)));
}

Dataset load_dataset(const std::string& keys, const std::string& values,
                     const std::string& queries) {
  Dataset ds;
  ds.keys = unpack_heads(read_tensor(keys), "keys");
  ds.values = unpack_heads(read_tensor(values), "values");
  ds.layers = ds.keys.size();
  ds.kv_heads = ds.keys.front().size();
  ds.n = ds.keys[0][0].rows;
  ds.d = ds.keys[0][0].cols;
  if (ds.values.size() != ds.layers || ds.values[0].size() != ds.kv_heads ||
      ds.values[0][0].rows != ds.n || ds.values[0][0].cols != ds.d) {
    throw std::invalid_argument("values tensor shape does not match keys");
  }
  const TensorDump qt = read_tensor(queries);
  std::vector<std::uint64_t> shape = qt.shape;
  if (shape.size() == 2) shape = {shape[0], 1, 1, shape[1]};
  if (shape.size() != 4 || shape[1] != ds.layers || shape[3] != ds.d) {
    throw std::invalid_argument("queries: expected [steps, L, H_q, d] matching the keys");
  }
  ds.q_heads = shape[2];
  const std::vector<float> flat = qt.to_floats();
  std::size_t offset = 0;
  ds.queries.resize(shape[0]);
  for (auto& step : ds.queries) {
    for (std::size_t l = 0; l < ds.layers; ++l) {
      Matrix block(ds.q_heads, ds.d);
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), ds.q_heads * ds.d,
                  block.data.begin());
      offset += ds.q_heads * ds.d;
      step.push_back(std::move(block));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Sessions

double relative_l2_error(std::span<const float> approx, std::span<const float> exact) {
  double diff = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < exact.size(); ++i) {
    const double e = exact[i];
    const double a = approx[i];
    diff += (a - e) * (a - e);
    ref += e * e;
  }
  return ref > 0.0 ? std::sqrt(diff / ref) : std::sqrt(diff);
}

SessionResult run_session(const Dataset& ds, const EngineConfig& cfg,
                          std::vector<Codebook> codebooks, Pipelining mode) {
  DecodeState state = DecodeState::prefill(ds.keys, ds.values, cfg, std::move(codebooks));
  SessionResult r;
  double err_sum = 0.0;
  std::size_t err_count = 0;
  for (const auto& step : ds.queries) {
    auto outputs = state.decode_layers(step, mode);
    for (std::size_t l = 0; l < ds.layers; ++l) {
      for (std::size_t h = 0; h < ds.q_heads; ++h) {
        const std::size_t kv = cfg.kv_head_for(h);
        const auto exact = exact_attention(step[l].row(h), ds.keys[l][kv], ds.values[l][kv]);
        const double e = relative_l2_error(outputs[l].row(h), exact);
        r.max_rel_error = std::max(r.max_rel_error, e);
        err_sum += e;
        ++err_count;
      }
    }
    r.outputs.push_back(std::move(outputs));
  }
  r.mean_rel_error = err_count == 0 ? 0.0 : err_sum / static_cast<double>(err_count);
  std::uint64_t selected = 0, offered = 0;
  for (const auto& st : state.layer_stats()) {
    r.layer_selection_ratio.push_back(st.mean_ratio());
    r.mean_selection_ratio += st.mean_ratio();
    selected += st.selected;
    offered += st.tokens;
  }
  r.mean_selection_ratio /= static_cast<double>(ds.layers);
  r.pooled_selection_ratio =
      offered == 0 ? 0.0 : static_cast<double>(selected) / static_cast<double>(offered);
  r.ledger = state.ledger();
  r.predicted_weight_bytes =
      static_cast<double>(ds.steps()) *
      comm_overhead(static_cast<double>(ds.n), static_cast<double>(ds.layers),
                    static_cast<double>(ds.q_heads), r.pooled_selection_ratio,
                    static_cast<double>(kWeightWireBytes));
  return r;
}

// ---------------------------------------------------------------------------
// Report output
//
// kv format: one record per line, records are space-separated key=value
// pairs; keys match [a-z0-9_.]+ and values contain no whitespace.

namespace {

class Report {
 public:
  Report(std::ostream& out, bool kv) : out_(out), kv_(kv) {}

  void field(const std::string& key, const std::string& value) {
    if (kv_) {
      out_ << key << '=' << value << '\n';
    } else {
      out_ << fmt::format("{:<28} {}\n", key, value);
    }
  }
  void field(const std::string& key, double value) { field(key, fmt::format("{:.9g}", value)); }
  void field(const std::string& key, std::uint64_t value) { field(key, std::to_string(value)); }

  void heading(const std::string& title) {
    if (!kv_) out_ << "\n[" << title << "]\n";
  }

  void table(const std::vector<std::string>& columns,
             const std::vector<std::vector<std::string>>& rows) {
    if (kv_) {
      for (const auto& row : rows) {
        for (std::size_t i = 0; i < columns.size(); ++i) {
          out_ << (i == 0 ? "" : " ") << columns[i] << '=' << row[i];
        }
        out_ << '\n';
      }
      return;
    }
    std::vector<std::size_t> width(columns.size());
    for (std::size_t i = 0; i < columns.size(); ++i) {
      width[i] = columns[i].size();
      for (const auto& row : rows) width[i] = std::max(width[i], row[i].size());
    }
    for (std::size_t i = 0; i < columns.size(); ++i) {
      out_ << fmt::format("{:>{}}  ", columns[i], width[i]);
    }
    out_ << '\n';
    for (const auto& row : rows) {
      for (std::size_t i = 0; i < columns.size(); ++i) {
        out_ << fmt::format("{:>{}}  ", row[i], width[i]);
      }
      out_ << '\n';
    }
  }

 private:
  std::ostream& out_;
  bool kv_;
};

std::string pct(double fraction) { return fmt::format("{:g}%", fraction * 100.0); }

struct QuantOptions {
  std::size_t g = 0;  // 0: d/2
  std::size_t c = 256;
  bool shared = false;
  std::size_t batch_size = 10000;
  std::size_t max_iters = 200;
  std::size_t restarts = 3;
  std::uint64_t seed = 0;
  std::string scope = "per-layer";
};

void add_quant_options(CLI::App* cmd, QuantOptions& q) {
  cmd->add_option("--g", q.g, "Groups per key vector (default d/2)")->check(CLI::PositiveNumber);
  cmd->add_option("--c", q.c, "Centroids per codebook")->check(CLI::Range(1, 65536))->capture_default_str();
  cmd->add_flag("--shared", q.shared, "One codebook shared by every group");
  cmd->add_option("--batch-size", q.batch_size, "Mini-batch k-means batch size")
      ->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--max-iters", q.max_iters, "Mini-batch k-means iterations")
      ->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--restarts", q.restarts, "Independent k-means initializations")
      ->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--train-seed", q.seed, "Codebook training seed")->capture_default_str();
  cmd->add_option("--scope", q.scope, "Codebook scope")
      ->check(CLI::IsMember({"per-layer", "per-head"}))->capture_default_str();
}

QuantizerConfig to_quantizer(const QuantOptions& q, std::size_t d) {
  QuantizerConfig qc;
  qc.d = d;
  qc.g = resolve_groups(q.g, d);
  qc.c = q.c;
  qc.shared_codebook = q.shared;
  qc.kmeans_batch_size = q.batch_size;
  qc.kmeans_max_iters = q.max_iters;
  qc.kmeans_restarts = q.restarts;
  qc.seed = q.seed;
  qc.validate();
  return qc;
}

CodebookScope to_scope(const std::string& s) {
  return s == "per-head" ? CodebookScope::per_head : CodebookScope::per_layer;
}

std::string codebook_file(std::size_t l, std::optional<std::size_t> h) {
  return h ? fmt::format("codebook_l{}_h{}.hccb", l, *h) : fmt::format("codebook_l{}.hccb", l);
}

void report_quantizer(Report& rep, const QuantizerConfig& qc) {
  rep.field("config.d", std::uint64_t{qc.d});
  rep.field("config.g", std::uint64_t{qc.g});
  rep.field("config.c", std::uint64_t{qc.c});
  rep.field("config.shared_codebook", qc.shared_codebook ? "true" : "false");
  rep.field("config.batch_size", std::uint64_t{qc.kmeans_batch_size});
  rep.field("config.max_iters", std::uint64_t{qc.kmeans_max_iters});
  rep.field("config.restarts", std::uint64_t{qc.kmeans_restarts});
  rep.field("config.train_seed", std::uint64_t{qc.seed});
}

void add_gen_options(CLI::App* cmd, GenOptions& g) {
  cmd->add_option("--kind", g.kind, "Synthetic key distribution")
      ->check(CLI::IsMember({"gaussian", "planted"}))->capture_default_str();
  cmd->add_option("--n", g.n, "Tokens per head")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--d", g.d, "Head dimension")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--groups", g.groups, "Planted groups (default d/2)");
  cmd->add_option("--clusters", g.clusters, "Planted clusters per group")
      ->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--noise", g.noise, "Planted noise standard deviation")
      ->check(CLI::NonNegativeNumber)->capture_default_str();
  cmd->add_option("--key-scale", g.key_scale, "Multiplier on generated keys")->capture_default_str();
  cmd->add_option("--query-scale", g.query_scale, "Multiplier on generated queries")
      ->capture_default_str();
  cmd->add_option("--seed", g.seed, "Generator seed")->capture_default_str();
  cmd->add_option("--layers", g.layers, "Layers")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--kv-heads", g.kv_heads, "KV heads per layer")
      ->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--q-heads", g.q_heads, "Query heads per layer")
      ->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--steps", g.steps, "Decode steps (query sets)")
      ->check(CLI::PositiveNumber)->capture_default_str();
}

struct DataOptions {
  std::string keys, values, queries;
  GenOptions synth;
};

Dataset obtain_dataset(const DataOptions& o) {
  if (!o.keys.empty() || !o.values.empty() || !o.queries.empty()) {
    if (o.keys.empty() || o.values.empty() || o.queries.empty()) {
      throw std::invalid_argument("--keys, --values and --queries must be given together");
    }
    return load_dataset(o.keys, o.values, o.queries);
  }
  return synthesize(o.synth);
}

std::vector<Codebook> load_codebooks(const std::string& dir, const EngineConfig& cfg) {
  std::vector<Codebook> out;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    if (cfg.codebook_scope == CodebookScope::per_layer) {
      out.push_back(read_codebook(fs::path(dir) / codebook_file(l, std::nullopt)));
    } else {
      for (std::size_t h = 0; h < cfg.kv_heads; ++h) {
        out.push_back(read_codebook(fs::path(dir) / codebook_file(l, h)));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands

int cmd_gen(const GenOptions& opt, const std::string& out_dir, bool kv, std::ostream& out) {
  const Dataset ds = synthesize(opt);
  save_dataset(ds, out_dir);
  Report rep(out, kv);
  rep.field("command", "gen");
  rep.field("config.kind", opt.kind);
  rep.field("config.n", std::uint64_t{opt.n});
  rep.field("config.d", std::uint64_t{opt.d});
  rep.field("config.layers", std::uint64_t{opt.layers});
  rep.field("config.kv_heads", std::uint64_t{opt.kv_heads});
  rep.field("config.q_heads", std::uint64_t{opt.q_heads});
  rep.field("config.steps", std::uint64_t{opt.steps});
  rep.field("config.seed", std::uint64_t{opt.seed});
  for (const char* f : {"keys.hcat", "values.hcat", "queries.hcat"}) {
    rep.field(std::string("file.") + std::string(f).substr(0, std::string(f).find('.')),
              (fs::path(out_dir) / f).string());
  }
  return kOk;
}

int cmd_train(const std::string& keys_path, const QuantOptions& q, const std::string& out_dir,
              bool kv, std::ostream& out) {
  const HeadTensors keys = unpack_heads(read_tensor(keys_path), "keys");
  EngineConfig cfg;
  cfg.layers = keys.size();
  cfg.kv_heads = keys.front().size();
  cfg.q_heads = cfg.kv_heads;
  cfg.d = keys[0][0].cols;
  cfg.quantizer = to_quantizer(q, cfg.d);
  cfg.codebook_scope = to_scope(q.scope);
  const auto codebooks = train_engine_codebooks(keys, cfg);

  fs::create_directories(out_dir);
  Report rep(out, kv);
  rep.field("command", "train");
  report_quantizer(rep, cfg.quantizer);
  rep.field("config.scope", q.scope);
  for (std::size_t i = 0; i < codebooks.size(); ++i) {
    const std::size_t l = cfg.codebook_scope == CodebookScope::per_layer ? i : i / cfg.kv_heads;
    const auto h = cfg.codebook_scope == CodebookScope::per_layer
                       ? std::nullopt
                       : std::optional<std::size_t>(i % cfg.kv_heads);
    const fs::path path = fs::path(out_dir) / codebook_file(l, h);
    write_codebook(path, codebooks[i]);
    const std::string tag = h ? fmt::format("codebook.l{}.h{}", l, *h) : fmt::format("codebook.l{}", l);
    rep.field(tag + ".file", path.string());
    rep.field(tag + ".inertia", codebooks[i].inertia());
  }
  return kOk;
}

struct RunOptions {
  DataOptions data;
  QuantOptions quant;
  std::string codebooks;
  double tau = 0.9;
  std::size_t recent_window = 0;
  bool no_quantize = false;
  bool renormalize = false;
  std::string pipeline = "overlapped";
  std::string out_dir;
};

EngineConfig engine_config(const Dataset& ds, const RunOptions& o) {
  EngineConfig cfg;
  cfg.layers = ds.layers;
  cfg.q_heads = ds.q_heads;
  cfg.kv_heads = ds.kv_heads;
  cfg.d = ds.d;
  cfg.tau = o.tau;
  cfg.quantizer = to_quantizer(o.quant, ds.d);
  cfg.recent_window = o.recent_window;
  cfg.quantize_keys = !o.no_quantize;
  cfg.renormalize = o.renormalize;
  cfg.codebook_scope = to_scope(o.quant.scope);
  cfg.validate();
  return cfg;
}

int cmd_run(const RunOptions& o, bool kv, std::ostream& out) {
  const Dataset ds = obtain_dataset(o.data);
  const EngineConfig cfg = engine_config(ds, o);
  std::vector<Codebook> codebooks;
  if (cfg.quantize_keys) {
    codebooks = o.codebooks.empty() ? train_engine_codebooks(ds.keys, cfg)
                                    : load_codebooks(o.codebooks, cfg);
  }
  const Pipelining mode =
      o.pipeline == "sequential" ? Pipelining::sequential : Pipelining::overlapped;
  const SessionResult r = run_session(ds, cfg, codebooks, mode);

  std::ostringstream text;
  Report rep(text, kv);
  rep.field("command", "run");
  rep.field("config.layers", std::uint64_t{cfg.layers});
  rep.field("config.q_heads", std::uint64_t{cfg.q_heads});
  rep.field("config.kv_heads", std::uint64_t{cfg.kv_heads});
  rep.field("config.n", std::uint64_t{ds.n});
  rep.field("config.steps", std::uint64_t{ds.steps()});
  rep.field("config.tau", cfg.tau);
  rep.field("config.quantize_keys", cfg.quantize_keys ? "true" : "false");
  rep.field("config.recent_window", std::uint64_t{cfg.recent_window});
  rep.field("config.renormalize", cfg.renormalize ? "true" : "false");
  rep.field("config.pipeline", o.pipeline);
  if (cfg.quantize_keys) {
    report_quantizer(rep, cfg.quantizer);
    rep.field("config.scope", o.quant.scope);
    rep.field("config.codebooks", o.codebooks.empty() ? "trained-in-process" : o.codebooks);
  }
  rep.heading("accuracy vs dense attention");
  rep.field("max_rel_error", r.max_rel_error);
  rep.field("mean_rel_error", r.mean_rel_error);
  if (cfg.quantize_keys) {
    double qerr = 0.0;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      for (std::size_t h = 0; h < cfg.kv_heads; ++h) {
        const Codebook& cb = cfg.codebook_scope == CodebookScope::per_layer
                                 ? codebooks[l]
                                 : codebooks[l * cfg.kv_heads + h];
        qerr += quantization_error(ds.keys[l][h], cb);
      }
    }
    rep.field("quant_error", qerr / static_cast<double>(cfg.layers * cfg.kv_heads));
  }
  rep.heading("selection");
  for (std::size_t l = 0; l < r.layer_selection_ratio.size(); ++l) {
    rep.field(fmt::format("layer.{}.selection_ratio", l), r.layer_selection_ratio[l]);
  }
  rep.field("mean_selection_ratio", r.mean_selection_ratio);
  rep.heading("transfer ledger");
  rep.field("ledger.messages", r.ledger.messages);
  rep.field("ledger.bytes_weights", r.ledger.bytes_weights);
  rep.field("ledger.bytes_indices", r.ledger.bytes_indices);
  const auto rec = reconcile_ledger(r.ledger, r.predicted_weight_bytes, 1e-3);
  rep.field("comm.predicted_bytes", rec.predicted_bytes);
  rep.field("comm.relative_deviation", rec.relative_deviation);
  rep.field("comm.within_tolerance", rec.within_tolerance ? "true" : "false");
  rep.heading("memory budget");
  const auto budget = memory_budget(
      cfg.d, cfg.quantize_keys ? std::optional<std::size_t>(cfg.quantizer.g) : std::nullopt, true);
  rep.field("budget.key", pct(budget.key_budget_fraction));
  rep.field("budget.value", pct(budget.value_budget_fraction));
  rep.field("budget.total", pct(budget.total_fraction));
  rep.field("budget.element_bytes", std::uint64_t{budget.element_bytes});
  rep.field("budget.index_bytes", std::uint64_t{budget.index_bytes});
  out << text.str();

  if (!o.out_dir.empty()) {
    fs::create_directories(o.out_dir);
    std::vector<float> flat;
    for (const auto& step : r.outputs) {
      for (const auto& block : step) flat.insert(flat.end(), block.data.begin(), block.data.end());
    }
    write_atomically(fs::path(o.out_dir) / "outputs.hcat",
                     TensorDump::from_floats({ds.steps(), ds.layers, ds.q_heads, ds.d}, std::move(flat)));
    write_text_atomically(fs::path(o.out_dir) / "report.txt", text.str());
  }
  return kOk;
}

struct SweepOptions {
  RunOptions run;
  std::vector<double> taus;
  std::vector<std::size_t> cs;
  std::vector<std::size_t> gs;
};

int cmd_sweep(const SweepOptions& o, bool kv, std::ostream& out) {
  const Dataset ds = obtain_dataset(o.run.data);
  const std::vector<double> taus = o.taus.empty() ? std::vector<double>{o.run.tau} : o.taus;
  const std::vector<std::size_t> cs = o.cs.empty() ? std::vector<std::size_t>{o.run.quant.c} : o.cs;
  const std::vector<std::size_t> gs =
      o.gs.empty() ? std::vector<std::size_t>{resolve_groups(o.run.quant.g, ds.d)} : o.gs;

  std::vector<std::vector<std::string>> rows;
  for (std::size_t g : gs) {
    for (std::size_t c : cs) {
      RunOptions cell = o.run;
      cell.quant.g = g;
      cell.quant.c = c;
      EngineConfig cfg = engine_config(ds, cell);
      // One codebook set per (g, c) cell, reused across every tau.
      std::vector<Codebook> codebooks;
      double qerr = 0.0;
      if (cfg.quantize_keys) {
        codebooks = train_engine_codebooks(ds.keys, cfg);
        for (std::size_t l = 0; l < cfg.layers; ++l) {
          for (std::size_t h = 0; h < cfg.kv_heads; ++h) {
            const Codebook& cb = cfg.codebook_scope == CodebookScope::per_layer
                                     ? codebooks[l]
                                     : codebooks[l * cfg.kv_heads + h];
            qerr += quantization_error(ds.keys[l][h], cb);
          }
        }
        qerr /= static_cast<double>(cfg.layers * cfg.kv_heads);
      }
      const auto budget = memory_budget(
          ds.d, cfg.quantize_keys ? std::optional<std::size_t>(g) : std::nullopt, true);
      for (double tau : taus) {
        cfg.tau = tau;
        cfg.validate();
        const SessionResult r = run_session(ds, cfg, codebooks, Pipelining::overlapped);
        std::vector<std::string> row = {
            fmt::format("{:g}", tau),
            cfg.quantize_keys ? std::to_string(g) : "-",
            cfg.quantize_keys ? std::to_string(c) : "-",
            fmt::format("{:.6g}", qerr),
            fmt::format("{:.6g}", r.mean_rel_error),
            fmt::format("{:.6g}", r.max_rel_error),
            fmt::format("{:.6g}", r.mean_selection_ratio),
            pct(budget.key_budget_fraction),
            pct(budget.total_fraction)};
        if (!o.run.out_dir.empty()) {
          fs::create_directories(o.run.out_dir);
          std::ostringstream cell_text;
          Report cell_rep(cell_text, true);
          const std::vector<std::string> names = {"tau", "g", "c", "quant_error", "mean_rel_error",
                                                  "max_rel_error", "selection_ratio",
                                                  "budget_key", "budget_total"};
          for (std::size_t i = 0; i < names.size(); ++i) cell_rep.field(names[i], row[i]);
          write_text_atomically(
              fs::path(o.run.out_dir) / fmt::format("cell_g{}_c{}_tau{:g}.txt", g, c, tau),
              cell_text.str());
        }
        rows.push_back(std::move(row));
      }
    }
  }
  Report rep(out, kv);
  rep.field("command", "sweep");
  rep.field("config.layers", std::uint64_t{ds.layers});
  rep.field("config.q_heads", std::uint64_t{ds.q_heads});
  rep.field("config.kv_heads", std::uint64_t{ds.kv_heads});
  rep.field("config.n", std::uint64_t{ds.n});
  rep.field("config.d", std::uint64_t{ds.d});
  rep.field("config.steps", std::uint64_t{ds.steps()});
  rep.field("config.quantize_keys", o.run.no_quantize ? "false" : "true");
  rep.field("config.recent_window", std::uint64_t{o.run.recent_window});
  rep.field("config.train_seed", std::uint64_t{o.run.quant.seed});
  rep.field("config.restarts", std::uint64_t{o.run.quant.restarts});
  rep.field("config.max_iters", std::uint64_t{o.run.quant.max_iters});
  rep.heading("sweep");
  rep.table({"tau", "g", "c", "quant_error", "mean_rel_error", "max_rel_error", "selection_ratio",
             "budget_key", "budget_total"},
            rows);
  return kOk;
}

struct ReportOptions {
  std::size_t d = 128;
  std::size_t g = 0;
  bool offload = false;
  bool comm = false;
  bool cost = false;
  double n = 1e6;
  double layers = 32;
  double heads = 8;
  double frac = 0.2;
  double bytes = 2;
  std::size_t c = 256;
};

int cmd_report(const ReportOptions& o, bool kv, std::ostream& out) {
  Report rep(out, kv);
  rep.field("command", "report");
  rep.heading("memory budget");
  const auto b = memory_budget(o.d, o.g == 0 ? std::nullopt : std::optional<std::size_t>(o.g),
                               o.offload);
  rep.field("config.d", std::uint64_t{o.d});
  rep.field("config.g", o.g == 0 ? std::string("none") : std::to_string(o.g));
  rep.field("config.offload", o.offload ? "true" : "false");
  rep.field("budget.key", pct(b.key_budget_fraction));
  rep.field("budget.value", pct(b.value_budget_fraction));
  rep.field("budget.total", pct(b.total_fraction));
  rep.field("budget.element_bytes", std::uint64_t{b.element_bytes});
  rep.field("budget.index_bytes", std::uint64_t{b.index_bytes});
  if (o.comm) {
    rep.heading("communication");
    const double bytes = comm_overhead(o.n, o.layers, o.heads, o.frac, o.bytes);
    rep.field("comm.n", fmt::format("{:.0f}", o.n));
    rep.field("comm.layers", fmt::format("{:g}", o.layers));
    rep.field("comm.heads", fmt::format("{:g}", o.heads));
    rep.field("comm.retain_fraction", fmt::format("{:g}", o.frac));
    rep.field("comm.bytes_per_score", fmt::format("{:g}", o.bytes));
    rep.field("comm.bytes", fmt::format("{:.0f}", bytes));
    rep.field("comm.megabytes", fmt::format("{:g}", bytes / kBytesPerMegabyte));
  }
  if (o.cost) {
    rep.heading("compute cost");
    const std::uint64_t g = o.g == 0 ? o.d / 2 : o.g;
    const auto m = compute_cost(static_cast<std::uint64_t>(o.n), o.d, o.c, g);
    rep.field("cost.per_query.mults_exact", m.per_query.mults_exact);
    rep.field("cost.per_query.adds_exact", m.per_query.adds_exact);
    rep.field("cost.per_query.mults_approx", m.per_query.mults_approx);
    rep.field("cost.per_query.adds_approx", m.per_query.adds_approx);
    rep.field("cost.full_pass.mults_exact", m.full_pass.mults_exact);
    rep.field("cost.full_pass.adds_exact", m.full_pass.adds_exact);
    rep.field("cost.full_pass.mults_approx", m.full_pass.mults_approx);
    rep.field("cost.full_pass.adds_approx", m.full_pass.adds_approx);
  }
  return kOk;
}

void add_data_options(CLI::App* cmd, DataOptions& d) {
  cmd->add_option("--keys", d.keys, "Key tensor [L,H,n,d] or [n,d]");
  cmd->add_option("--values", d.values, "Value tensor, same shape as keys");
  cmd->add_option("--queries", d.queries, "Query tensor [steps,L,H_q,d] or [steps,d]");
  add_gen_options(cmd, d.synth);
}

void add_run_options(CLI::App* cmd, RunOptions& r) {
  add_data_options(cmd, r.data);
  add_quant_options(cmd, r.quant);
  cmd->add_option("--codebooks", r.codebooks, "Directory of trained codebooks");
  cmd->add_option("--tau", r.tau, "Eviction threshold")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  cmd->add_option("--recent-window", r.recent_window, "Newest keys kept unquantized")
      ->capture_default_str();
  cmd->add_flag("--no-quantize", r.no_quantize, "Value offloading only; keys stay dense");
  cmd->add_flag("--renormalize", r.renormalize, "Rescale kept weights to sum to 1");
  cmd->add_option("--pipeline", r.pipeline, "Layer scheduling")
      ->check(CLI::IsMember({"sequential", "overlapped"}))->capture_default_str();
  cmd->add_option("--out", r.out_dir, "Directory for outputs and the report");
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"hcattn: approximate attention with quantized keys and offloaded values"};
  app.set_config("--config", "", "Read options from a TOML/INI file");
  app.require_subcommand(1);
  app.fallthrough();
  std::string format = "text";
  app.add_option("--format", format, "Report format")
      ->check(CLI::IsMember({"text", "kv"}))->capture_default_str();

  GenOptions gen_opt;
  std::string gen_out = ".";
  auto* gen = app.add_subcommand("gen", "Generate synthetic keys, values and queries");
  add_gen_options(gen, gen_opt);
  gen->add_option("--out", gen_out, "Output directory")->capture_default_str();

  std::string train_keys, train_out = ".";
  QuantOptions train_q;
  auto* train = app.add_subcommand("train", "Train key codebooks");
  train->add_option("--keys", train_keys, "Key tensor")->required();
  add_quant_options(train, train_q);
  train->add_option("--out", train_out, "Output directory")->capture_default_str();

  RunOptions run_opt;
  auto* run_cmd = app.add_subcommand("run", "Decode every query and compare with dense attention");
  add_run_options(run_cmd, run_opt);

  SweepOptions sweep_opt;
  auto* sweep = app.add_subcommand("sweep", "Ablation grid over tau, c and g");
  add_run_options(sweep, sweep_opt.run);
  sweep->add_option("--taus", sweep_opt.taus, "Thresholds to sweep")->check(CLI::Range(0.0, 1.0));
  sweep->add_option("--cs", sweep_opt.cs, "Centroid counts to sweep")->check(CLI::Range(1, 65536));
  sweep->add_option("--gs", sweep_opt.gs, "Group counts to sweep")->check(CLI::PositiveNumber);

  ReportOptions rep_opt;
  auto* report = app.add_subcommand("report", "Closed-form memory, compute and transfer budgets");
  report->add_option("--d", rep_opt.d, "Head dimension")->check(CLI::PositiveNumber)->capture_default_str();
  report->add_option("--g", rep_opt.g, "Key groups (omit for no quantization)");
  report->add_flag("--offload", rep_opt.offload, "Values offloaded to the host");
  report->add_flag("--comm", rep_opt.comm, "Include the transfer estimate");
  report->add_flag("--cost", rep_opt.cost, "Include operation counts");
  report->add_option("--n", rep_opt.n, "Sequence length")->check(CLI::NonNegativeNumber)->capture_default_str();
  report->add_option("--L", rep_opt.layers, "Layers")->check(CLI::NonNegativeNumber)->capture_default_str();
  report->add_option("--H", rep_opt.heads, "Heads")->check(CLI::NonNegativeNumber)->capture_default_str();
  report->add_option("--frac", rep_opt.frac, "Retained fraction")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  report->add_option("--bytes", rep_opt.bytes, "Bytes per score")->check(CLI::NonNegativeNumber)->capture_default_str();
  report->add_option("--c", rep_opt.c, "Centroids (for --cost)")->check(CLI::Range(1, 65536))->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsageError;
  }

  const bool kv = format == "kv";
  try {
    if (gen->parsed()) return cmd_gen(gen_opt, gen_out, kv, out);
    if (train->parsed()) return cmd_train(train_keys, train_q, train_out, kv, out);
    if (run_cmd->parsed()) return cmd_run(run_opt, kv, out);
    if (sweep->parsed()) return cmd_sweep(sweep_opt, kv, out);
    if (report->parsed()) return cmd_report(rep_opt, kv, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kUsageError;
}

}  // namespace hcattn::cli
