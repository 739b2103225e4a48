// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "lisa/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "lisa/analyzer.hpp"
#include "lisa/cost.hpp"
#include "lisa/inference.hpp"
#include "lisa/io.hpp"
#include "lisa/training.hpp"

namespace lisa {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::string ckpt;
  std::string data;
  std::uint64_t seed = 0;
  Index steps = -1;
  double beta = 0.25;
  Index rank = 0;
  std::string variant;
  std::string nf = "auto";
  std::string out;

  std::string preset;
  Index length = 3072;
  Index l_in = 2048;
  Index l_out = 1024;
  Index batch = 0;
  Index n_lisa = 0;
  std::string context = "in+out";
  Index seq_len = 0;
  double lr = 0;
  Index warmup = -1;
  Index windows = 16;
  Index eval_every = 0;
  std::string strategy = "all";
  std::string pattern = "both";
  std::string log_base = "e";
  std::string prompt;
  Index n_tokens = 32;
  std::string kd_target = "pre";
  std::string grid = "32x32,64x64,96x96";
  Index runs = 10;
  double budget_mib = 64;
};

// "synthetic:N" or "synthetic:N:SEED"; the text seed is independent of --seed
// so every command sees the same corpus.
Corpus load_corpus(const std::string& spec) {
  if (spec.empty()) throw ConfigError("--data is required");
  const std::string prefix = "synthetic:";
  if (spec.rfind(prefix, 0) == 0) {
    const std::string rest = spec.substr(prefix.size());
    const std::size_t colon = rest.find(':');
    const std::size_t n = std::stoull(rest.substr(0, colon));
    const std::uint64_t seed = colon == std::string::npos ? 0 : std::stoull(rest.substr(colon + 1));
    return Corpus(synthetic_text(n, seed));
  }
  return Corpus::from_file(spec);
}

Checkpoint load_required(const Options& o) {
  if (o.ckpt.empty()) throw ConfigError("--ckpt is required");
  return load_checkpoint(o.ckpt);
}

fs::path out_dir(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  fs::create_directories(o.out);
  return fs::path(o.out);
}

void apply_lisa_overrides(SharingConfig& s, const Options& o) {
  for (auto& l : s.layers) {
    if (!l.lisa) continue;
    if (o.rank > 0) l.lisa->r_q = l.lisa->r_k = o.rank;
    if (!o.variant.empty()) l.lisa->variant = parse_lisa_variant(o.variant);
  }
}

std::vector<std::pair<std::string, std::string>> repro_meta(const Model& m, std::uint64_t seed) {
  return {{"config_hash", config_hash(m.config, m.sharing)}, {"seed", std::to_string(seed)}};
}

Json repro_json(const Model& m, std::uint64_t seed) {
  return Json{{"config_hash", config_hash(m.config, m.sharing)}, {"seed", seed}};
}

std::string cmdline(const std::vector<std::string>& argv) {
  std::string s;
  for (std::size_t i = 1; i < argv.size(); ++i) s += (i > 1 ? " " : "") + argv[i];
  return s;
}

CsvTable train_log_table(const TrainLog& log, const Model& m, std::uint64_t seed) {
  CsvTable t{repro_meta(m, seed), {"step", "lm", "kd", "combined", "lr"}, {}};
  for (const auto& s : log.steps) {
    t.rows.push_back({std::to_string(s.step), format_double(s.lm), format_double(s.kd), format_double(s.combined),
                      format_double(s.lr)});
  }
  return t;
}

CsvTable eval_log_table(const TrainLog& log, const Model& m, std::uint64_t seed) {
  CsvTable t{repro_meta(m, seed), {"step", "eval_loss"}, {}};
  for (const auto& e : log.evals) t.rows.push_back({std::to_string(e.step), format_double(e.loss)});
  return t;
}

StepCallback progress(std::ostream& err, Index total) {
  return [&err, total](const StepLog& s) {
    if (s.step % 50 == 0 || s.step + 1 == total) {
      err << "step " << s.step << " lm " << s.lm << " kd " << s.kd << " loss " << s.combined << "\n";
    }
  };
}

TrainConfig train_config(const Options& o, TrainMode mode) {
  TrainConfig tc;
  tc.mode = mode;
  tc.seed = o.seed;
  tc.beta = o.beta;
  tc.batch_size = o.batch > 0 ? o.batch : 16;
  tc.seq_len = o.seq_len > 0 ? o.seq_len : 256;
  tc.total_steps = o.steps >= 0 ? o.steps : 1000;
  if (o.lr > 0) tc.lr = o.lr;
  tc.warmup_steps = std::min(o.warmup >= 0 ? o.warmup : Index{150}, tc.total_steps);
  tc.eval_every = o.eval_every;
  tc.eval_windows = o.windows;
  if (o.kd_target == "post") {
    tc.kd_target = KdTarget::post_softmax;
  } else if (o.kd_target != "pre") {
    throw ConfigError("--kd-target must be pre or post");
  }
  return tc;
}

int cmd_pretrain(const Options& o, const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  const ModelConfig mc = toy_preset(o.preset.empty() ? "tiny-6L" : o.preset);
  Model model = Model::create(mc, o.seed);
  SharingConfig sharing = o.config.empty() ? SharingConfig::all_standard(mc.n_layers)
                                           : load_sharing_config(o.config, mc.n_layers);
  apply_lisa_overrides(sharing, o);
  model.install_sharing(sharing, o.seed + 1);
  const Corpus corpus = load_corpus(o.data);
  const TrainConfig tc = train_config(o, TrainMode::pretrain);
  const fs::path dir = out_dir(o);
  const TrainLog log = pretrain(model, corpus, tc, progress(err, tc.total_steps));
  save_checkpoint(model, (dir / "model.json").string(), Provenance{o.seed, tc.total_steps, hex64(corpus.hash()), cmdline(argv)});
  write_file((dir / "train_log.csv").string(), train_log_table(log, model, o.seed).str());
  if (!log.evals.empty()) write_file((dir / "eval_log.csv").string(), eval_log_table(log, model, o.seed).str());
  out << "pretrained " << tc.total_steps << " steps; final train loss "
      << (log.steps.empty() ? std::nan("") : log.steps.back().lm) << "\n";
  out << "checkpoint " << (dir / "model.json").string() << "\n";
  return kExitOk;
}

int cmd_uptrain(const Options& o, const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  Checkpoint ck = load_required(o);
  Model& model = ck.model;
  if (o.config.empty()) throw ConfigError("--config (sharing config with lisa layers) is required");
  SharingConfig sharing = load_sharing_config(o.config, model.config.n_layers);
  apply_lisa_overrides(sharing, o);
  model.install_sharing(sharing, o.seed + 1);
  const TrainConfig tc = train_config(o, TrainMode::uptrain);
  const fs::path dir = out_dir(o);
  TrainLog log;
  if (tc.total_steps > 0) {
    const Corpus corpus = load_corpus(o.data);
    log = uptrain(model, corpus, tc, progress(err, tc.total_steps));
    ck.provenance.corpus_hash = hex64(corpus.hash());
  }
  ck.provenance.seed = o.seed;
  ck.provenance.steps = tc.total_steps;
  ck.provenance.command = cmdline(argv);
  save_checkpoint(model, (dir / "model.json").string(), ck.provenance);
  write_file((dir / "uptrain_log.csv").string(), train_log_table(log, model, o.seed).str());
  out << "uptrained " << tc.total_steps << " steps over " << model.sharing.layers_with(AttentionMode::lisa).size()
      << " lisa layers\n";
  out << "base checksum " << hex64(model.base_checksum()) << "\n";
  out << "checkpoint " << (dir / "model.json").string() << "\n";
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  const Checkpoint ck = load_required(o);
  const Corpus corpus = load_corpus(o.data);
  const auto windows = corpus.windows(Split::heldout, o.seq_len > 0 ? o.seq_len : 256, o.windows);
  SharingConfig sharing = ck.model.sharing;
  if (!o.config.empty()) sharing = load_sharing_config(o.config, ck.model.config.n_layers);
  const PerplexityResult r = eval_perplexity(ck.model, sharing, windows);
  out << "perplexity " << format_double(r.perplexity) << "\nmean_loss " << format_double(r.mean_loss)
      << "\npredictions " << r.predictions << "\n";
  if (!o.out.empty()) {
    Json j = repro_json(ck.model, o.seed);
    j["perplexity"] = r.perplexity;
    j["mean_loss"] = r.mean_loss;
    j["predictions"] = r.predictions;
    write_file((out_dir(o) / "eval.json").string(), j.dump(2) + "\n");
  }
  return kExitOk;
}

int cmd_analyze(const Options& o, std::ostream& out) {
  const Checkpoint ck = load_required(o);
  const Corpus corpus = load_corpus(o.data);
  const auto windows = corpus.windows(Split::heldout, o.seq_len > 0 ? o.seq_len : 128, o.windows);
  const LogBase base = parse_log_base(o.log_base);
  const SimilarityReport r = analyze(ck.model, windows, o.seed, base);
  const auto meta = repro_meta(ck.model, o.seed);
  const fs::path dir = out_dir(o);

  CsvTable js{meta, {"layer"}, {}};
  for (Index b = 0; b < r.layer_js.cols(); ++b) js.columns.push_back(std::to_string(b));
  for (Index a = 0; a < r.layer_js.rows(); ++a) {
    std::vector<std::string> row{std::to_string(a)};
    for (Index b = 0; b < r.layer_js.cols(); ++b) row.push_back(format_double(r.layer_js(a, b)));
    js.rows.push_back(std::move(row));
  }
  write_file((dir / "layer_js.csv").string(), js.str());

  std::vector<std::string> strategies{"direct", "random", "most_similar"};
  if (o.strategy != "all") strategies = {to_string(parse_match_strategy(o.strategy))};
  CsvTable hm{meta, {"layer_a", "layer_b"}, {}};
  for (const auto& s : strategies) hm.columns.push_back(s);
  for (const auto& m : r.matching) {
    std::vector<std::string> row{std::to_string(m.layer_a), std::to_string(m.layer_b)};
    for (const auto& s : strategies) {
      row.push_back(format_double(s == "direct" ? m.direct : s == "random" ? m.random : m.most_similar));
    }
    hm.rows.push_back(std::move(row));
  }
  write_file((dir / "head_matching.csv").string(), hm.str());

  CsvTable cs{meta, {"submodule"}, {}};
  for (std::size_t k = 0; k + 1 < static_cast<std::size_t>(r.layer_js.rows()); ++k) {
    cs.columns.push_back(std::to_string(k) + "-" + std::to_string(k + 1));
  }
  for (const auto& c : r.cosine) {
    std::vector<std::string> row{c.submodule};
    for (double v : c.values) row.push_back(format_double(v));
    cs.rows.push_back(std::move(row));
  }
  write_file((dir / "cosine.csv").string(), cs.str());

  Json j = repro_json(ck.model, o.seed);
  j["kind"] = "analysis";
  j["samples"] = r.samples;
  j["log_base"] = to_string(base);
  j["layer_js"] = Json::array();
  for (Index a = 0; a < r.layer_js.rows(); ++a) {
    std::vector<double> row(r.layer_js.row(a).data(), r.layer_js.row(a).data() + r.layer_js.cols());
    j["layer_js"].push_back(row);
  }
  for (const auto& m : r.matching) {
    j["matching"].push_back(
        {{"layer_a", m.layer_a}, {"layer_b", m.layer_b}, {"direct", m.direct}, {"random", m.random},
         {"most_similar", m.most_similar}});
  }
  write_file((dir / "analysis.json").string(), j.dump(2) + "\n");
  out << "analyzed " << r.samples << " windows; wrote layer_js.csv, head_matching.csv, cosine.csv, analysis.json\n";
  return kExitOk;
}

int cmd_deviate(const Options& o, std::ostream& out) {
  const Checkpoint ck = load_required(o);
  const Corpus corpus = load_corpus(o.data);
  const auto windows = corpus.windows(Split::heldout, o.seq_len > 0 ? o.seq_len : 256, o.windows);
  std::vector<AttentionMode> patterns;
  if (o.pattern == "both" || o.pattern == "ds") patterns.push_back(AttentionMode::ds);
  if (o.pattern == "both" || o.pattern == "avg") patterns.push_back(AttentionMode::avg);
  if (patterns.empty()) throw ConfigError("--pattern must be ds, avg or both");
  CsvTable t{repro_meta(ck.model, o.seed), {"pattern", "layer", "perplexity", "baseline"}, {}};
  Json j = repro_json(ck.model, o.seed);
  j["kind"] = "deviation";
  for (AttentionMode p : patterns) {
    const DeviationResult r = deviation_sweep(ck.model, windows, p);
    Json pj{{"pattern", std::string(to_string(p))}, {"baseline", r.baseline}, {"layers", r.layers},
            {"perplexity", r.perplexity}};
    j["sweeps"].push_back(pj);
    for (std::size_t k = 0; k < r.layers.size(); ++k) {
      t.rows.push_back({std::string(to_string(p)), std::to_string(r.layers[k]), format_double(r.perplexity[k]),
                        format_double(r.baseline)});
      out << to_string(p) << " layer " << r.layers[k] << " ppl " << r.perplexity[k] << " (baseline " << r.baseline
          << ")\n";
    }
  }
  const fs::path dir = out_dir(o);
  write_file((dir / "deviation.csv").string(), t.str());
  write_file((dir / "deviation.json").string(), j.dump(2) + "\n");
  return kExitOk;
}

bool resolve_nf(const Options& o, const Model& m, Index prompt_length) {
  if (o.nf == "on") return true;
  if (o.nf == "off") return false;
  if (o.nf == "auto") return nf_auto(m, prompt_length);
  throw ConfigError("--nf must be auto, on or off");
}

int cmd_generate(const Options& o, std::ostream& out) {
  const Checkpoint ck = load_required(o);
  const std::vector<int> prompt = tokenize(o.prompt.empty() ? std::string("The ") : o.prompt);
  const bool nf = resolve_nf(o, ck.model, static_cast<Index>(prompt.size()));
  const std::vector<int> tokens = generate(ck.model, prompt, o.n_tokens, nf);
  out << detokenize(tokens) << "\n";
  return kExitOk;
}

std::vector<BenchShape> parse_grid(const std::string& text) {
  std::vector<BenchShape> grid;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto x = item.find('x');
    if (x == std::string::npos) throw ConfigError("grid entries look like 64x32 (input x output)");
    grid.push_back({std::stol(item.substr(0, x)), std::stol(item.substr(x + 1))});
  }
  if (grid.empty()) throw ConfigError("empty bench grid");
  return grid;
}

int cmd_bench(const Options& o, std::ostream& out) {
  const Checkpoint ck = load_required(o);
  const auto grid = parse_grid(o.grid);
  BenchOptions bo;
  bo.runs = o.runs;
  bo.memory_budget_bytes = o.budget_mib * 1024 * 1024;
  if (o.batch > 0) bo.max_batch = o.batch;
  bo.nf = o.nf == "on";
  Model baseline = ck.model;
  baseline.install_sharing(SharingConfig::all_standard(baseline.config.n_layers), 0);
  std::vector<BenchRow> rows = bench(baseline, "baseline", grid, bo);
  if (!ck.model.sharing.layers_with(AttentionMode::lisa).empty() ||
      !ck.model.sharing.layers_with(AttentionMode::ds).empty()) {
    for (auto& r : bench(ck.model, "shared", grid, bo)) rows.push_back(std::move(r));
  }
  CsvTable t{repro_meta(ck.model, o.seed), {"config", "shape", "batch", "tokens_per_s", "latency_s", "flops", "kv_bytes"}, {}};
  for (const auto& r : rows) {
    const std::string shape = std::to_string(r.shape.input) + "x" + std::to_string(r.shape.output);
    t.rows.push_back({r.config, shape, std::to_string(r.batch), format_double(r.tokens_per_s), format_double(r.latency_s),
                      format_double(r.decode_flops_per_token), format_double(r.kv_bytes)});
    out << r.config << " " << shape << " batch " << r.batch << " tokens/s " << r.tokens_per_s << " decode FLOPs/token "
        << r.decode_flops_per_token << "\n";
  }
  if (!o.out.empty()) write_file((out_dir(o) / "bench.csv").string(), t.str());
  return kExitOk;
}

int cmd_cost(const Options& o, std::ostream& out) {
  const ArchShape shape = cost_preset(o.preset.empty() ? "llama-65b" : o.preset);
  const Index batch = o.batch > 0 ? o.batch : 128;
  const Index rank = o.rank > 0 ? o.rank : 20;
  const MemoryReport m = memory_report(shape, o.length, batch, o.n_lisa, rank);
  std::vector<LayerCost> layers(static_cast<std::size_t>(shape.n_layers));
  LisaLayerConfig lc;
  if (!o.variant.empty()) lc.variant = parse_lisa_variant(o.variant);
  for (Index i = 0; i < o.n_lisa; ++i) {
    layers[static_cast<std::size_t>(shape.n_layers - 1 - i)] = LayerCost{AttentionMode::lisa, rank, lc.variant, lc.ffn_hidden};
  }
  if (o.context != "in+out" && o.context != "in") throw ConfigError("--context must be in+out or in");
  const DecodeContext ctx = o.context == "in" ? DecodeContext::input_only : DecodeContext::input_plus_output;
  const FlopsReport f = flops_report(shape, o.l_in, o.l_out, batch, layers, ctx);
  out << std::setprecision(6);
  out << "preset " << shape.name << " l " << o.length << " batch " << batch << "\n";
  out << "KV cache " << format_double(m.kv_gib()) << " GiB\n";
  if (o.n_lisa > 0) {
    out << "lisa layers " << o.n_lisa << " rank " << rank << "\n";
    out << "K savings " << m.k_savings_bytes / kGiB << " GiB; prefill net " << m.prefill_net_bytes / kGiB
        << " GiB; decode net " << m.decode_net_bytes / kGiB << " GiB; break-even l " << m.break_even_length << "\n";
  }
  out << "prefill attention " << f.prefill_attention << " FLOP; prefill FFN " << f.prefill_ffn << " FLOP\n";
  out << "decode attention " << f.decode_attention << " FLOP; decode FFN " << f.decode_ffn << " FLOP (context "
      << f.decode_context << ")\n";
  if (!o.out.empty()) {
    Json j{{"kind", "cost"},
           {"preset", shape.name},
           {"length", o.length},
           {"batch", batch},
           {"n_lisa", o.n_lisa},
           {"rank", rank},
           {"kv_gib", m.kv_gib()},
           {"k_savings_bytes", m.k_savings_bytes},
           {"prefill_net_bytes", m.prefill_net_bytes},
           {"decode_net_bytes", m.decode_net_bytes},
           {"break_even_length", m.break_even_length},
           {"l_in", o.l_in},
           {"l_out", o.l_out},
           {"prefill_attention_flops", f.prefill_attention},
           {"prefill_ffn_flops", f.prefill_ffn},
           {"decode_attention_flops", f.decode_attention},
           {"decode_ffn_flops", f.decode_ffn},
           {"decode_context", f.decode_context},
           {"seed", o.seed}};
    write_file((out_dir(o) / "cost.json").string(), j.dump(2) + "\n");
  }
  return kExitOk;
}

// Markdown table from a CSV file (header lines skipped).
std::string csv_to_markdown(const std::string& text) {
  std::stringstream ss(text);
  std::string line, md;
  bool header = true;
  while (std::getline(ss, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      md += "_" + line.substr(2) + "_  \n";
      continue;
    }
    std::string row = "|";
    std::size_t cols = 0;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      row += " " + cell + " |";
      ++cols;
    }
    md += row + "\n";
    if (header) {
      md += "|";
      for (std::size_t c = 0; c < cols; ++c) md += "---|";
      md += "\n";
      header = false;
    }
  }
  return md;
}

int cmd_report(const Options& o, std::ostream& out) {
  if (o.out.empty()) throw ConfigError("--out (directory with reports) is required");
  if (!fs::is_directory(o.out)) throw InputError("no report directory " + o.out);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(o.out)) {
    if (e.path().extension() == ".csv") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::string md;
  for (const auto& f : files) md += "## " + f.filename().string() + "\n\n" + csv_to_markdown(read_file(f.string())) + "\n";
  write_file((fs::path(o.out) / "report.md").string(), md);
  out << md;
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-layer attention sharing lab", "lisa_lab"};
  app.require_subcommand(1);
  Options o;

  auto common = [&o](CLI::App* c) {
    c->add_option("--seed", o.seed, "Seed for every random draw");
    c->add_option("--out", o.out, "Output directory");
  };
  auto data = [&o](CLI::App* c) {
    c->add_option("--data", o.data, "Raw byte corpus, or synthetic:N[:SEED] for N generated bytes");
    c->add_option("--seq-len", o.seq_len, "Window length in tokens");
    c->add_option("--windows", o.windows, "Held-out windows to evaluate");
  };
  auto train = [&o](CLI::App* c) {
    c->add_option("--steps", o.steps, "Optimizer steps");
    c->add_option("--batch", o.batch, "Sequences per step");
    c->add_option("--lr", o.lr, "Peak learning rate");
    c->add_option("--warmup", o.warmup, "Linear warmup steps");
    c->add_option("--eval-every", o.eval_every, "Held-out evaluation interval (0 disables)");
    c->add_option("--rank", o.rank, "Low-rank width r for lisa layers");
    c->add_option("--variant", o.variant, "Alignment variant")->check(CLI::IsMember({"dl", "sl", "plus"}));
  };

  auto* pre = app.add_subcommand("pretrain", "Train a toy model from scratch");
  common(pre);
  data(pre);
  train(pre);
  pre->add_option("--preset", o.preset, "Toy model preset (tiny-4L, tiny-6L, tiny-12L, tiny-gqa-6L)");
  pre->add_option("--config", o.config, "Sharing config JSON");

  auto* up = app.add_subcommand("uptrain", "Train lisa layers into a frozen checkpoint");
  common(up);
  data(up);
  train(up);
  up->add_option("--ckpt", o.ckpt, "Teacher checkpoint manifest");
  up->add_option("--config", o.config, "Sharing config JSON");
  up->add_option("--beta", o.beta, "Weight of the distillation loss");
  up->add_option("--kd-target", o.kd_target, "Distill pre- or post-softmax scores")->check(CLI::IsMember({"pre", "post"}));

  auto* an = app.add_subcommand("analyze", "Layer and head similarity of attention weights");
  common(an);
  data(an);
  an->add_option("--ckpt", o.ckpt, "Checkpoint manifest");
  an->add_option("--strategy", o.strategy, "Head matching strategy")
      ->check(CLI::IsMember({"all", "direct", "random", "most_similar"}));
  an->add_option("--log-base", o.log_base, "JS divergence log base")->check(CLI::IsMember({"e", "2"}));

  auto* dev = app.add_subcommand("deviate", "Single-layer ds/avg deviation sweep");
  common(dev);
  data(dev);
  dev->add_option("--ckpt", o.ckpt, "Checkpoint manifest");
  dev->add_option("--pattern", o.pattern, "ds, avg or both")->check(CLI::IsMember({"ds", "avg", "both"}));

  auto* ev = app.add_subcommand("eval", "Held-out perplexity");
  common(ev);
  data(ev);
  ev->add_option("--ckpt", o.ckpt, "Checkpoint manifest");
  ev->add_option("--config", o.config, "Evaluate under this sharing config instead");

  auto* gen = app.add_subcommand("generate", "Greedy generation with the KV cache");
  common(gen);
  gen->add_option("--ckpt", o.ckpt, "Checkpoint manifest");
  gen->add_option("--prompt", o.prompt, "Prompt text");
  gen->add_option("--n-tokens", o.n_tokens, "Tokens to generate");
  gen->add_option("--nf", o.nf, "Standard-attention prefill")->check(CLI::IsMember({"auto", "on", "off"}));

  auto* be = app.add_subcommand("bench", "Throughput of the checkpoint against its unshared baseline");
  common(be);
  be->add_option("--ckpt", o.ckpt, "Checkpoint manifest");
  be->add_option("--grid", o.grid, "Shapes as INxOUT,INxOUT,...");
  be->add_option("--runs", o.runs, "Runs averaged per cell");
  be->add_option("--budget-mib", o.budget_mib, "Cache memory budget in MiB");
  be->add_option("--batch", o.batch, "Batch cap");
  be->add_option("--nf", o.nf, "Standard-attention prefill")->check(CLI::IsMember({"auto", "on", "off"}));

  auto* co = app.add_subcommand("cost", "Analytic memory and FLOP report");
  common(co);
  co->add_option("--preset", o.preset, "opt-175b, llama-65b, llama3-70b, llama2-7b, llama3-8b");
  co->add_option("--l", o.length, "Cached sequence length for the memory report");
  co->add_option("--l-in", o.l_in, "Prompt length");
  co->add_option("--l-out", o.l_out, "Generated length");
  co->add_option("--batch", o.batch, "Batch size");
  co->add_option("--n-lisa", o.n_lisa, "Number of lisa layers");
  co->add_option("--rank", o.rank, "Low-rank width r");
  co->add_option("--variant", o.variant, "Alignment variant")->check(CLI::IsMember({"dl", "sl", "plus"}));
  co->add_option("--context", o.context, "Decode context: in+out or in")->check(CLI::IsMember({"in+out", "in"}));

  auto* rep = app.add_subcommand("report", "Render the CSV reports of a directory as Markdown tables");
  common(rep);

  std::vector<const char*> cargv;
  for (const auto& a : argv) cargv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargv.size()), cargv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  try {
    if (pre->parsed()) return cmd_pretrain(o, argv, out, err);
    if (up->parsed()) return cmd_uptrain(o, argv, out, err);
    if (an->parsed()) return cmd_analyze(o, out);
    if (dev->parsed()) return cmd_deviate(o, out);
    if (ev->parsed()) return cmd_eval(o, out);
    if (gen->parsed()) return cmd_generate(o, out);
    if (be->parsed()) return cmd_bench(o, out);
    if (co->parsed()) return cmd_cost(o, out);
    if (rep->parsed()) return cmd_report(o, out);
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const InvariantError& e) {
    err << "invariant violated: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ContractError& e) {
    err << "contract violated: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    err << "error: bad number: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitUsage;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace lisa
