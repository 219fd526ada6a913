// Command-line driver for the full pipeline: corpus/dataset generation, base
// pre-training, the two adaptation stages, evaluation, and gate inspection.
//
// Exit codes: 0 success, 1 numeric training abort, 2 usage/config/IO errors.
// PILL_THREADS is accepted for interface stability but execution is
// single-threaded and deterministic.

#include <cstdlib>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pill/checkpoint.hpp"
#include "pill/config.hpp"
#include "pill/data.hpp"
#include "pill/model.hpp"
#include "pill/sha256.hpp"
#include "pill/train.hpp"

namespace {

using nlohmann::json;
using namespace pill;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;  // key=value pairs applied on top
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "key=value configuration file");
  cmd->add_option("--set", opts.overrides,
                  "override a config key, e.g. --set stage2.epochs=5");
  cmd->add_option("--seed", opts.seed, "override the config seed");
}

PipelineConfig resolve_config(const CommonOpts& opts) {
  KVConfig kv = opts.config_path.empty() ? KVConfig::from_string("")
                                         : KVConfig::from_file(opts.config_path);
  for (const std::string& kvp : opts.overrides) {
    const auto eq = kvp.find('=');
    if (eq == std::string::npos || eq == 0)
      throw config_error("--set wants key=value, got '" + kvp + "'");
    kv.set(kvp.substr(0, eq), kvp.substr(eq + 1));
  }
  PipelineConfig cfg = PipelineConfig::from_kv(kv);
  if (opts.seed) cfg.seed = *opts.seed;
  return cfg;
}

json config_json(const PipelineConfig& cfg) {
  json stage = [](const TrainStageSpec& s) {
    return json{{"epochs", s.epochs},
                {"lr", s.base_lr},
                {"batch", s.batch_size},
                {"seq_len", s.seq_len},
                {"wrong_answer_prob", s.wrong_answer_prob}};
  }(cfg.stage1);
  json j;
  j["model"] = {{"d_model", cfg.model.d_model},
                {"n_layers", cfg.model.n_layers},
                {"n_heads", cfg.model.n_heads},
                {"d_ffn", cfg.model.d_ffn},
                {"max_seq_len", cfg.model.max_seq_len},
                {"d_vis", cfg.model.d_vis},
                {"k_vision", cfg.model.queries_per_image},
                {"adapter_dim", cfg.model.adapter_dim}};
  j["data"] = {{"jitter", cfg.data.jitter},
               {"test_tuples", cfg.data.test_tuples},
               {"n_samples", cfg.n_samples}};
  j["pretrain"] = {{"epochs", cfg.pretrain.epochs},
                   {"lr", cfg.pretrain.lr},
                   {"batch", cfg.pretrain.batch_size},
                   {"corpus_sentences", cfg.pretrain.corpus_sentences}};
  j["stage1"] = stage;
  j["stage2"] = json{{"epochs", cfg.stage2.epochs},
                     {"lr", cfg.stage2.base_lr},
                     {"batch", cfg.stage2.batch_size},
                     {"seq_len", cfg.stage2.seq_len},
                     {"wrong_answer_prob", cfg.stage2.wrong_answer_prob}};
  j["optim"] = {{"weight_decay", cfg.weight_decay},
                {"warmup_frac", cfg.warmup_frac},
                {"clip_norm", cfg.clip_norm}};
  j["seed"] = cfg.seed;
  return j;
}

json file_entry(const std::string& role, const std::string& path) {
  return json{{"role", role}, {"path", path}, {"sha256", sha256_file_hex(path)}};
}

// Every producing command drops a sibling manifest recording what ran, the
// resolved configuration, and content hashes of everything read and written.
void write_manifest(const std::string& command, const PipelineConfig& cfg,
                    const std::vector<json>& inputs,
                    const std::vector<json>& outputs,
                    const std::string& out_path) {
  json m;
  m["command"] = command;
  m["seed"] = cfg.seed;
  m["config"] = config_json(cfg);
  m["inputs"] = inputs;
  m["outputs"] = outputs;
  const std::string path = out_path + ".manifest.json";
  std::ofstream out(path);
  if (!out) throw std::runtime_error("manifest: cannot write " + path);
  out << m.dump(2) << '\n';
  if (!out) throw std::runtime_error("manifest: write failed for " + path);
}

TrainHyper hyper_of(const PipelineConfig& cfg) {
  TrainHyper h;
  h.weight_decay = cfg.weight_decay;
  h.warmup_frac = cfg.warmup_frac;
  h.clip_norm = cfg.clip_norm;
  return h;
}

PillModel fresh_model(const PipelineConfig& cfg, const Vocabulary& vocab) {
  ModelConfig mc = cfg.model;
  mc.vocab_size = vocab.size();
  Rng rng(cfg.seed);
  return PillModel::init(mc, rng);
}

// Data-side settings must describe the features the checkpoint was built for.
DataConfig data_config_for(const PillModel& model, const PipelineConfig& cfg) {
  DataConfig d = cfg.data;
  if (d.d_vis != model.cfg.d_vis || d.k_vision != model.cfg.queries_per_image)
    throw config_error(
        "config: d_vis/k_vision disagree with the checkpoint architecture");
  return d;
}

void print_metrics(const EvalMetrics& m) {
  std::cout << "samples   " << m.n << "\n";
  std::cout << "accuracy  " << m.accuracy << "\n";
  std::cout << "chance    " << m.chance << "\n";
  for (const auto& [kind, acc] : m.per_kind_accuracy)
    std::cout << "  " << kind << "  " << acc << "  (n=" << m.per_kind_n.at(kind)
              << ")\n";
}

json metrics_json(const EvalMetrics& m) {
  json j;
  j["n"] = m.n;
  j["accuracy"] = m.accuracy;
  j["chance"] = m.chance;
  j["per_kind_accuracy"] = m.per_kind_accuracy;
  j["per_kind_n"] = m.per_kind_n;
  return j;
}

// ---- commands --------------------------------------------------------------

int cmd_gen_corpus(const CommonOpts& opts, const std::string& out) {
  const PipelineConfig cfg = resolve_config(opts);
  Vocabulary vocab;
  const auto corpus =
      generate_text_corpus(cfg.pretrain.corpus_sentences, cfg.seed, vocab);
  save_corpus_text(corpus, vocab, out);
  write_manifest("gen-corpus", cfg, {}, {file_entry("corpus", out)}, out);
  std::cout << "wrote " << corpus.size() << " sentences to " << out << "\n";
  return 0;
}

int cmd_gen_data(const CommonOpts& opts, const std::string& out) {
  const PipelineConfig cfg = resolve_config(opts);
  Vocabulary vocab;
  const auto data = generate_dataset(cfg.n_samples, cfg.seed, cfg.data, vocab);
  save_dataset_jsonl(data, vocab, out);
  int n_test = 0;
  for (const auto& s : data) n_test += s.split == Split::Test ? 1 : 0;
  write_manifest("gen-data", cfg, {}, {file_entry("dataset", out)}, out);
  std::cout << "wrote " << data.size() << " samples (" << n_test
            << " held out) to " << out << "\n";
  return 0;
}

int cmd_base_pretrain(const CommonOpts& opts, const std::string& corpus_path,
                      const std::string& out) {
  const PipelineConfig cfg = resolve_config(opts);
  Vocabulary vocab;
  const auto corpus = load_corpus_text(vocab, corpus_path);
  PillModel model = fresh_model(cfg, vocab);

  const double loss_before = corpus_eval_loss(model, corpus);
  TrainingReport report =
      run_pretrain(model, corpus, cfg.pretrain, hyper_of(cfg), cfg.seed);
  const double loss_after = corpus_eval_loss(model, corpus);
  report.summary["corpus_loss_before"] = loss_before;
  report.summary["corpus_loss_after"] = loss_after;

  save_checkpoint(model, out);
  const std::string report_path = out + ".report.jsonl";
  write_report_jsonl(report, report_path);
  write_manifest("base-pretrain", cfg, {file_entry("corpus", corpus_path)},
                 {file_entry("checkpoint", out), file_entry("report", report_path)},
                 out);
  std::cout << "pretrain: steps=" << report.trace.size()
            << " corpus_loss " << loss_before << " -> " << loss_after << "\n";
  return 0;
}

int cmd_stage(const CommonOpts& opts, const std::string& stage_name,
              const std::string& data_path, const std::string& ckpt_path,
              const std::string& out) {
  const PipelineConfig cfg = resolve_config(opts);
  Vocabulary vocab;
  PillModel model = load_checkpoint(ckpt_path);
  const DataConfig dcfg = data_config_for(model, cfg);
  const auto data = load_dataset_jsonl(vocab, dcfg, data_path);

  const TrainStageSpec& spec = stage_name == "stage1" ? cfg.stage1 : cfg.stage2;
  TrainingReport report =
      run_stage(model, data, vocab, dcfg, spec, hyper_of(cfg), cfg.seed);
  const EvalMetrics metrics = evaluate(model, data, vocab, dcfg, true);
  report.summary["accuracy"] = metrics.accuracy;
  report.summary["chance"] = metrics.chance;

  save_checkpoint(model, out);
  const std::string report_path = out + ".report.jsonl";
  write_report_jsonl(report, report_path);
  write_manifest(stage_name, cfg,
                 {file_entry("dataset", data_path), file_entry("checkpoint_in", ckpt_path)},
                 {file_entry("checkpoint", out), file_entry("report", report_path)},
                 out);
  std::cout << stage_name << ": steps=" << report.trace.size()
            << " final_loss=" << report.final_loss
            << " test_accuracy=" << metrics.accuracy << "\n";
  return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& data_path,
             const std::string& ckpt_path, const std::string& out, bool all) {
  const PipelineConfig cfg = resolve_config(opts);
  Vocabulary vocab;
  const PillModel model = load_checkpoint(ckpt_path);
  const DataConfig dcfg = data_config_for(model, cfg);
  const auto data = load_dataset_jsonl(vocab, dcfg, data_path);

  const EvalMetrics metrics = evaluate(model, data, vocab, dcfg, !all);
  print_metrics(metrics);
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw std::runtime_error("eval: cannot write " + out);
    f << metrics_json(metrics).dump(2) << '\n';
    write_manifest("eval", cfg,
                   {file_entry("dataset", data_path),
                    file_entry("checkpoint", ckpt_path)},
                   {file_entry("metrics", out)}, out);
  }
  return 0;
}

int cmd_gate_report(const CommonOpts& opts, const std::string& data_path,
                    const std::string& ckpt_path, const std::string& out,
                    int max_samples) {
  const PipelineConfig cfg = resolve_config(opts);
  Vocabulary vocab;
  const PillModel model = load_checkpoint(ckpt_path);
  const DataConfig dcfg = data_config_for(model, cfg);
  const auto data = load_dataset_jsonl(vocab, dcfg, data_path);

  const GateReport rep = gate_report(model, data, vocab, dcfg, max_samples);
  write_gate_report_csv(rep, out);
  write_manifest("gate-report", cfg,
                 {file_entry("dataset", data_path),
                  file_entry("checkpoint", ckpt_path)},
                 {file_entry("gates", out)}, out);
  for (size_t l = 0; l < rep.mean_abs.size(); ++l)
    std::cout << "layer " << l << " mean |gate| = " << rep.mean_abs[l] << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  (void)std::getenv("PILL_THREADS");  // accepted; execution is single-threaded

  CLI::App app{"frozen-base multimodal adapter pipeline"};
  app.require_subcommand(1);

  CommonOpts gc_opts, gd_opts, bp_opts, s1_opts, s2_opts, ev_opts, gr_opts;
  std::string gc_out, gd_out, bp_corpus, bp_out;
  std::string s1_data, s1_ckpt, s1_out, s2_data, s2_ckpt, s2_out;
  std::string ev_data, ev_ckpt, ev_out;
  bool ev_all = false;
  std::string gr_data, gr_ckpt, gr_out;
  int gr_max = 64;

  CLI::App* gc = app.add_subcommand("gen-corpus", "write the pre-training text corpus");
  add_common(gc, gc_opts);
  gc->add_option("--out", gc_out, "output corpus path")->required();

  CLI::App* gd = app.add_subcommand("gen-data", "write the synthetic QA dataset");
  add_common(gd, gd_opts);
  gd->add_option("--out", gd_out, "output dataset path (jsonl)")->required();

  CLI::App* bp = app.add_subcommand("base-pretrain", "pre-train the frozen base on text");
  add_common(bp, bp_opts);
  bp->add_option("--corpus", bp_corpus, "corpus from gen-corpus")->required();
  bp->add_option("--out", bp_out, "output checkpoint path")->required();

  CLI::App* s1 = app.add_subcommand("stage1", "alignment stage: vision adapters + projection");
  add_common(s1, s1_opts);
  s1->add_option("--data", s1_data, "dataset from gen-data")->required();
  s1->add_option("--ckpt", s1_ckpt, "input checkpoint")->required();
  s1->add_option("--out", s1_out, "output checkpoint path")->required();

  CLI::App* s2 = app.add_subcommand("stage2", "joint stage: all adapters, gates, projection");
  add_common(s2, s2_opts);
  s2->add_option("--data", s2_data, "dataset from gen-data")->required();
  s2->add_option("--ckpt", s2_ckpt, "input checkpoint")->required();
  s2->add_option("--out", s2_out, "output checkpoint path")->required();

  CLI::App* ev = app.add_subcommand("eval", "option-constrained accuracy of a checkpoint");
  add_common(ev, ev_opts);
  ev->add_option("--data", ev_data, "dataset from gen-data")->required();
  ev->add_option("--ckpt", ev_ckpt, "checkpoint to score")->required();
  ev->add_option("--out", ev_out, "also write metrics json here");
  ev->add_flag("--all", ev_all, "score every sample, not just the held-out split");

  CLI::App* gr = app.add_subcommand("gate-report", "per-layer vision gate magnitudes");
  add_common(gr, gr_opts);
  gr->add_option("--data", gr_data, "dataset used to probe")->required();
  gr->add_option("--ckpt", gr_ckpt, "checkpoint to probe")->required();
  gr->add_option("--out", gr_out, "output csv path")->required();
  gr->add_option("--max-samples", gr_max, "probe at most this many samples");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // help/version exit cleanly, usage errors are 2
  }

  try {
    if (gc->parsed()) return cmd_gen_corpus(gc_opts, gc_out);
    if (gd->parsed()) return cmd_gen_data(gd_opts, gd_out);
    if (bp->parsed()) return cmd_base_pretrain(bp_opts, bp_corpus, bp_out);
    if (s1->parsed()) return cmd_stage(s1_opts, "stage1", s1_data, s1_ckpt, s1_out);
    if (s2->parsed()) return cmd_stage(s2_opts, "stage2", s2_data, s2_ckpt, s2_out);
    if (ev->parsed()) return cmd_eval(ev_opts, ev_data, ev_ckpt, ev_out, ev_all);
    if (gr->parsed()) return cmd_gate_report(gr_opts, gr_data, gr_ckpt, gr_out, gr_max);
    std::cerr << "pill: no command\n";
    return 2;
  } catch (const training_abort& e) {
    std::cerr << "pill: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "pill: " << e.what() << "\n";
    return 2;
  }
}
