#include "pill/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <numbers>

#include "json.hpp"

namespace pill {

namespace {
using nlohmann::json;
}

// ---- schedule ------------------------------------------------------------------

double cosine_lr(int step, int total_steps, double base_lr, int warmup_steps) {
  if (total_steps <= 0)
    throw std::invalid_argument("cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps)
    throw std::invalid_argument("cosine_lr: step " + std::to_string(step) +
                                " outside [0, " + std::to_string(total_steps) + "]");
  if (warmup_steps < 0 || warmup_steps > total_steps)
    throw std::invalid_argument("cosine_lr: bad warmup_steps");
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * step / warmup_steps;
  if (total_steps == warmup_steps) return step < total_steps ? base_lr : 0.0;
  const double progress =
      static_cast<double>(step - warmup_steps) / (total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---- augmentation ----------------------------------------------------------------

SyntheticSample wrong_answer_augment(const SyntheticSample& s, double p, Rng& rng) {
  if (p < 0.0 || p > 1.0)
    throw std::invalid_argument("wrong_answer_augment: p outside [0, 1]");
  const double u = rng.uniform();
  if (u >= p) return s;
  if (s.options.size() < 2)
    throw std::invalid_argument(
        "wrong_answer_augment: replacement drawn but sample has fewer than 2 options");
  std::vector<int> others;
  for (int o : s.options)
    if (o != s.answer) others.push_back(o);
  if (others.empty())
    throw std::invalid_argument(
        "wrong_answer_augment: no option differs from the answer");
  SyntheticSample out = s;
  out.answer = others[rng.uniform_int(others.size())];
  return out;
}

// ---- losses ---------------------------------------------------------------------

Tensor autoregressive_loss(const Tensor& logits, const TokenSequence& seq) {
  const int t_len = seq.length();
  if (logits.dim(0) != t_len)
    throw std::invalid_argument("autoregressive_loss: logits rows != sequence length");
  bool any = false;
  std::vector<int> targets(static_cast<size_t>(t_len), 0);
  std::vector<bool> mask(static_cast<size_t>(t_len), false);
  for (int t = 0; t + 1 < t_len; ++t) {
    targets[static_cast<size_t>(t)] = seq.tokens[static_cast<size_t>(t) + 1];
    if (seq.loss_mask[static_cast<size_t>(t) + 1]) {
      mask[static_cast<size_t>(t)] = true;
      any = true;
    }
  }
  if (!any)
    throw std::invalid_argument("autoregressive_loss: sequence has no answer positions");
  return cross_entropy(logits, targets, mask);
}

Tensor lm_loss(const Tensor& logits, std::span<const int> tokens) {
  const int t_len = static_cast<int>(tokens.size());
  if (t_len < 2)
    throw std::invalid_argument("lm_loss: need at least 2 tokens");
  std::vector<int> targets(static_cast<size_t>(t_len), 0);
  std::vector<bool> mask(static_cast<size_t>(t_len), false);
  for (int t = 0; t + 1 < t_len; ++t) {
    targets[static_cast<size_t>(t)] = tokens[static_cast<size_t>(t) + 1];
    mask[static_cast<size_t>(t)] = true;
  }
  return cross_entropy(logits, targets, mask);
}

// ---- optimizer ------------------------------------------------------------------

AdamW::AdamW(std::vector<ParamRef> trainable, const AdamWConfig& cfg) : cfg_(cfg) {
  slots_.reserve(trainable.size());
  for (ParamRef& p : trainable) {
    Slot s;
    s.m.assign(static_cast<size_t>(p.tensor.size()), 0.0);
    s.v.assign(static_cast<size_t>(p.tensor.size()), 0.0);
    s.p = std::move(p);
    slots_.push_back(std::move(s));
  }
}

double AdamW::step(double lr, double clip_norm) {
  double sq_sum = 0.0;
  for (const Slot& s : slots_) {
    if (!s.p.tensor.has_grad())
      throw std::invalid_argument("adamw: missing gradient for trainable parameter '" +
                                  s.p.name + "'");
    for (double g : s.p.tensor.grad()) sq_sum += g * g;
  }
  const double norm = std::sqrt(sq_sum);
  if (!std::isfinite(norm))
    throw numeric_error("adamw: non-finite gradient norm");
  const double scale =
      (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (Slot& s : slots_) {
    const auto g = s.p.tensor.grad();
    auto w = s.p.tensor.values_mut();
    for (size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * scale;
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * gi;
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      double upd = mhat / (std::sqrt(vhat) + cfg_.eps);
      if (s.p.decay) upd += cfg_.weight_decay * w[i];
      w[i] -= lr * upd;
    }
  }
  return norm;
}

void AdamW::zero_grads() {
  for (Slot& s : slots_) s.p.tensor.zero_grad();
}

// ---- training loops ---------------------------------------------------------------

namespace {

// Shared epoch/batch driver: shuffles item order per epoch, averages the
// per-item losses of each batch, steps the optimizer, records the trace.
// Wraps any numeric blow-up into training_abort with the 1-based step index.
TrainingReport drive(const std::string& stage_name, int n_items, int epochs,
                     int batch_size, double base_lr, const TrainHyper& hyper,
                     AdamW& opt, Rng& order_rng,
                     const std::function<Tensor(int)>& item_loss) {
  if (n_items <= 0) throw std::invalid_argument("training: empty dataset");
  if (batch_size <= 0) throw std::invalid_argument("training: batch_size must be > 0");
  if (epochs < 0) throw std::invalid_argument("training: epochs must be >= 0");

  TrainingReport report;
  report.stage = stage_name;
  const auto t0 = std::chrono::steady_clock::now();

  const int steps_per_epoch = (n_items + batch_size - 1) / batch_size;
  const int total_steps = epochs * steps_per_epoch;
  const int warmup = static_cast<int>(std::llround(hyper.warmup_frac * total_steps));

  std::vector<int> order(static_cast<size_t>(n_items));
  for (int i = 0; i < n_items; ++i) order[static_cast<size_t>(i)] = i;

  int step = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    order_rng.shuffle(order);
    for (int b = 0; b < steps_per_epoch; ++b) {
      ++step;
      const int lo = b * batch_size;
      const int hi = std::min(lo + batch_size, n_items);
      try {
        Tensor acc;
        for (int i = lo; i < hi; ++i) {
          Tensor l = item_loss(order[static_cast<size_t>(i)]);
          acc = acc.defined() ? add(acc, l) : l;
        }
        Tensor loss = scale(acc, 1.0 / (hi - lo));
        if (!std::isfinite(loss.item()))
          throw numeric_error("non-finite batch loss");
        backward(loss);
        const double lr = cosine_lr(step - 1, total_steps, base_lr, warmup);
        const double gnorm = opt.step(lr, hyper.clip_norm);
        opt.zero_grads();
        report.trace.push_back({step, lr, loss.item(), gnorm});
        report.final_loss = loss.item();
      } catch (const numeric_error& e) {
        throw training_abort(step, stage_name + ": numeric abort at step " +
                                       std::to_string(step) + ": " + e.what());
      }
    }
  }

  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

std::vector<ParamRef> stage_trainables(const PillModel& model,
                                       const TrainStageSpec& spec) {
  std::vector<ParamRef> out;
  for (ParamRef& p : enumerate_params(model))
    if (param_in_stage(p, spec, model.cfg.n_layers)) out.push_back(std::move(p));
  return out;
}

}  // namespace

TrainingReport run_stage(PillModel& model, const std::vector<SyntheticSample>& data,
                         const Vocabulary& vocab, const DataConfig& dcfg,
                         const TrainStageSpec& spec, const TrainHyper& hyper,
                         std::uint64_t seed) {
  std::vector<const SyntheticSample*> train;
  for (const auto& s : data)
    if (s.split == Split::Train) train.push_back(&s);
  if (train.empty())
    throw std::invalid_argument("run_stage: no training samples in dataset");

  apply_stage_flags(model, spec);
  AdamWConfig ocfg;
  ocfg.weight_decay = hyper.weight_decay;
  AdamW opt(stage_trainables(model, spec), ocfg);

  Rng root(seed);
  Rng order_rng = root.fork(1);
  Rng aug_rng = root.fork(2);

  auto item_loss = [&](int idx) {
    const SyntheticSample& s = *train[static_cast<size_t>(idx)];
    const SyntheticSample used =
        wrong_answer_augment(s, spec.wrong_answer_prob, aug_rng);
    const TokenSequence seq =
        encode_sample(used, vocab, dcfg, std::min(spec.seq_len, model.cfg.max_seq_len));
    return autoregressive_loss(model.forward(seq), seq);
  };
  return drive(spec.name, static_cast<int>(train.size()), spec.epochs,
               spec.batch_size, spec.base_lr, hyper, opt, order_rng, item_loss);
}

TrainingReport run_pretrain(PillModel& model,
                            const std::vector<std::vector<int>>& corpus,
                            const PretrainConfig& pcfg, const TrainHyper& hyper,
                            std::uint64_t seed) {
  if (corpus.empty()) throw std::invalid_argument("run_pretrain: empty corpus");

  // The base is what trains here; injections stay fixed at their init values.
  std::vector<ParamRef> base;
  for (ParamRef& p : enumerate_params(model)) {
    Tensor t = p.tensor;
    const bool train_this = p.group == ParamGroup::FrozenBase;
    t.set_requires_grad(train_this);
    t.zero_grad();
    if (train_this) base.push_back(std::move(p));
  }
  AdamWConfig ocfg;
  ocfg.weight_decay = hyper.weight_decay;
  AdamW opt(std::move(base), ocfg);

  Rng root(seed);
  Rng order_rng = root.fork(1);

  auto item_loss = [&](int idx) {
    const std::vector<int>& toks = corpus[static_cast<size_t>(idx)];
    return lm_loss(model.forward_base(toks), toks);
  };
  return drive("pretrain", static_cast<int>(corpus.size()), pcfg.epochs,
               pcfg.batch_size, pcfg.lr, hyper, opt, order_rng, item_loss);
}

// ---- evaluation -----------------------------------------------------------------

namespace {

// Temporarily disables every requires_grad flag so inference builds no graph.
class GradOff {
 public:
  explicit GradOff(const PillModel& model) : params_(enumerate_params(model)) {
    for (ParamRef& p : params_) {
      saved_.push_back(p.tensor.requires_grad());
      p.tensor.set_requires_grad(false);
    }
  }
  ~GradOff() {
    for (size_t i = 0; i < params_.size(); ++i)
      params_[i].tensor.set_requires_grad(saved_[i]);
  }

 private:
  std::vector<ParamRef> params_;
  std::vector<bool> saved_;
};

}  // namespace

double corpus_eval_loss(const PillModel& model,
                        const std::vector<std::vector<int>>& corpus) {
  if (corpus.empty()) throw std::invalid_argument("corpus_eval_loss: empty corpus");
  GradOff off(model);
  double total = 0.0;
  std::int64_t positions = 0;
  for (const auto& toks : corpus) {
    const int n = static_cast<int>(toks.size()) - 1;
    total += lm_loss(model.forward_base(toks), toks).item() * n;
    positions += n;
  }
  return total / static_cast<double>(positions);
}

EvalMetrics evaluate(const PillModel& model,
                     const std::vector<SyntheticSample>& data,
                     const Vocabulary& vocab, const DataConfig& dcfg,
                     bool test_only) {
  GradOff off(model);
  EvalMetrics m;
  std::map<std::string, int> kind_hits;
  for (const auto& s : data) {
    if (test_only && s.split != Split::Test) continue;
    const TokenSequence seq = encode_sample(s, vocab, dcfg, model.cfg.max_seq_len);
    const Tensor logits = model.forward(seq);
    const int answer_pos = seq.first_masked_pos();
    const int pred_pos = answer_pos - 1;  // position whose next token is the answer
    int best = s.options.front();
    double best_v = -1e300;
    for (int opt : s.options) {
      const double v = logits.at(pred_pos, opt);
      if (v > best_v) {
        best_v = v;
        best = opt;
      }
    }
    const std::string kind = question_kind_name(s.kind);
    ++m.n;
    ++m.per_kind_n[kind];
    if (best == s.answer) {
      m.accuracy += 1.0;
      ++kind_hits[kind];
    }
    m.chance += 1.0 / static_cast<double>(s.options.size());
  }
  if (m.n == 0) throw std::invalid_argument("evaluate: no samples in the requested split");
  m.accuracy /= m.n;
  m.chance /= m.n;
  for (const auto& [kind, n] : m.per_kind_n)
    m.per_kind_accuracy[kind] = static_cast<double>(kind_hits[kind]) / n;
  return m;
}

GateReport gate_report(const PillModel& model,
                       const std::vector<SyntheticSample>& data,
                       const Vocabulary& vocab, const DataConfig& dcfg,
                       int max_samples) {
  GradOff off(model);
  const int n_layers = model.cfg.n_layers;
  const int n_heads = model.cfg.n_heads;
  GateReport rep;
  rep.mean_abs.assign(static_cast<size_t>(n_layers), 0.0);
  rep.per_head.assign(static_cast<size_t>(n_layers),
                      std::vector<double>(static_cast<size_t>(n_heads), 0.0));
  int used = 0;
  for (const auto& s : data) {
    if (used == max_samples) break;
    if (s.image_features.empty()) continue;
    const TokenSequence seq = encode_sample(s, vocab, dcfg, model.cfg.max_seq_len);
    GateTrace trace;
    model.forward(seq, &trace);
    for (int l = 0; l < n_layers; ++l) {
      const auto& g = trace.per_layer[static_cast<size_t>(l)];
      if (static_cast<int>(g.size()) != n_heads)
        throw std::invalid_argument("gate_report: probe sequence without vision positions");
      for (int h = 0; h < n_heads; ++h)
        rep.per_head[static_cast<size_t>(l)][static_cast<size_t>(h)] +=
            std::abs(g[static_cast<size_t>(h)]);
    }
    ++used;
  }
  if (used == 0)
    throw std::invalid_argument("gate_report: probe data contains no images");
  for (int l = 0; l < n_layers; ++l) {
    double acc = 0.0;
    for (int h = 0; h < n_heads; ++h) {
      rep.per_head[static_cast<size_t>(l)][static_cast<size_t>(h)] /= used;
      acc += rep.per_head[static_cast<size_t>(l)][static_cast<size_t>(h)];
    }
    rep.mean_abs[static_cast<size_t>(l)] = acc / n_heads;
  }
  return rep;
}

// ---- reports -------------------------------------------------------------------

void write_report_jsonl(const TrainingReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_report_jsonl: cannot write " + path);
  for (const StepRecord& r : report.trace) {
    json rec;
    rec["step"] = r.step;
    rec["lr"] = r.lr;
    rec["loss"] = r.loss;
    rec["grad_norm"] = r.grad_norm;
    out << rec.dump() << '\n';
  }
  json summary;
  summary["stage"] = report.stage;
  summary["steps"] = report.trace.size();
  summary["final_loss"] = report.final_loss;
  summary["wall_seconds"] = report.wall_seconds;
  for (const auto& [k, v] : report.summary) summary[k] = v;
  out << json{{"summary", summary}}.dump() << '\n';
  if (!out) throw std::runtime_error("write_report_jsonl: write failed for " + path);
}

void write_gate_report_csv(const GateReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_gate_report_csv: cannot write " + path);
  out << "layer_index,mean_abs_gate";
  if (!report.per_head.empty()) {
    for (size_t h = 0; h < report.per_head.front().size(); ++h)
      out << ",head_" << h;
  }
  out << '\n';
  out.precision(17);
  for (size_t l = 0; l < report.mean_abs.size(); ++l) {
    out << l << ',' << report.mean_abs[l];
    for (double v : report.per_head[l]) out << ',' << v;
    out << '\n';
  }
  if (!out) throw std::runtime_error("write_gate_report_csv: write failed for " + path);
}

}  // namespace pill
