#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pill/config.hpp"
#include "pill/data.hpp"
#include "pill/model.hpp"

namespace pill {

// Raised when a training step produces a non-finite loss or gradient; carries
// the 1-based step index for diagnostics (CLI exit code 1).
struct training_abort : std::runtime_error {
  int step;
  training_abort(int step_, const std::string& what)
      : std::runtime_error(what), step(step_) {}
};

// Linear warmup to base_lr over warmup_steps, then cosine decay to 0.
double cosine_lr(int step, int total_steps, double base_lr, int warmup_steps);

// With probability p, replaces the supervised answer by a uniformly chosen
// *different* option. Draws exactly one uniform variate per call.
SyntheticSample wrong_answer_augment(const SyntheticSample& s, double p, Rng& rng);

// Mean NLL over positions whose next-token target is in the answer span
// (standard one-step shift); everything else is context only.
Tensor autoregressive_loss(const Tensor& logits, const TokenSequence& seq);

// Plain next-token loss over the whole sequence (base pre-training).
Tensor lm_loss(const Tensor& logits, std::span<const int> tokens);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // decoupled; applied only to decay-flagged params
};

// Decoupled-weight-decay Adam over an explicit trainable set. Moments exist
// only for these parameters; everything else is untouched by construction.
class AdamW {
 public:
  AdamW(std::vector<ParamRef> trainable, const AdamWConfig& cfg);

  // Clips the global gradient norm to clip_norm (when > 0), applies one
  // update, and returns the pre-clip global norm. Throws when a trainable
  // parameter has no gradient.
  double step(double lr, double clip_norm);

  void zero_grads();
  std::int64_t steps_taken() const { return t_; }

 private:
  struct Slot {
    ParamRef p;
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
};

struct StepRecord {
  int step;  // 1-based
  double lr, loss, grad_norm;
};

struct TrainingReport {
  std::string stage;
  std::vector<StepRecord> trace;
  double final_loss = 0.0;
  double wall_seconds = 0.0;
  std::map<std::string, double> summary;  // extra metrics (eval results etc.)
};

// step/lr/loss/grad_norm records line by line, then one summary line.
void write_report_jsonl(const TrainingReport& report, const std::string& path);

struct TrainHyper {
  double weight_decay = 0.01;
  double warmup_frac = 0.03;
  double clip_norm = 1.0;
};

// One stage of the two-stage protocol on the Train split of `data`:
// freezes/unfreezes per the spec, runs epochs x ceil(N/batch) steps, returns
// the step trace. Aborts via training_abort on non-finite numerics.
TrainingReport run_stage(PillModel& model, const std::vector<SyntheticSample>& data,
                         const Vocabulary& vocab, const DataConfig& dcfg,
                         const TrainStageSpec& spec, const TrainHyper& hyper,
                         std::uint64_t seed);

// Base-model pre-training on the text corpus; trains exactly the base
// parameter set (which the two stages then freeze).
TrainingReport run_pretrain(PillModel& model,
                            const std::vector<std::vector<int>>& corpus,
                            const PretrainConfig& pcfg, const TrainHyper& hyper,
                            std::uint64_t seed);

// Mean per-token next-token loss of the base path over a corpus.
double corpus_eval_loss(const PillModel& model,
                        const std::vector<std::vector<int>>& corpus);

struct EvalMetrics {
  int n = 0;
  double accuracy = 0.0;
  double chance = 0.0;  // mean over samples of 1/|options|
  std::map<std::string, double> per_kind_accuracy;
  std::map<std::string, int> per_kind_n;
};

// Option-constrained greedy decoding: at the position that predicts the first
// answer token, pick the argmax over the sample's candidate options and score
// exact match. Runs on the Test split when test_only is set.
EvalMetrics evaluate(const PillModel& model,
                     const std::vector<SyntheticSample>& data,
                     const Vocabulary& vocab, const DataConfig& dcfg,
                     bool test_only = true);

struct GateReport {
  // One row per layer: mean |gate| over probe samples and heads, plus the
  // per-head means.
  std::vector<double> mean_abs;
  std::vector<std::vector<double>> per_head;
};

// Probes up to max_samples sequences with images; errors when none carry one.
GateReport gate_report(const PillModel& model,
                       const std::vector<SyntheticSample>& data,
                       const Vocabulary& vocab, const DataConfig& dcfg,
                       int max_samples);

void write_gate_report_csv(const GateReport& report, const std::string& path);

}  // namespace pill
