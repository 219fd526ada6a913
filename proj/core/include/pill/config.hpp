#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "pill/data.hpp"
#include "pill/model.hpp"

namespace pill {

struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat key=value configuration ('#' starts a comment, blank lines ignored).
// CLI overrides call set() on top of the file contents.
class KVConfig {
 public:
  static KVConfig from_file(const std::string& path);
  static KVConfig from_string(const std::string& text);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;

  std::string get_string(const std::string& key, const std::string& def) const;
  int get_int(const std::string& key, int def) const;
  double get_double(const std::string& key, double def) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t def) const;

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

struct PretrainConfig {
  int epochs = 3;
  double lr = 3e-3;
  int batch_size = 32;
  int corpus_sentences = 3000;
};

// Everything a full pipeline run needs, assembled from a KVConfig with
// defaults for missing keys. Unknown keys are rejected to catch typos.
struct PipelineConfig {
  ModelConfig model;
  DataConfig data;
  PretrainConfig pretrain;
  TrainStageSpec stage1 = TrainStageSpec::stage1();
  TrainStageSpec stage2 = TrainStageSpec::stage2();
  int n_samples = 5000;
  double weight_decay = 0.01;
  double warmup_frac = 0.03;  // fraction of total steps spent in linear warmup
  double clip_norm = 1.0;     // global gradient-norm clip
  std::uint64_t seed = 42;

  static PipelineConfig from_kv(const KVConfig& kv);
};

}  // namespace pill
