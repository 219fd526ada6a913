#include "pill/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace pill {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

KVConfig KVConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("config: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return from_string(buf.str());
  } catch (const config_error& e) {
    throw config_error(std::string(e.what()) + " (in " + path + ")");
  }
}

KVConfig KVConfig::from_string(const std::string& text) {
  KVConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw config_error("config: line " + std::to_string(line_no) +
                         " is not key=value: '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw config_error("config: empty key at line " + std::to_string(line_no));
    cfg.values_[key] = value;
  }
  return cfg;
}

void KVConfig::set(const std::string& key, const std::string& value) {
  values_[key] = value;
}

bool KVConfig::has(const std::string& key) const {
  return values_.count(key) != 0;
}

std::string KVConfig::get_string(const std::string& key,
                                 const std::string& def) const {
  auto it = values_.find(key);
  return it == values_.end() ? def : it->second;
}

int KVConfig::get_int(const std::string& key, int def) const {
  auto it = values_.find(key);
  if (it == values_.end()) return def;
  try {
    size_t pos = 0;
    const int v = std::stoi(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw config_error("config: key '" + key + "' wants an integer, got '" +
                       it->second + "'");
  }
}

double KVConfig::get_double(const std::string& key, double def) const {
  auto it = values_.find(key);
  if (it == values_.end()) return def;
  try {
    size_t pos = 0;
    const double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw config_error("config: key '" + key + "' wants a number, got '" +
                       it->second + "'");
  }
}

std::uint64_t KVConfig::get_u64(const std::string& key, std::uint64_t def) const {
  auto it = values_.find(key);
  if (it == values_.end()) return def;
  try {
    size_t pos = 0;
    const unsigned long long v = std::stoull(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw config_error("config: key '" + key +
                       "' wants an unsigned integer, got '" + it->second + "'");
  }
}

PipelineConfig PipelineConfig::from_kv(const KVConfig& kv) {
  static const std::set<std::string> known = {
      "d_model", "n_layers", "n_heads", "d_ffn", "max_seq_len", "d_vis",
      "k_vision", "adapter_dim",
      "jitter", "test_tuples", "n_samples",
      "pretrain.epochs", "pretrain.lr", "pretrain.batch", "corpus_sentences",
      "stage1.epochs", "stage1.lr", "stage1.batch", "stage1.seq_len",
      "stage1.wrong_answer_prob",
      "stage2.epochs", "stage2.lr", "stage2.batch", "stage2.seq_len",
      "stage2.wrong_answer_prob",
      "weight_decay", "warmup_frac", "clip_norm", "seed",
  };
  for (const auto& [key, value] : kv.entries()) {
    if (!known.count(key))
      throw config_error("config: unknown key '" + key + "'");
  }

  PipelineConfig pc;
  pc.model.d_model = kv.get_int("d_model", pc.model.d_model);
  pc.model.n_layers = kv.get_int("n_layers", pc.model.n_layers);
  pc.model.n_heads = kv.get_int("n_heads", pc.model.n_heads);
  pc.model.d_ffn = kv.get_int("d_ffn", pc.model.d_ffn);
  pc.model.max_seq_len = kv.get_int("max_seq_len", pc.model.max_seq_len);
  pc.model.d_vis = kv.get_int("d_vis", pc.model.d_vis);
  pc.model.queries_per_image = kv.get_int("k_vision", pc.model.queries_per_image);
  pc.model.adapter_dim = kv.get_int("adapter_dim", pc.model.adapter_dim);

  pc.data.d_vis = pc.model.d_vis;
  pc.data.k_vision = pc.model.queries_per_image;
  pc.data.jitter = kv.get_double("jitter", pc.data.jitter);
  pc.data.test_tuples = kv.get_int("test_tuples", pc.data.test_tuples);
  pc.n_samples = kv.get_int("n_samples", pc.n_samples);

  pc.pretrain.epochs = kv.get_int("pretrain.epochs", pc.pretrain.epochs);
  pc.pretrain.lr = kv.get_double("pretrain.lr", pc.pretrain.lr);
  pc.pretrain.batch_size = kv.get_int("pretrain.batch", pc.pretrain.batch_size);
  pc.pretrain.corpus_sentences =
      kv.get_int("corpus_sentences", pc.pretrain.corpus_sentences);

  auto fill_stage = [&kv](TrainStageSpec& s) {
    const std::string p = s.name + ".";
    s.epochs = kv.get_int(p + "epochs", s.epochs);
    s.base_lr = kv.get_double(p + "lr", s.base_lr);
    s.batch_size = kv.get_int(p + "batch", s.batch_size);
    s.seq_len = kv.get_int(p + "seq_len", s.seq_len);
    s.wrong_answer_prob =
        kv.get_double(p + "wrong_answer_prob", s.wrong_answer_prob);
  };
  fill_stage(pc.stage1);
  fill_stage(pc.stage2);

  pc.weight_decay = kv.get_double("weight_decay", pc.weight_decay);
  pc.warmup_frac = kv.get_double("warmup_frac", pc.warmup_frac);
  pc.clip_norm = kv.get_double("clip_norm", pc.clip_norm);
  pc.seed = kv.get_u64("seed", pc.seed);
  return pc;
}

}  // namespace pill
