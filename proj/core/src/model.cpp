#include "pill/model.hpp"

#include <cmath>
#include <stdexcept>

namespace pill {

namespace {

// Finite stand-in for -inf in the additive causal mask; keeps every
// intermediate value finite while zeroing attention beyond the diagonal.
constexpr double kMaskedScore = -1e30;

struct Run {
  int start, len;
  bool vision;
};

std::vector<Run> modality_runs(const TokenSequence& seq) {
  std::vector<Run> runs;
  for (int i = 0; i < seq.length(); ++i) {
    const bool vis = seq.modality[static_cast<size_t>(i)] == Modality::Vision;
    if (!runs.empty() && runs.back().vision == vis) {
      ++runs.back().len;
    } else {
      runs.push_back({i, 1, vis});
    }
  }
  return runs;
}

Tensor causal_mask(int t_len) {
  std::vector<double> m(static_cast<size_t>(t_len) * t_len, 0.0);
  for (int i = 0; i < t_len; ++i)
    for (int j = i + 1; j < t_len; ++j)
      m[static_cast<size_t>(i) * t_len + j] = kMaskedScore;
  return Tensor::from({t_len, t_len}, std::move(m));
}

Tensor uniform_matrix(int rows, int cols, double bound, Rng& rng) {
  std::vector<double> v(static_cast<size_t>(rows) * cols);
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from({rows, cols}, std::move(v));
}

Tensor normal_matrix(int rows, int cols, double stddev, Rng& rng) {
  std::vector<double> v(static_cast<size_t>(rows) * cols);
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from({rows, cols}, std::move(v));
}

SwigluAdapter init_adapter(int d_model, int r, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_model));
  SwigluAdapter a;
  a.down1_w = uniform_matrix(d_model, r, bound, rng);
  a.down1_b = Tensor::zeros({1, r});
  a.down2_w = uniform_matrix(d_model, r, bound, rng);
  a.down2_b = Tensor::zeros({1, r});
  a.up_w = Tensor::zeros({r, d_model});
  return a;
}

// Frozen-path attention over already-normed inputs. `value_mult`, when
// present, scales value rows elementwise before the score-weighted sum (this
// is where the vision gates enter).
Tensor attention_core(const Tensor& hn, const LayerParams& lp,
                      const ModelConfig& cfg, const Tensor* value_mult) {
  const int t_len = hn.dim(0);
  const int dh = cfg.d_head();
  Tensor q = rope(matmul(hn, lp.wq), cfg.n_heads);
  Tensor k = rope(matmul(hn, lp.wk), cfg.n_heads);
  Tensor v = matmul(hn, lp.wv);
  if (value_mult) v = mul(v, *value_mult);
  const Tensor mask = causal_mask(t_len);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  heads.reserve(static_cast<size_t>(cfg.n_heads));
  for (int h = 0; h < cfg.n_heads; ++h) {
    Tensor qh = cols_slice(q, h * dh, (h + 1) * dh);
    Tensor kh = cols_slice(k, h * dh, (h + 1) * dh);
    Tensor vh = cols_slice(v, h * dh, (h + 1) * dh);
    Tensor scores = add(scale(matmul(qh, transpose(kh)), inv_sqrt), mask);
    heads.push_back(matmul(softmax_lastdim(scores), vh));
  }
  return matmul(concat_cols(heads), lp.wo);
}

Tensor ffn_core(const Tensor& hn, const LayerParams& lp) {
  return matmul(mul(silu(matmul(hn, lp.w1)), matmul(hn, lp.w3)), lp.w2);
}

}  // namespace

// ---- config / init -----------------------------------------------------------

void ModelConfig::validate() const {
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ffn <= 0 ||
      vocab_size <= 0 || max_seq_len <= 0 || d_vis <= 0 ||
      queries_per_image <= 0)
    throw std::invalid_argument("ModelConfig: all dimensions must be positive");
  if (adapter_dim < 1)
    throw std::invalid_argument("ModelConfig: adapter_dim must be >= 1");
  if (d_model % n_heads != 0)
    throw std::invalid_argument("ModelConfig: d_model (" + std::to_string(d_model) +
                                ") not divisible by n_heads (" +
                                std::to_string(n_heads) + ")");
  if (d_head() % 2 != 0)
    throw std::invalid_argument("ModelConfig: head dim must be even for rotary");
}

PillModel PillModel::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  PillModel m;
  m.cfg = cfg;
  // Self-normalizing scale under pre-norm blocks: matrices keep activation
  // magnitude roughly constant, and the tied head yields O(1) logits.
  const double stddev = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  m.embedding = normal_matrix(cfg.vocab_size, cfg.d_model, stddev, rng);
  // Zero visual projection: at init, every image maps to the same (null)
  // embedding, so model outputs are feature-independent until stage 1 trains P.
  m.proj_w = Tensor::zeros({cfg.d_vis, cfg.d_model});
  m.proj_b = Tensor::zeros({1, cfg.d_model});
  m.layers.reserve(static_cast<size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerParams lp;
    lp.wq = normal_matrix(cfg.d_model, cfg.d_model, stddev, rng);
    lp.wk = normal_matrix(cfg.d_model, cfg.d_model, stddev, rng);
    lp.wv = normal_matrix(cfg.d_model, cfg.d_model, stddev, rng);
    lp.wo = normal_matrix(cfg.d_model, cfg.d_model, stddev, rng);
    lp.w1 = normal_matrix(cfg.d_model, cfg.d_ffn, stddev, rng);
    lp.w3 = normal_matrix(cfg.d_model, cfg.d_ffn, stddev, rng);
    lp.w2 = normal_matrix(cfg.d_ffn, cfg.d_model, stddev, rng);
    lp.norm_attn = Tensor::constant({cfg.d_model}, 1.0);
    lp.norm_ffn = Tensor::constant({cfg.d_model}, 1.0);
    lp.a_v = init_adapter(cfg.d_model, cfg.adapter_dim, rng);
    lp.a_t = init_adapter(cfg.d_model, cfg.adapter_dim, rng);
    lp.a_attn = init_adapter(cfg.d_model, cfg.adapter_dim, rng);
    lp.gate.w = Tensor::zeros({cfg.d_model, cfg.n_heads});
    lp.gate.b = Tensor::zeros({1, cfg.n_heads});
    m.layers.push_back(std::move(lp));
  }
  m.norm_final = Tensor::constant({cfg.d_model}, 1.0);
  return m;
}

// ---- adapter -----------------------------------------------------------------

Tensor swiglu_adapter(const Tensor& h, const SwigluAdapter& p) {
  Tensor b1 = add_rowvec(matmul(h, p.down1_w), p.down1_b);
  Tensor b2 = add_rowvec(matmul(h, p.down2_w), p.down2_b);
  return add(h, matmul(mul(silu(b1), b2), p.up_w));
}

// ---- forward -----------------------------------------------------------------

Tensor PillModel::forward(const TokenSequence& seq, GateTrace* trace) const {
  seq.validate();
  const int t_len = seq.length();
  if (t_len == 0) throw std::invalid_argument("forward: empty sequence");
  if (t_len > cfg.max_seq_len)
    throw std::invalid_argument("forward: sequence of length " +
                                std::to_string(t_len) + " exceeds max_seq_len " +
                                std::to_string(cfg.max_seq_len));
  if (seq.vision_features.size() % cfg.d_vis != 0 ||
      (seq.d_vis != 0 && seq.d_vis != cfg.d_vis))
    throw std::invalid_argument("forward: sequence d_vis does not match model");

  const std::vector<Run> runs = modality_runs(seq);
  const std::vector<int> vis_pos = seq.vision_positions();
  const bool has_vision = !vis_pos.empty();

  // Embed each modality run and stitch the sequence together in order.
  std::vector<Tensor> embedded;
  embedded.reserve(runs.size());
  int vision_row = 0;
  for (const Run& run : runs) {
    if (run.vision) {
      const size_t off = static_cast<size_t>(vision_row) * cfg.d_vis;
      std::vector<double> block(
          seq.vision_features.begin() + static_cast<std::ptrdiff_t>(off),
          seq.vision_features.begin() +
              static_cast<std::ptrdiff_t>(off + static_cast<size_t>(run.len) * cfg.d_vis));
      Tensor feats = Tensor::from({run.len, cfg.d_vis}, std::move(block));
      embedded.push_back(add_rowvec(matmul(feats, proj_w), proj_b));
      vision_row += run.len;
    } else {
      std::span<const int> ids(seq.tokens.data() + run.start,
                               static_cast<size_t>(run.len));
      embedded.push_back(rows_gather(embedding, ids));
    }
  }
  Tensor h = embedded.size() == 1 ? embedded[0] : concat_rows(embedded);

  // Row-wise value multiplier scaffolding for the vision gates: a 0/1 column
  // marking Vision rows and a text-rows-keep-1 base matrix.
  Tensor vis_col, text_keep;
  if (has_vision) {
    std::vector<double> col(static_cast<size_t>(t_len), 0.0);
    for (int p : vis_pos) col[static_cast<size_t>(p)] = 1.0;
    vis_col = Tensor::from({t_len, 1}, std::move(col));
    std::vector<double> keep(static_cast<size_t>(t_len) * cfg.d_model, 1.0);
    for (int p : vis_pos)
      for (int j = 0; j < cfg.d_model; ++j)
        keep[static_cast<size_t>(p) * cfg.d_model + j] = 0.0;
    text_keep = Tensor::from({t_len, cfg.d_model}, std::move(keep));
  }

  if (trace) trace->per_layer.assign(static_cast<size_t>(cfg.n_layers), {});

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams& lp = layers[static_cast<size_t>(l)];
    Tensor hn = rmsnorm(h, lp.norm_attn);

    Tensor value_mult;
    if (has_vision) {
      // One gate vector per layer per forward: tanh of the gate map applied to
      // the mean of the normed vision rows, broadcast to all Vision positions.
      Tensor pooled = mean_rows(hn, vis_pos);
      Tensor g = tanh_act(add(matmul(pooled, lp.gate.w), lp.gate.b));
      if (trace) {
        auto& row = trace->per_layer[static_cast<size_t>(l)];
        row.assign(g.values().begin(), g.values().end());
      }
      Tensor g_cols = expand_per_head(g, cfg.d_head());
      value_mult = add(matmul(vis_col, g_cols), text_keep);
    }

    Tensor attn = attention_core(hn, lp, cfg, has_vision ? &value_mult : nullptr);
    h = add(h, swiglu_adapter(attn, lp.a_attn));

    Tensor ffn = ffn_core(rmsnorm(h, lp.norm_ffn), lp);
    // Modality experts: vision rows route through a_v, text rows through a_t,
    // with no cross-position mixing.
    std::vector<Tensor> routed;
    routed.reserve(runs.size());
    for (const Run& run : runs) {
      std::vector<int> ids(static_cast<size_t>(run.len));
      for (int i = 0; i < run.len; ++i) ids[static_cast<size_t>(i)] = run.start + i;
      Tensor rows = rows_gather(ffn, ids);
      routed.push_back(swiglu_adapter(rows, run.vision ? lp.a_v : lp.a_t));
    }
    h = add(h, routed.size() == 1 ? routed[0] : concat_rows(routed));
  }

  return matmul(rmsnorm(h, norm_final), transpose(embedding));
}

Tensor PillModel::forward_base(std::span<const int> tokens) const {
  if (tokens.empty()) throw std::invalid_argument("forward_base: empty sequence");
  if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
    throw std::invalid_argument("forward_base: sequence exceeds max_seq_len");
  Tensor h = rows_gather(embedding, tokens);
  for (const LayerParams& lp : layers) {
    Tensor attn = attention_core(rmsnorm(h, lp.norm_attn), lp, cfg, nullptr);
    h = add(h, attn);
    h = add(h, ffn_core(rmsnorm(h, lp.norm_ffn), lp));
  }
  return matmul(rmsnorm(h, norm_final), transpose(embedding));
}

// ---- parameter bookkeeping -----------------------------------------------------

std::string param_group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::FrozenBase: return "frozen_base";
    case ParamGroup::AdapterV: return "adapter_v";
    case ParamGroup::AdapterT: return "adapter_t";
    case ParamGroup::AdapterAttn: return "adapter_attn";
    case ParamGroup::Gate: return "gate";
    case ParamGroup::Projection: return "projection";
  }
  throw std::invalid_argument("param_group_name: bad group");
}

std::vector<ParamRef> enumerate_params(const PillModel& model) {
  std::vector<ParamRef> out;
  auto push = [&out](std::string name, const Tensor& t, ParamGroup g, int layer,
                     bool decay) {
    out.push_back({std::move(name), t, g, layer, decay});
  };
  push("embedding", model.embedding, ParamGroup::FrozenBase, -1, true);
  push("proj.w", model.proj_w, ParamGroup::Projection, -1, true);
  push("proj.b", model.proj_b, ParamGroup::Projection, -1, false);
  for (size_t l = 0; l < model.layers.size(); ++l) {
    const LayerParams& lp = model.layers[l];
    const int li = static_cast<int>(l);
    const std::string p = "layers." + std::to_string(l) + ".";
    push(p + "wq", lp.wq, ParamGroup::FrozenBase, li, true);
    push(p + "wk", lp.wk, ParamGroup::FrozenBase, li, true);
    push(p + "wv", lp.wv, ParamGroup::FrozenBase, li, true);
    push(p + "wo", lp.wo, ParamGroup::FrozenBase, li, true);
    push(p + "w1", lp.w1, ParamGroup::FrozenBase, li, true);
    push(p + "w3", lp.w3, ParamGroup::FrozenBase, li, true);
    push(p + "w2", lp.w2, ParamGroup::FrozenBase, li, true);
    push(p + "norm_attn", lp.norm_attn, ParamGroup::FrozenBase, li, false);
    push(p + "norm_ffn", lp.norm_ffn, ParamGroup::FrozenBase, li, false);
    auto push_adapter = [&push, &p, li](const char* tag, const SwigluAdapter& a,
                                        ParamGroup g) {
      const std::string q = p + tag + ".";
      push(q + "down1_w", a.down1_w, g, li, true);
      push(q + "down1_b", a.down1_b, g, li, false);
      push(q + "down2_w", a.down2_w, g, li, true);
      push(q + "down2_b", a.down2_b, g, li, false);
      push(q + "up_w", a.up_w, g, li, true);
    };
    push_adapter("a_v", lp.a_v, ParamGroup::AdapterV);
    push_adapter("a_t", lp.a_t, ParamGroup::AdapterT);
    push_adapter("a_attn", lp.a_attn, ParamGroup::AdapterAttn);
    // Gates are deliberately exempt from weight decay: decaying a zero-init
    // gate would fight the training signal that opens it.
    push(p + "gate.w", lp.gate.w, ParamGroup::Gate, li, false);
    push(p + "gate.b", lp.gate.b, ParamGroup::Gate, li, false);
  }
  push("norm_final", model.norm_final, ParamGroup::FrozenBase, -1, false);
  return out;
}

// ---- stage scoping ---------------------------------------------------------------

TrainStageSpec TrainStageSpec::stage1() {
  TrainStageSpec s;
  s.name = "stage1";
  s.trainable_groups = {ParamGroup::AdapterV, ParamGroup::Projection};
  s.exclude_final_layer_av = true;
  s.epochs = 3;
  s.base_lr = 1e-3;
  s.seq_len = 128;
  s.batch_size = 32;
  s.wrong_answer_prob = 0.0;
  return s;
}

TrainStageSpec TrainStageSpec::stage2() {
  TrainStageSpec s;
  s.name = "stage2";
  s.trainable_groups = {ParamGroup::AdapterV, ParamGroup::AdapterT,
                        ParamGroup::AdapterAttn, ParamGroup::Gate,
                        ParamGroup::Projection};
  s.exclude_final_layer_av = false;
  s.epochs = 20;
  s.base_lr = 2e-3;
  s.seq_len = 512;
  s.batch_size = 4;
  s.wrong_answer_prob = 0.1;
  return s;
}

bool param_in_stage(const ParamRef& p, const TrainStageSpec& spec, int n_layers) {
  if (p.group == ParamGroup::FrozenBase) return false;
  if (!spec.trainable_groups.count(p.group)) return false;
  if (spec.exclude_final_layer_av && p.group == ParamGroup::AdapterV &&
      p.layer == n_layers - 1)
    return false;
  return true;
}

std::int64_t count_trainable(const PillModel& model, const TrainStageSpec& spec) {
  std::int64_t n = 0;
  for (const ParamRef& p : enumerate_params(model))
    if (param_in_stage(p, spec, model.cfg.n_layers)) n += p.tensor.size();
  return n;
}

std::int64_t count_total_params(const PillModel& model) {
  std::int64_t n = 0;
  for (const ParamRef& p : enumerate_params(model)) n += p.tensor.size();
  return n;
}

void apply_stage_flags(PillModel& model, const TrainStageSpec& spec) {
  for (ParamRef& p : enumerate_params(model)) {
    Tensor t = p.tensor;
    t.set_requires_grad(param_in_stage(p, spec, model.cfg.n_layers));
    t.zero_grad();
  }
}

}  // namespace pill
