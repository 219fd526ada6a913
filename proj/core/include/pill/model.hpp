#pragma once

#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "pill/data.hpp"
#include "pill/rng.hpp"
#include "pill/tensor.hpp"

namespace pill {

struct ModelConfig {
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ffn = 512;
  int vocab_size = 0;        // set from the Vocabulary at build time
  int max_seq_len = 128;
  int d_vis = 16;            // raw visual feature dimension
  int queries_per_image = 4; // Vision positions contributed per image
  int adapter_dim = 8;       // bottleneck width r of every injected adapter

  int d_head() const { return d_model / n_heads; }
  void validate() const;
};

// Bottleneck adapter with a gated (SiLU x linear) hidden product and a
// zero-initialized up-projection, so it is exactly the identity at init.
// Down-projections carry biases; the up-projection is bias-free to preserve
// the identity property.
struct SwigluAdapter {
  Tensor down1_w, down1_b;  // [d_model x r], [1 x r]
  Tensor down2_w, down2_b;  // [d_model x r], [1 x r]
  Tensor up_w;              // [r x d_model], zero at init
};

// Affine map d_model -> n_heads feeding the per-head tanh gate; weights and
// bias start at zero so every gate is exactly 0 at init.
struct GateMap {
  Tensor w;  // [d_model x n_heads]
  Tensor b;  // [1 x n_heads]
};

struct LayerParams {
  // Frozen base block.
  Tensor wq, wk, wv, wo;          // [d_model x d_model]
  Tensor w1, w3;                  // [d_model x d_ffn]
  Tensor w2;                      // [d_ffn x d_model]
  Tensor norm_attn, norm_ffn;     // [d_model]
  // Injected trainables.
  SwigluAdapter a_v, a_t, a_attn;
  GateMap gate;
};

// Per-forward record of the per-head vision gates, one row per layer; rows are
// empty for forwards with no Vision positions.
struct GateTrace {
  std::vector<std::vector<double>> per_layer;  // [n_layers][n_heads]
};

struct PillModel {
  ModelConfig cfg;
  Tensor embedding;        // [vocab x d_model]; output head is tied to it
  Tensor proj_w, proj_b;   // visual projection: [d_vis x d_model], [1 x d_model]
  std::vector<LayerParams> layers;
  Tensor norm_final;       // [d_model]

  // Randomly initialized base, zero-initialized injections (identity model).
  static PillModel init(const ModelConfig& cfg, Rng& rng);

  // Full forward over an interleaved sequence: token/vision embedding,
  // n_layers blocks with causal masking, final norm, tied head.
  Tensor forward(const TokenSequence& seq, GateTrace* trace = nullptr) const;

  // The base transformer only (no adapters, no gates, no vision); used for
  // pre-training the base and as the text-side equivalence reference.
  Tensor forward_base(std::span<const int> tokens) const;
};

// The adapter map itself: up(silu(down1 h) * down2 h) + h.
Tensor swiglu_adapter(const Tensor& h, const SwigluAdapter& p);

// Parameter bookkeeping ------------------------------------------------------

enum class ParamGroup { FrozenBase, AdapterV, AdapterT, AdapterAttn, Gate, Projection };

std::string param_group_name(ParamGroup g);

struct ParamRef {
  std::string name;   // e.g. "layers.2.a_v.down1_w"
  Tensor tensor;
  ParamGroup group;
  int layer;          // -1 for model-level parameters
  bool decay;         // weight decay applies (matrix weights only, not biases/gates)
};

// Every parameter in a fixed, stable order (serialization and hashing order).
std::vector<ParamRef> enumerate_params(const PillModel& model);

// Which parameter groups train in a stage, plus its schedule.
struct TrainStageSpec {
  std::string name;                      // "stage1" | "stage2" | custom
  std::set<ParamGroup> trainable_groups;
  // The alignment stage deliberately leaves the final layer's vision adapter
  // frozen; it only becomes trainable in the joint stage.
  bool exclude_final_layer_av = false;
  int epochs = 1;
  double base_lr = 1e-3;
  int seq_len = 128;
  int batch_size = 32;
  double wrong_answer_prob = 0.0;

  static TrainStageSpec stage1();
  static TrainStageSpec stage2();
};

// True when `p` receives gradients under `spec` for a model with n_layers.
bool param_in_stage(const ParamRef& p, const TrainStageSpec& spec, int n_layers);

// Exact count of scalars trained under the stage spec.
std::int64_t count_trainable(const PillModel& model, const TrainStageSpec& spec);

std::int64_t count_total_params(const PillModel& model);

// Sets requires_grad on exactly the stage's trainable set (everything else off).
void apply_stage_flags(PillModel& model, const TrainStageSpec& spec);

}  // namespace pill
