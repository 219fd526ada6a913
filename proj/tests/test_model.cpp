#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "pill/checkpoint.hpp"
#include "pill/data.hpp"
#include "pill/model.hpp"
#include "pill/train.hpp"
#include "support/fd.hpp"
#include "support/reference_model.hpp"

using namespace pill;

namespace {

ModelConfig desk_config(int vocab_size) {
  ModelConfig cfg;
  cfg.vocab_size = vocab_size;
  return cfg;  // defaults: 64 / 4 layers / 4 heads / 512 ffn / r=8
}

ModelConfig tiny_config(int vocab_size) {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ffn = 32;
  cfg.adapter_dim = 4;
  cfg.max_seq_len = 32;
  cfg.vocab_size = vocab_size;
  return cfg;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::string temp_path(const std::string& stem) {
  return (std::filesystem::temp_directory_path() / stem).string();
}

TokenSequence sample_sequence(const Vocabulary& vocab, const DataConfig& dcfg,
                              std::uint64_t seed, int max_seq_len) {
  const auto data = generate_dataset(4, seed, dcfg, vocab);
  return encode_sample(data[0], vocab, dcfg, max_seq_len);
}

}  // namespace

TEST_CASE("model config validation rejects inconsistent dimensions") {
  ModelConfig cfg = desk_config(62);
  CHECK_NOTHROW(cfg.validate());
  SUBCASE("vocab required") {
    cfg.vocab_size = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  }
  SUBCASE("heads must divide d_model") {
    cfg.n_heads = 5;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  }
  SUBCASE("rotary needs an even head dim") {
    cfg.d_model = 12;
    cfg.n_heads = 4;  // head dim 3
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  }
  SUBCASE("adapter width positive") {
    cfg.adapter_dim = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  }
}

TEST_CASE("adapters and gates are exactly zero at init") {
  Rng rng(3);
  const PillModel m = PillModel::init(tiny_config(62), rng);
  for (const ParamRef& p : enumerate_params(m)) {
    const bool injected_zero =
        p.name.ends_with("up_w") || p.name.ends_with("gate.w") ||
        p.name.ends_with("gate.b") || p.name.starts_with("proj.");
    if (!injected_zero) continue;
    for (double x : p.tensor.values()) CHECK(x == 0.0);
  }
}

TEST_CASE("adapter map is the exact identity at init") {
  Rng rng(5);
  const PillModel m = PillModel::init(tiny_config(62), rng);
  Rng hr(17);
  std::vector<double> hv(3 * 16);
  for (double& x : hv) x = hr.normal(0.0, 1.0);
  const Tensor h = Tensor::from({3, 16}, std::vector<double>(hv));

  const Tensor out = swiglu_adapter(h, m.layers[0].a_v);
  REQUIRE(out.values().size() == hv.size());
  CHECK(std::memcmp(out.values().data(), hv.data(),
                    hv.size() * sizeof(double)) == 0);

  SUBCASE("zero down-projection also yields the identity") {
    SwigluAdapter a;
    a.down1_w = Tensor::zeros({16, 4});
    a.down1_b = Tensor::zeros({1, 4});
    a.down2_w = Tensor::constant({16, 4}, 0.3);
    a.down2_b = Tensor::constant({1, 4}, 0.1);
    a.up_w = Tensor::constant({4, 16}, 0.7);
    const Tensor out2 = swiglu_adapter(h, a);
    CHECK(std::memcmp(out2.values().data(), hv.data(),
                      hv.size() * sizeof(double)) == 0);
  }
  SUBCASE("nonzero up-projection breaks the identity") {
    PillModel m2 = m;
    auto up = m2.layers[0].a_v.up_w.values_mut();
    up[0] = 0.25;
    const Tensor out3 = swiglu_adapter(h, m2.layers[0].a_v);
    CHECK(max_abs_diff(out3.values(), hv) > 0.0);
  }
}

TEST_CASE("injected model collapses to the base on pure text at init") {
  Vocabulary vocab;
  Rng rng(11);
  const PillModel m = PillModel::init(tiny_config(vocab.size()), rng);

  const std::vector<int> tokens =
      vocab.encode("<bos> the image shows a red circle . <eos>");
  TokenSequence seq;
  seq.tokens = tokens;
  seq.modality.assign(tokens.size(), Modality::Text);
  seq.loss_mask.assign(tokens.size(), false);
  seq.loss_mask.back() = true;
  seq.validate();

  const Tensor full = m.forward(seq);
  const Tensor base = m.forward_base(tokens);
  CHECK(max_abs_diff(full.values(), base.values()) <= 1e-12);
}

TEST_CASE("injected model at init matches the plain-loop reference") {
  Vocabulary vocab;
  DataConfig dcfg;
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    Rng rng(seed);
    const PillModel m = PillModel::init(tiny_config(vocab.size()), rng);
    const TokenSequence seq = sample_sequence(vocab, dcfg, seed + 100, 32);
    const Tensor got = m.forward(seq);
    const std::vector<double> want = testsupport::reference_logits(m, seq);
    CHECK(max_abs_diff(got.values(), want) <= 1e-12);
  }

  SUBCASE("desk-size config agrees too") {
    Rng rng(9);
    const PillModel m = PillModel::init(desk_config(vocab.size()), rng);
    const TokenSequence seq = sample_sequence(vocab, dcfg, 42, 128);
    const Tensor got = m.forward(seq);
    const std::vector<double> want = testsupport::reference_logits(m, seq);
    CHECK(max_abs_diff(got.values(), want) <= 1e-12);
  }
}

TEST_CASE("image content cannot influence any logit at init") {
  // The zero visual projection maps every image to the same embedding, so the
  // untrained model is feature-blind: swapping the image changes nothing.
  Vocabulary vocab;
  DataConfig dcfg;
  Rng rng(23);
  const PillModel m = PillModel::init(tiny_config(vocab.size()), rng);
  const auto data = generate_dataset(4, 7, dcfg, vocab);
  TokenSequence a = encode_sample(data[0], vocab, dcfg, 32);
  TokenSequence b = a;
  b.vision_features = data[1].image_features;

  const Tensor la = m.forward(a);
  const Tensor lb = m.forward(b);
  CHECK(max_abs_diff(la.values(), lb.values()) == 0.0);
}

TEST_CASE("final-layer vision adapter touches only vision rows") {
  Vocabulary vocab;
  DataConfig dcfg;
  Rng rng(23);
  PillModel m = PillModel::init(tiny_config(vocab.size()), rng);
  const TokenSequence seq = sample_sequence(vocab, dcfg, 7, 32);
  const Tensor before = m.forward(seq);

  // After the final block no attention mixes rows again, so a final-layer
  // vision-adapter edit is confined to the vision rows it transforms.
  Rng pr(29);
  for (double& x : m.layers.back().a_v.up_w.values_mut())
    x = pr.normal(0.0, 0.5);
  const Tensor after = m.forward(seq);

  const int V = vocab.size();
  const auto vis = seq.vision_positions();
  const std::set<int> vis_set(vis.begin(), vis.end());
  double text_diff = 0.0, vis_diff = 0.0;
  for (int t = 0; t < seq.length(); ++t) {
    const auto a = before.values().subspan(static_cast<size_t>(t) * V, V);
    const auto b = after.values().subspan(static_cast<size_t>(t) * V, V);
    const double d = max_abs_diff(a, b);
    if (vis_set.count(t))
      vis_diff = std::max(vis_diff, d);
    else
      text_diff = std::max(text_diff, d);
  }
  CHECK(text_diff == 0.0);
  CHECK(vis_diff > 0.0);

  SUBCASE("an early-layer edit propagates through attention scores") {
    // Even with zero gates the vision rows shape the attention distribution
    // through their keys, so an early vision-adapter edit can reach text rows.
    Rng pr2(31);
    for (double& x : m.layers.front().a_v.up_w.values_mut())
      x = pr2.normal(0.0, 0.5);
    const Tensor third = m.forward(seq);
    CHECK(max_abs_diff(third.values(), after.values()) > 0.0);
  }
}

TEST_CASE("text adapter routing touches only text rows directly") {
  Vocabulary vocab;
  DataConfig dcfg;
  Rng rng(31);
  PillModel m = PillModel::init(tiny_config(vocab.size()), rng);
  const TokenSequence seq = sample_sequence(vocab, dcfg, 13, 32);
  const Tensor before = m.forward(seq);

  // Perturb only the FINAL layer's text adapter: after that layer no
  // attention mixes rows again, so vision logits cannot move.
  Rng pr(37);
  for (double& x : m.layers.back().a_t.up_w.values_mut())
    x = pr.normal(0.0, 0.5);
  const Tensor after = m.forward(seq);

  const int V = vocab.size();
  const auto vis = seq.vision_positions();
  const std::set<int> vis_set(vis.begin(), vis.end());
  double text_diff = 0.0, vis_diff = 0.0;
  for (int t = 0; t < seq.length(); ++t) {
    const auto a = before.values().subspan(static_cast<size_t>(t) * V, V);
    const auto b = after.values().subspan(static_cast<size_t>(t) * V, V);
    const double d = max_abs_diff(a, b);
    if (vis_set.count(t))
      vis_diff = std::max(vis_diff, d);
    else
      text_diff = std::max(text_diff, d);
  }
  CHECK(vis_diff == 0.0);
  CHECK(text_diff > 0.0);
}

TEST_CASE("causal masking: a future edit never changes past logits") {
  Vocabulary vocab;
  DataConfig dcfg;
  Rng rng(41);
  const PillModel m = PillModel::init(tiny_config(vocab.size()), rng);
  const auto data = generate_dataset(2, 19, dcfg, vocab);
  TokenSequence seq = encode_sample(data[0], vocab, dcfg, 32);
  const Tensor before = m.forward(seq);

  // Edit the answer token (second-to-last position).
  const int edit_pos = seq.length() - 2;
  TokenSequence edited = seq;
  edited.tokens[static_cast<size_t>(edit_pos)] = data[1].answer == data[0].answer
                                                     ? vocab.id("object")
                                                     : data[1].answer;
  const Tensor after = m.forward(edited);

  const int V = vocab.size();
  const size_t prefix = static_cast<size_t>(edit_pos) * V;
  CHECK(max_abs_diff(before.values().subspan(0, prefix),
                     after.values().subspan(0, prefix)) == 0.0);
  CHECK(max_abs_diff(before.values().subspan(prefix),
                     after.values().subspan(prefix)) > 0.0);
}

TEST_CASE("gate trace reports zeros at init and saturates under huge maps") {
  Vocabulary vocab;
  DataConfig dcfg;
  Rng rng(43);
  PillModel m = PillModel::init(tiny_config(vocab.size()), rng);
  const TokenSequence seq = sample_sequence(vocab, dcfg, 3, 32);

  GateTrace trace;
  (void)m.forward(seq, &trace);
  REQUIRE(trace.per_layer.size() == static_cast<size_t>(m.cfg.n_layers));
  for (const auto& row : trace.per_layer) {
    REQUIRE(row.size() == static_cast<size_t>(m.cfg.n_heads));
    for (double g : row) CHECK(g == 0.0);
  }

  SUBCASE("constant bias fixes the gate regardless of content") {
    for (LayerParams& lp : m.layers) {
      auto b = lp.gate.b.values_mut();
      b[0] = 0.25;
      b[1] = -1.5;
    }
    GateTrace t2;
    (void)m.forward(seq, &t2);
    for (const auto& row : t2.per_layer) {
      CHECK(row[0] == doctest::Approx(std::tanh(0.25)).epsilon(1e-12));
      CHECK(row[1] == doctest::Approx(std::tanh(-1.5)).epsilon(1e-12));
    }
  }
  SUBCASE("gates stay inside (-1, 1) even for huge pre-activations") {
    for (LayerParams& lp : m.layers) {
      for (double& x : lp.gate.w.values_mut()) x = 1e3;
      for (double& x : lp.gate.b.values_mut()) x = 1e3;
    }
    GateTrace t3;
    (void)m.forward(seq, &t3);
    for (const auto& row : t3.per_layer)
      for (double g : row) {
        CHECK(std::abs(g) <= 1.0);
        CHECK(std::abs(g) > 0.999);
      }
  }
  SUBCASE("text-only forwards record empty gate rows") {
    TokenSequence text;
    text.tokens = vocab.encode("<bos> we see a figure . <eos>");
    text.modality.assign(text.tokens.size(), Modality::Text);
    text.loss_mask.assign(text.tokens.size(), false);
    GateTrace t4;
    (void)m.forward(text, &t4);
    REQUIRE(t4.per_layer.size() == static_cast<size_t>(m.cfg.n_layers));
    for (const auto& row : t4.per_layer) CHECK(row.empty());
  }
}

TEST_CASE("every stage-2 gradient agrees with central differences") {
  Vocabulary vocab;
  DataConfig dcfg;
  Rng rng(47);
  PillModel m = PillModel::init(tiny_config(vocab.size()), rng);
  const TokenSequence seq = sample_sequence(vocab, dcfg, 21, 32);

  const TrainStageSpec spec = TrainStageSpec::stage2();
  apply_stage_flags(m, spec);

  // Move the injected parameters off their exact-zero init so every gradient
  // path is live, then check d(loss)/d(theta) for the full trainable set.
  Rng pr(53);
  std::vector<std::pair<std::string, Tensor>> params;
  for (const ParamRef& p : enumerate_params(m)) {
    if (!param_in_stage(p, spec, m.cfg.n_layers)) continue;
    Tensor leaf = p.tensor;  // handle copy; shares the underlying node
    for (double& x : leaf.values_mut()) x += pr.normal(0.0, 0.05);
    params.emplace_back(p.name, leaf);
  }
  // proj.{w,b} plus, per layer, three 5-tensor adapters and a 2-tensor gate.
  REQUIRE(params.size() == 2u + 17u * 2u);

  const auto loss_fn = [&]() { return autoregressive_loss(m.forward(seq), seq); };
  const auto worst = testsupport::check_gradients(loss_fn, params, 1e-5, 1e-4);
  INFO("worst: " << worst.param << "[" << worst.index
                 << "] analytic=" << worst.analytic
                 << " numeric=" << worst.numeric << " rel=" << worst.err);
  CHECK(worst.err < 1e-4);
}

TEST_CASE("trainable parameter counts match the closed forms") {
  Vocabulary vocab;
  Rng rng(59);
  const PillModel m = PillModel::init(desk_config(vocab.size()), rng);
  const int d = 64, r = 8, H = 4, L = 4, dv = 16;

  const std::int64_t adapter = 2 * (d * r + r) + r * d;   // two downs + up
  const std::int64_t gate = d * H + H;
  const std::int64_t proj = dv * d + d;
  CHECK(adapter == 1552);
  CHECK(gate == 260);
  CHECK(proj == 1088);

  const std::int64_t stage1 = (L - 1) * adapter + proj;
  const std::int64_t stage2 = L * (3 * adapter + gate) + proj;
  CHECK(count_trainable(m, TrainStageSpec::stage1()) == stage1);
  CHECK(count_trainable(m, TrainStageSpec::stage2()) == stage2);
  CHECK(stage1 == 5744);
  CHECK(stage2 == 20752);
  CHECK(count_trainable(m, TrainStageSpec::stage2()) >
        count_trainable(m, TrainStageSpec::stage1()));

  const std::int64_t base_layer =
      4 * d * d + 2 * d * 512 + 512 * d + 2 * d;  // qkvo + w1/w3 + w2 + norms
  const std::int64_t total = 62 * d + proj + L * (base_layer + 3 * adapter + gate) + d;
  CHECK(count_total_params(m) == total);
  CHECK(static_cast<double>(stage2) / static_cast<double>(total) < 0.05);
}

TEST_CASE("stage flags gate exactly the stage's parameter set") {
  Vocabulary vocab;
  Rng rng(61);
  PillModel m = PillModel::init(desk_config(vocab.size()), rng);

  const TrainStageSpec s1 = TrainStageSpec::stage1();
  apply_stage_flags(m, s1);
  for (const ParamRef& p : enumerate_params(m))
    CHECK(p.tensor.node()->needs_grad == param_in_stage(p, s1, m.cfg.n_layers));

  // The alignment stage trains the visual projection and all vision adapters
  // except the final layer's.
  int n_trainable = 0;
  for (const ParamRef& p : enumerate_params(m)) {
    if (!p.tensor.node()->needs_grad) continue;
    ++n_trainable;
    const bool ok = p.group == ParamGroup::Projection ||
                    (p.group == ParamGroup::AdapterV && p.layer != m.cfg.n_layers - 1);
    CHECK(ok);
  }
  CHECK(n_trainable == 2 + 5 * (m.cfg.n_layers - 1));

  const TrainStageSpec s2 = TrainStageSpec::stage2();
  apply_stage_flags(m, s2);
  for (const ParamRef& p : enumerate_params(m)) {
    const bool want = p.group != ParamGroup::FrozenBase;
    CHECK(p.tensor.node()->needs_grad == want);
  }
}

TEST_CASE("parameter enumeration is stable, named, and decay-flagged") {
  Vocabulary vocab;
  Rng rng(67);
  const PillModel m = PillModel::init(tiny_config(vocab.size()), rng);
  const auto params = enumerate_params(m);
  REQUIRE(params.size() >= 3);
  CHECK(params[0].name == "embedding");
  CHECK(params[1].name == "proj.w");
  CHECK(params[2].name == "proj.b");
  CHECK(params.back().name == "norm_final");

  std::set<std::string> names;
  for (const auto& p : params) names.insert(p.name);
  CHECK(names.size() == params.size());  // unique
  CHECK(names.count("layers.0.a_v.down1_w") == 1);
  CHECK(names.count("layers.1.a_attn.up_w") == 1);
  CHECK(names.count("layers.1.gate.b") == 1);

  for (const auto& p : params) {
    const bool is_bias_or_norm = p.name.ends_with("_b") || p.name.ends_with(".b") ||
                                 p.name.find("norm") != std::string::npos ||
                                 p.name.find("gate") != std::string::npos;
    if (is_bias_or_norm)
      CHECK_FALSE(p.decay);
    else
      CHECK(p.decay);
  }
}

TEST_CASE("checkpoints round-trip byte-exactly and reject malformed files") {
  Vocabulary vocab;
  Rng rng(71);
  PillModel m = PillModel::init(tiny_config(vocab.size()), rng);
  // Leave the injected parameters off-zero so the test is not trivial.
  for (double& x : m.layers[0].a_v.up_w.values_mut()) x = 0.125;

  const std::string path = temp_path("pill_test_ckpt.bin");
  save_checkpoint(m, path);
  const PillModel loaded = load_checkpoint(path);

  CHECK(loaded.cfg.d_model == m.cfg.d_model);
  CHECK(loaded.cfg.n_layers == m.cfg.n_layers);
  CHECK(loaded.cfg.vocab_size == m.cfg.vocab_size);
  const auto pa = enumerate_params(m);
  const auto pb = enumerate_params(loaded);
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    const auto va = pa[i].tensor.values();
    const auto vb = pb[i].tensor.values();
    REQUIRE(va.size() == vb.size());
    CHECK(std::memcmp(va.data(), vb.data(), va.size() * sizeof(double)) == 0);
  }

  // Saving the loaded model reproduces the file bit for bit.
  const std::string path2 = temp_path("pill_test_ckpt2.bin");
  save_checkpoint(loaded, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)),
                       std::istreambuf_iterator<char>());
  const std::string b2((std::istreambuf_iterator<char>(f2)),
                       std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  CHECK(!b1.empty());

  SUBCASE("bad magic") {
    std::ofstream out(path2, std::ios::binary);
    out << "NOTACKPT" << b1.substr(8);
    out.close();
    CHECK_THROWS_AS((void)load_checkpoint(path2), checkpoint_error);
  }
  SUBCASE("bad version") {
    std::string mutated = b1;
    mutated[8] = static_cast<char>(0x7F);
    std::ofstream out(path2, std::ios::binary);
    out << mutated;
    out.close();
    CHECK_THROWS_AS((void)load_checkpoint(path2), checkpoint_error);
  }
  SUBCASE("truncated payload") {
    std::ofstream out(path2, std::ios::binary);
    out << b1.substr(0, b1.size() / 2);
    out.close();
    CHECK_THROWS_AS((void)load_checkpoint(path2), checkpoint_error);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS((void)load_checkpoint(temp_path("no_such_ckpt.bin")),
                    checkpoint_error);
  }
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("group hashes detect exactly the groups that changed") {
  Vocabulary vocab;
  Rng rng(73);
  PillModel m = PillModel::init(tiny_config(vocab.size()), rng);
  const std::set<ParamGroup> base{ParamGroup::FrozenBase};
  const std::set<ParamGroup> inj{ParamGroup::AdapterV, ParamGroup::AdapterT,
                                 ParamGroup::AdapterAttn, ParamGroup::Gate,
                                 ParamGroup::Projection};

  const std::string h_base = hash_param_groups(m, base);
  const std::string h_inj = hash_param_groups(m, inj);
  CHECK(h_base == hash_param_groups(m, base));  // deterministic
  CHECK(h_base != h_inj);
  REQUIRE(h_base.size() == 64u);  // hex sha-256

  m.layers[1].wq.values_mut()[0] += 1.0;
  CHECK(hash_param_groups(m, base) != h_base);
  CHECK(hash_param_groups(m, inj) == h_inj);

  m.layers[0].a_t.down1_w.values_mut()[0] += 1.0;
  CHECK(hash_param_groups(m, inj) != h_inj);
}
