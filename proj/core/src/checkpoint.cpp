#include "pill/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "pill/sha256.hpp"

namespace pill {

namespace {

constexpr char kMagic[8] = {'P', 'I', 'L', 'L', 'C', 'K', 'P', 'T'};

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(out, bits);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw checkpoint_error("checkpoint: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw checkpoint_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& in) {
  const std::uint64_t bits = get_u64(in);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

void put_config(std::ostream& out, const ModelConfig& c) {
  for (int v : {c.d_model, c.n_layers, c.n_heads, c.d_ffn, c.vocab_size,
                c.max_seq_len, c.d_vis, c.queries_per_image, c.adapter_dim})
    put_u32(out, static_cast<std::uint32_t>(v));
}

ModelConfig get_config(std::istream& in) {
  ModelConfig c;
  c.d_model = static_cast<int>(get_u32(in));
  c.n_layers = static_cast<int>(get_u32(in));
  c.n_heads = static_cast<int>(get_u32(in));
  c.d_ffn = static_cast<int>(get_u32(in));
  c.vocab_size = static_cast<int>(get_u32(in));
  c.max_seq_len = static_cast<int>(get_u32(in));
  c.d_vis = static_cast<int>(get_u32(in));
  c.queries_per_image = static_cast<int>(get_u32(in));
  c.adapter_dim = static_cast<int>(get_u32(in));
  return c;
}

}  // namespace

void save_checkpoint(const PillModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw checkpoint_error("checkpoint: cannot write " + path);
  out.write(kMagic, sizeof(kMagic));
  put_u32(out, kCheckpointVersion);
  put_config(out, model.cfg);

  const std::vector<ParamRef> params = enumerate_params(model);
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const ParamRef& p : params) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const unsigned char trainable = p.group == ParamGroup::FrozenBase ? 0 : 1;
    out.write(reinterpret_cast<const char*>(&trainable), 1);
    const Shape& shape = p.tensor.shape();
    put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) put_u64(out, static_cast<std::uint64_t>(d));
    for (double v : p.tensor.values()) put_f64(out, v);
  }
  if (!out) throw checkpoint_error("checkpoint: write failed for " + path);
}

PillModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw checkpoint_error("checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw checkpoint_error("checkpoint: bad magic in " + path);
  const std::uint32_t version = get_u32(in);
  if (version != kCheckpointVersion)
    throw checkpoint_error("checkpoint: format version " + std::to_string(version) +
                           " unsupported (want " +
                           std::to_string(kCheckpointVersion) + ")");
  const ModelConfig cfg = get_config(in);
  cfg.validate();

  // Build a skeleton with the right tensor shapes, then fill values in place.
  Rng scratch(0);
  PillModel model = PillModel::init(cfg, scratch);
  std::vector<ParamRef> params = enumerate_params(model);

  const std::uint32_t n_blocks = get_u32(in);
  if (n_blocks != params.size())
    throw checkpoint_error("checkpoint: " + std::to_string(n_blocks) +
                           " blocks, expected " + std::to_string(params.size()));
  for (ParamRef& p : params) {
    const std::uint32_t name_len = get_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in || name != p.name)
      throw checkpoint_error("checkpoint: block '" + name + "' where '" +
                             p.name + "' expected");
    unsigned char trainable = 0;
    in.read(reinterpret_cast<char*>(&trainable), 1);
    const unsigned char want = p.group == ParamGroup::FrozenBase ? 0 : 1;
    if (!in || trainable != want)
      throw checkpoint_error("checkpoint: block '" + name +
                             "' has wrong trainable flag");
    const std::uint32_t ndim = get_u32(in);
    Shape shape(ndim);
    for (std::uint32_t i = 0; i < ndim; ++i)
      shape[i] = static_cast<int>(get_u64(in));
    if (shape != p.tensor.shape())
      throw checkpoint_error("checkpoint: block '" + name + "' has shape " +
                             shape_str(shape) + ", expected " +
                             shape_str(p.tensor.shape()));
    Tensor t = p.tensor;
    auto dst = t.values_mut();
    for (double& v : dst) v = get_f64(in);
  }
  // Must be at EOF now.
  char extra;
  in.read(&extra, 1);
  if (in.gcount() != 0)
    throw checkpoint_error("checkpoint: trailing bytes in " + path);
  return model;
}

std::string hash_param(const ParamRef& p) {
  Sha256 h;
  h.update(p.name.data(), p.name.size());
  for (int d : p.tensor.shape()) {
    const std::uint64_t v = static_cast<std::uint64_t>(d);
    h.update(&v, sizeof(v));
  }
  const auto vals = p.tensor.values();
  h.update(vals.data(), vals.size() * sizeof(double));
  return h.hex();
}

std::string hash_param_groups(const PillModel& model,
                              const std::set<ParamGroup>& groups) {
  Sha256 h;
  for (const ParamRef& p : enumerate_params(model)) {
    if (!groups.count(p.group)) continue;
    h.update(p.name.data(), p.name.size());
    for (int d : p.tensor.shape()) {
      const std::uint64_t v = static_cast<std::uint64_t>(d);
      h.update(&v, sizeof(v));
    }
    const auto vals = p.tensor.values();
    h.update(vals.data(), vals.size() * sizeof(double));
  }
  return h.hex();
}

}  // namespace pill
