#include "pill/data.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace pill {

namespace {

using nlohmann::json;

const char* kColorWords[kNumColors] = {"red", "green", "blue", "yellow"};
const char* kShapeWords[kNumShapes] = {"circle", "square", "triangle"};
const char* kCountWords[kNumCounts] = {"one", "two", "three"};

// Channel layout of one visual feature row. Attribute one-hots occupy the
// first ten channels; channel 10 is a deliberately high-variance noise
// channel; anything beyond is low-amplitude noise.
constexpr int kColorOffset = 0;
constexpr int kShapeOffset = 4;
constexpr int kCountOffset = 7;
constexpr int kLoudChannel = 10;
constexpr double kLoudScale = 5.0;
constexpr int kMinDVis = 11;

struct Tuple {
  int color, shape, count;
};

std::vector<Tuple> all_tuples() {
  std::vector<Tuple> t;
  t.reserve(kNumColors * kNumShapes * kNumCounts);
  for (int c = 0; c < kNumColors; ++c)
    for (int s = 0; s < kNumShapes; ++s)
      for (int k = 0; k < kNumCounts; ++k) t.push_back({c, s, k});
  return t;
}

}  // namespace

// ---- TokenSequence ----------------------------------------------------------

std::vector<int> TokenSequence::vision_positions() const {
  std::vector<int> pos;
  for (int i = 0; i < length(); ++i)
    if (modality[static_cast<size_t>(i)] == Modality::Vision) pos.push_back(i);
  return pos;
}

int TokenSequence::first_masked_pos() const {
  for (int i = 0; i < length(); ++i)
    if (loss_mask[static_cast<size_t>(i)]) return i;
  return -1;
}

void TokenSequence::validate() const {
  const size_t n = tokens.size();
  if (modality.size() != n || loss_mask.size() != n)
    throw std::invalid_argument("TokenSequence: parallel arrays disagree in length");
  size_t n_vision = 0;
  for (size_t i = 0; i < n; ++i) {
    if (modality[i] == Modality::Vision) {
      ++n_vision;
      if (loss_mask[i])
        throw std::invalid_argument("TokenSequence: loss mask set on a Vision position");
    }
  }
  if (d_vis <= 0 && n_vision > 0)
    throw std::invalid_argument("TokenSequence: Vision positions but d_vis unset");
  if (n_vision * static_cast<size_t>(d_vis) != vision_features.size())
    throw std::invalid_argument("TokenSequence: feature block does not match Vision positions");
}

// ---- Vocabulary -------------------------------------------------------------

Vocabulary::Vocabulary() {
  words_ = {
      "<pad>", "<bos>", "<eos>", "<img>",
      // attribute answers
      "red", "green", "blue", "yellow", "circle", "square", "triangle",
      "one", "two", "three",
      // question vocabulary
      "what", "color", "shape", "is", "the", "object", "?", "how", "many",
      "objects", "are", "there",
      // declarative vocabulary
      "image", "shows", ".", "a", "picture", "contains", "items", "in",
      "scene", "this", "that", "has", "with", "of",
      // filler so the distribution is not trivially peaked
      "an", "we", "see", "here", "small", "large", "bright", "dark",
      "figure", "drawing", "view", "frame", "panel", "canvas", "tiny",
      "huge", "it", "and", "displays", "depicts", "holds", "appears",
  };
  for (size_t i = 0; i < words_.size(); ++i)
    index_.emplace(words_[i], static_cast<int>(i));
}

bool Vocabulary::contains(const std::string& word) const {
  return index_.count(word) != 0;
}

int Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end())
    throw std::invalid_argument("Vocabulary: unknown word '" + word + "'");
  return it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size())
    throw std::invalid_argument("Vocabulary: id " + std::to_string(id) +
                                " out of range");
  return words_[static_cast<size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::vector<int> ids;
  std::istringstream in(text);
  std::string w;
  while (in >> w) ids.push_back(id(w));
  return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word(ids[i]);
  }
  return out;
}

// ---- dataset ----------------------------------------------------------------

std::string question_kind_name(QuestionKind k) {
  switch (k) {
    case QuestionKind::Color: return "color";
    case QuestionKind::Shape: return "shape";
    case QuestionKind::Count: return "count";
  }
  throw std::invalid_argument("question_kind_name: bad kind");
}

void DataConfig::validate() const {
  if (d_vis < kMinDVis)
    throw std::invalid_argument("DataConfig: d_vis must be >= " +
                                std::to_string(kMinDVis) + ", got " +
                                std::to_string(d_vis));
  if (k_vision < 1) throw std::invalid_argument("DataConfig: k_vision must be >= 1");
  if (jitter < 0.0) throw std::invalid_argument("DataConfig: jitter must be >= 0");
  const int n_tuples = kNumColors * kNumShapes * kNumCounts;
  if (test_tuples < 0 || test_tuples >= n_tuples)
    throw std::invalid_argument("DataConfig: test_tuples must be in [0, " +
                                std::to_string(n_tuples) + ")");
}

namespace {

std::vector<double> encode_features(const Tuple& t, const DataConfig& cfg,
                                    Rng& rng) {
  std::vector<double> feat(static_cast<size_t>(cfg.k_vision) * cfg.d_vis, 0.0);
  for (int q = 0; q < cfg.k_vision; ++q) {
    double* row = feat.data() + static_cast<size_t>(q) * cfg.d_vis;
    row[kColorOffset + t.color] = 1.0;
    row[kShapeOffset + t.shape] = 1.0;
    row[kCountOffset + t.count] = 1.0;
    for (int j = 0; j < kLoudChannel; ++j) row[j] += rng.normal(0.0, cfg.jitter);
    row[kLoudChannel] = rng.normal(0.0, kLoudScale);
    for (int j = kLoudChannel + 1; j < cfg.d_vis; ++j)
      row[j] = rng.normal(0.0, cfg.jitter);
  }
  return feat;
}

// Picks `want` held-out tuples with per-attribute caps so no attribute class
// is over-represented in the test split (keeps chance-level evaluation flat).
std::vector<bool> pick_test_tuples(const std::vector<Tuple>& tuples, int want,
                                   Rng& rng) {
  const int n = static_cast<int>(tuples.size());
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  rng.shuffle(order);

  auto cap = [want](int classes) { return (want + classes - 1) / classes; };
  const int color_cap = cap(kNumColors), shape_cap = cap(kNumShapes),
            count_cap = cap(kNumCounts);
  std::vector<int> by_color(kNumColors, 0), by_shape(kNumShapes, 0),
      by_count(kNumCounts, 0);
  std::vector<bool> picked(static_cast<size_t>(n), false);
  int taken = 0;
  for (int idx : order) {
    if (taken == want) break;
    const Tuple& t = tuples[static_cast<size_t>(idx)];
    if (by_color[static_cast<size_t>(t.color)] >= color_cap ||
        by_shape[static_cast<size_t>(t.shape)] >= shape_cap ||
        by_count[static_cast<size_t>(t.count)] >= count_cap)
      continue;
    picked[static_cast<size_t>(idx)] = true;
    ++by_color[static_cast<size_t>(t.color)];
    ++by_shape[static_cast<size_t>(t.shape)];
    ++by_count[static_cast<size_t>(t.count)];
    ++taken;
  }
  // The caps always admit a full selection for the default sizes; if a custom
  // size stalls the greedy pass, fill the remainder without caps.
  for (int idx : order) {
    if (taken == want) break;
    if (!picked[static_cast<size_t>(idx)]) {
      picked[static_cast<size_t>(idx)] = true;
      ++taken;
    }
  }
  return picked;
}

}  // namespace

std::vector<SyntheticSample> generate_dataset(int n, std::uint64_t seed,
                                              const DataConfig& cfg,
                                              const Vocabulary& vocab) {
  if (n < 1) throw std::invalid_argument("generate_dataset: n must be >= 1");
  cfg.validate();

  const std::vector<Tuple> tuples = all_tuples();
  Rng root(seed);
  Rng split_rng = root.fork(1);
  Rng cycle_rng = root.fork(2);
  Rng feat_rng = root.fork(3);
  Rng order_rng = root.fork(4);

  const std::vector<bool> is_test = pick_test_tuples(tuples, cfg.test_tuples, split_rng);

  // Stratify over latent tuples: cycle a tuple order so every class count is
  // balanced up to the division remainder. Reshuffling at the start of each
  // pass keeps the cycling question kind (i mod 3) independent of the tuple —
  // with a fixed order, 3 divides the cycle length and every tuple would be
  // welded to a single kind forever.
  std::vector<int> cycle(tuples.size());
  for (size_t i = 0; i < cycle.size(); ++i) cycle[i] = static_cast<int>(i);

  std::vector<SyntheticSample> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (static_cast<size_t>(i) % cycle.size() == 0) cycle_rng.shuffle(cycle);
    const int ti = cycle[static_cast<size_t>(i) % cycle.size()];
    const Tuple& t = tuples[static_cast<size_t>(ti)];
    SyntheticSample s;
    s.color = t.color;
    s.shape = t.shape;
    s.count = t.count;
    s.kind = static_cast<QuestionKind>(i % 3);
    s.image_features = encode_features(t, cfg, feat_rng);
    switch (s.kind) {
      case QuestionKind::Color:
        s.question_tokens = vocab.encode("what color is the object ?");
        for (const char* w : kColorWords) s.options.push_back(vocab.id(w));
        s.answer = vocab.id(kColorWords[t.color]);
        break;
      case QuestionKind::Shape:
        s.question_tokens = vocab.encode("what shape is the object ?");
        for (const char* w : kShapeWords) s.options.push_back(vocab.id(w));
        s.answer = vocab.id(kShapeWords[t.shape]);
        break;
      case QuestionKind::Count:
        s.question_tokens = vocab.encode("how many objects are there ?");
        for (const char* w : kCountWords) s.options.push_back(vocab.id(w));
        s.answer = vocab.id(kCountWords[t.count]);
        break;
    }
    s.split = is_test[static_cast<size_t>(ti)] ? Split::Test : Split::Train;
    out.push_back(std::move(s));
  }
  order_rng.shuffle(out);
  return out;
}

int decode_attribute(const SyntheticSample& s, QuestionKind kind,
                     const DataConfig& cfg) {
  int offset = 0, classes = 0;
  switch (kind) {
    case QuestionKind::Color: offset = kColorOffset; classes = kNumColors; break;
    case QuestionKind::Shape: offset = kShapeOffset; classes = kNumShapes; break;
    case QuestionKind::Count: offset = kCountOffset; classes = kNumCounts; break;
  }
  // Mean over the K rows, then argmax over the attribute's channels.
  int best = 0;
  double best_v = -1e300;
  for (int c = 0; c < classes; ++c) {
    double acc = 0.0;
    for (int q = 0; q < cfg.k_vision; ++q)
      acc += s.image_features[static_cast<size_t>(q) * cfg.d_vis + offset + c];
    if (acc > best_v) {
      best_v = acc;
      best = c;
    }
  }
  return best;
}

// ---- sequence construction ----------------------------------------------------

TokenSequence build_interleaved_sequence(
    std::span<const int> text_tokens, const std::vector<bool>& text_loss_mask,
    const std::vector<std::vector<double>>& images, const DataConfig& cfg,
    int max_seq_len) {
  cfg.validate();
  if (text_loss_mask.size() != text_tokens.size())
    throw std::invalid_argument(
        "build_interleaved_sequence: loss mask length does not match tokens");
  size_t n_placeholders = 0;
  for (int t : text_tokens)
    if (t == Vocabulary::kImg) ++n_placeholders;
  if (n_placeholders != images.size())
    throw std::invalid_argument(
        "build_interleaved_sequence: " + std::to_string(n_placeholders) +
        " image placeholders but " + std::to_string(images.size()) +
        " feature blocks");
  const size_t block = static_cast<size_t>(cfg.k_vision) * cfg.d_vis;
  for (const auto& img : images) {
    if (img.size() != block)
      throw std::invalid_argument(
          "build_interleaved_sequence: feature block of " +
          std::to_string(img.size()) + " values, want " + std::to_string(block));
  }
  const size_t total =
      text_tokens.size() - n_placeholders + n_placeholders * cfg.k_vision;
  if (total > static_cast<size_t>(max_seq_len))
    throw std::invalid_argument("build_interleaved_sequence: length " +
                                std::to_string(total) + " exceeds max_seq_len " +
                                std::to_string(max_seq_len));

  TokenSequence seq;
  seq.d_vis = cfg.d_vis;
  seq.tokens.reserve(total);
  size_t img_idx = 0;
  for (size_t i = 0; i < text_tokens.size(); ++i) {
    if (text_tokens[i] == Vocabulary::kImg) {
      const auto& img = images[img_idx++];
      for (int q = 0; q < cfg.k_vision; ++q) {
        seq.tokens.push_back(Vocabulary::kImg);
        seq.modality.push_back(Modality::Vision);
        seq.loss_mask.push_back(false);
      }
      seq.vision_features.insert(seq.vision_features.end(), img.begin(), img.end());
    } else {
      seq.tokens.push_back(text_tokens[i]);
      seq.modality.push_back(Modality::Text);
      seq.loss_mask.push_back(text_loss_mask[i]);
    }
  }
  seq.validate();
  return seq;
}

TokenSequence encode_sample(const SyntheticSample& s, const Vocabulary& vocab,
                            const DataConfig& cfg, int max_seq_len) {
  std::vector<int> text;
  std::vector<bool> mask;
  text.push_back(Vocabulary::kBos);
  mask.push_back(false);
  for (int t : s.question_tokens) {
    if (t < 0 || t >= vocab.size())
      throw std::invalid_argument("encode_sample: question token out of vocabulary");
    text.push_back(t);
    mask.push_back(false);
  }
  text.push_back(Vocabulary::kImg);
  mask.push_back(false);
  if (s.answer < 0 || s.answer >= vocab.size())
    throw std::invalid_argument("encode_sample: answer token out of vocabulary");
  text.push_back(s.answer);
  mask.push_back(true);
  text.push_back(Vocabulary::kEos);
  mask.push_back(true);
  return build_interleaved_sequence(text, mask, {s.image_features}, cfg,
                                    max_seq_len);
}

// ---- corpus -------------------------------------------------------------------

std::vector<std::vector<int>> generate_text_corpus(int n, std::uint64_t seed,
                                                   const Vocabulary& vocab) {
  if (n < 1) throw std::invalid_argument("generate_text_corpus: n must be >= 1");
  Rng rng(seed);
  const char* declarative[] = {
      "the image shows % objects .",
      "a picture contains % items .",
      "there are % objects in the scene .",
      "this drawing depicts % items .",
      "we see % objects here .",
  };
  std::vector<std::vector<int>> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int color = static_cast<int>(rng.uniform_int(kNumColors));
    const int shape = static_cast<int>(rng.uniform_int(kNumShapes));
    const int count = static_cast<int>(rng.uniform_int(kNumCounts));
    const int tmpl = static_cast<int>(rng.uniform_int(8));
    std::string sentence;
    if (tmpl < 5) {
      const std::string attrs = std::string(kCountWords[count]) + " " +
                                kColorWords[color] + " " + kShapeWords[shape];
      sentence = declarative[tmpl];
      sentence.replace(sentence.find('%'), 1, attrs);
    } else if (tmpl == 5) {
      sentence = std::string("what color is the object ? ") + kColorWords[color] + " .";
    } else if (tmpl == 6) {
      sentence = std::string("what shape is the object ? ") + kShapeWords[shape] + " .";
    } else {
      sentence = std::string("how many objects are there ? ") + kCountWords[count] + " .";
    }
    std::vector<int> ids;
    ids.push_back(Vocabulary::kBos);
    for (int t : vocab.encode(sentence)) ids.push_back(t);
    ids.push_back(Vocabulary::kEos);
    out.push_back(std::move(ids));
  }
  return out;
}

// ---- persistence ----------------------------------------------------------------

void save_dataset_jsonl(const std::vector<SyntheticSample>& data,
                        const Vocabulary& vocab, const std::string& path) {
  std::ofstream outf(path);
  if (!outf) throw std::runtime_error("save_dataset_jsonl: cannot write " + path);
  for (const auto& s : data) {
    json rec;
    rec["color"] = s.color;
    rec["shape"] = s.shape;
    rec["count"] = s.count;
    rec["kind"] = question_kind_name(s.kind);
    rec["features"] = s.image_features;
    rec["question"] = vocab.decode(s.question_tokens);
    json opts = json::array();
    for (int o : s.options) opts.push_back(vocab.word(o));
    rec["options"] = std::move(opts);
    rec["answer"] = vocab.word(s.answer);
    rec["split"] = s.split == Split::Test ? "test" : "train";
    outf << rec.dump() << '\n';
  }
  if (!outf) throw std::runtime_error("save_dataset_jsonl: write failed for " + path);
}

std::vector<SyntheticSample> load_dataset_jsonl(const Vocabulary& vocab,
                                                const DataConfig& cfg,
                                                const std::string& path) {
  std::ifstream inf(path);
  if (!inf) throw std::runtime_error("load_dataset_jsonl: cannot open " + path);
  const size_t block = static_cast<size_t>(cfg.k_vision) * cfg.d_vis;
  std::vector<SyntheticSample> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(inf, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error("load_dataset_jsonl: bad JSON at " + path + ":" +
                               std::to_string(line_no) + ": " + e.what());
    }
    SyntheticSample s;
    s.color = rec.at("color").get<int>();
    s.shape = rec.at("shape").get<int>();
    s.count = rec.at("count").get<int>();
    const std::string kind = rec.at("kind").get<std::string>();
    if (kind == "color") s.kind = QuestionKind::Color;
    else if (kind == "shape") s.kind = QuestionKind::Shape;
    else if (kind == "count") s.kind = QuestionKind::Count;
    else
      throw std::runtime_error("load_dataset_jsonl: unknown kind '" + kind +
                               "' at line " + std::to_string(line_no));
    s.image_features = rec.at("features").get<std::vector<double>>();
    if (s.image_features.size() != block)
      throw std::runtime_error(
          "load_dataset_jsonl: feature block size mismatch at line " +
          std::to_string(line_no));
    s.question_tokens = vocab.encode(rec.at("question").get<std::string>());
    for (const auto& o : rec.at("options"))
      s.options.push_back(vocab.id(o.get<std::string>()));
    s.answer = vocab.id(rec.at("answer").get<std::string>());
    s.split = rec.at("split").get<std::string>() == "test" ? Split::Test
                                                           : Split::Train;
    out.push_back(std::move(s));
  }
  return out;
}

void save_corpus_text(const std::vector<std::vector<int>>& corpus,
                      const Vocabulary& vocab, const std::string& path) {
  std::ofstream outf(path);
  if (!outf) throw std::runtime_error("save_corpus_text: cannot write " + path);
  for (const auto& seq : corpus) {
    std::span<const int> body(seq);
    if (!body.empty() && body.front() == Vocabulary::kBos) body = body.subspan(1);
    if (!body.empty() && body.back() == Vocabulary::kEos)
      body = body.subspan(0, body.size() - 1);
    outf << vocab.decode(body) << '\n';
  }
  if (!outf) throw std::runtime_error("save_corpus_text: write failed for " + path);
}

std::vector<std::vector<int>> load_corpus_text(const Vocabulary& vocab,
                                               const std::string& path) {
  std::ifstream inf(path);
  if (!inf) throw std::runtime_error("load_corpus_text: cannot open " + path);
  std::vector<std::vector<int>> out;
  std::string line;
  while (std::getline(inf, line)) {
    if (line.empty()) continue;
    std::vector<int> ids;
    ids.push_back(Vocabulary::kBos);
    for (int t : vocab.encode(line)) ids.push_back(t);
    ids.push_back(Vocabulary::kEos);
    out.push_back(std::move(ids));
  }
  return out;
}

}  // namespace pill
