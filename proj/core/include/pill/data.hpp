#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "pill/rng.hpp"

namespace pill {

enum class Modality { Text, Vision };
enum class Split { Train, Test };

// One interleaved model input: token ids with per-position modality tags, a
// loss mask over supervised positions, and the raw feature rows backing the
// Vision positions (in position order).
struct TokenSequence {
  std::vector<int> tokens;          // per position; Vision slots hold the IMG id
  std::vector<Modality> modality;   // tag per position
  std::vector<bool> loss_mask;      // true exactly on supervised Text positions
  std::vector<double> vision_features;  // n_vision x d_vis, row-major
  int d_vis = 0;

  int length() const { return static_cast<int>(tokens.size()); }
  std::vector<int> vision_positions() const;
  // Index of the first supervised position (the answer span start); -1 if none.
  int first_masked_pos() const;
  void validate() const;  // throws std::invalid_argument on broken invariants
};

// Fixed word list with ids; reserved control ids occupy [0, 4).
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kImg = 3;

  Vocabulary();

  int size() const { return static_cast<int>(words_.size()); }
  bool contains(const std::string& word) const;
  int id(const std::string& word) const;       // throws on unknown word
  const std::string& word(int id) const;       // throws on bad id

  // Whitespace tokenization against the fixed word list.
  std::vector<int> encode(const std::string& text) const;
  std::string decode(std::span<const int> ids) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

enum class QuestionKind { Color, Shape, Count };

std::string question_kind_name(QuestionKind k);

// Latent attribute class counts for the synthetic task.
inline constexpr int kNumColors = 4;
inline constexpr int kNumShapes = 3;
inline constexpr int kNumCounts = 3;

struct SyntheticSample {
  int color = 0;  // in [0, kNumColors)
  int shape = 0;  // in [0, kNumShapes)
  int count = 0;  // in [0, kNumCounts)
  QuestionKind kind = QuestionKind::Color;
  std::vector<double> image_features;  // K x d_vis, row-major
  std::vector<int> question_tokens;    // includes the trailing "?"
  std::vector<int> options;            // candidate answer token ids
  int answer = 0;                      // correct option token id
  Split split = Split::Train;
};

struct DataConfig {
  int d_vis = 16;            // raw visual feature dimension (>= 11)
  int k_vision = 4;          // feature vectors per image
  double jitter = 0.05;      // gaussian noise added to attribute channels
  int test_tuples = 8;       // latent tuples held out entirely for the test split
  void validate() const;
};

// Deterministic dataset: attribute tuples stratified (balanced within the
// rounding remainder), question kinds cycled, and `test_tuples` latent tuples
// held out so the test split is disjoint from training combinations.
std::vector<SyntheticSample> generate_dataset(int n, std::uint64_t seed,
                                              const DataConfig& cfg,
                                              const Vocabulary& vocab);

// The decoding function that makes the task solvable by construction: reads
// the attribute channels of the (noisy) feature block back into classes.
int decode_attribute(const SyntheticSample& s, QuestionKind kind,
                     const DataConfig& cfg);

// Expands IMG placeholders in `text_tokens` into K consecutive Vision
// positions carrying rows of the corresponding feature block.
TokenSequence build_interleaved_sequence(
    std::span<const int> text_tokens, const std::vector<bool>& text_loss_mask,
    const std::vector<std::vector<double>>& images, const DataConfig& cfg,
    int max_seq_len);

// BOS + question + K Vision slots + answer + EOS; loss mask covers answer+EOS.
TokenSequence encode_sample(const SyntheticSample& s, const Vocabulary& vocab,
                            const DataConfig& cfg, int max_seq_len);

// Text-only corpus for base pre-training: declarative scene sentences plus
// question-form sentences whose answer slot is a random in-type option, so the
// base model learns the "option word follows the question" continuation.
std::vector<std::vector<int>> generate_text_corpus(int n, std::uint64_t seed,
                                                   const Vocabulary& vocab);

// Line-delimited persistence. Datasets round-trip through JSON records with
// latent attributes, the feature block, and question/options/answer strings;
// corpora are stored as plain space-separated sentences.
void save_dataset_jsonl(const std::vector<SyntheticSample>& data,
                        const Vocabulary& vocab, const std::string& path);
std::vector<SyntheticSample> load_dataset_jsonl(const Vocabulary& vocab,
                                                const DataConfig& cfg,
                                                const std::string& path);
void save_corpus_text(const std::vector<std::vector<int>>& corpus,
                      const Vocabulary& vocab, const std::string& path);
std::vector<std::vector<int>> load_corpus_text(const Vocabulary& vocab,
                                               const std::string& path);

}  // namespace pill
