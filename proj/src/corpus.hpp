#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "error.hpp"

namespace gatedformer {

enum class TokenLevel { Char, Word };

inline const char* token_level_name(TokenLevel level) {
  return level == TokenLevel::Char ? "char" : "word";
}

// Bidirectional token <-> id map. Word-level vocabularies always contain
// <unk> and <eos>; char-level ids cover exactly the bytes seen in training.
struct Vocab {
  TokenLevel level = TokenLevel::Char;
  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int32_t> token_to_id;

  int32_t size() const { return static_cast<int32_t>(id_to_token.size()); }
  int32_t unk_id() const;  // word level only
};

struct Corpus {
  TokenLevel level = TokenLevel::Char;
  Vocab vocab;
  std::vector<int32_t> ids;
};

// Build the vocabulary from the training split and tokenize it.
Corpus load_corpus(const std::string& path, TokenLevel level);

// Tokenize another split against a fixed training vocabulary. Word-level
// out-of-vocabulary tokens map to <unk>; char-level unseen bytes are errors.
std::vector<int32_t> tokenize_with_vocab(const std::string& path, const Vocab& vocab);

// Contiguous-stream LM batches: the corpus is split into batch_size streams
// of floor(N / batch_size) tokens, and batch k takes seq_len tokens per
// stream starting at offset k*seq_len, with targets shifted by one.
class BatchStream {
 public:
  BatchStream(const std::vector<int32_t>& ids, int64_t batch_size, int64_t seq_len);

  int64_t batch_count() const { return batch_count_; }
  int64_t batch_size() const { return batch_size_; }
  int64_t seq_len() const { return seq_len_; }

  struct Batch {
    std::vector<std::vector<int32_t>> inputs;   // [batch][seq_len]
    std::vector<std::vector<int32_t>> targets;  // [batch][seq_len]
  };
  Batch get(int64_t index) const;

 private:
  const std::vector<int32_t>* ids_;
  int64_t batch_size_ = 0;
  int64_t seq_len_ = 0;
  int64_t stream_len_ = 0;
  int64_t batch_count_ = 0;
};

}  // namespace gatedformer
