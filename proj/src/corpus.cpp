#include "corpus.hpp"

#include <fstream>
#include <sstream>

namespace gatedformer {

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::IoError, "cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  require(!in.bad(), ErrorCode::IoError, "read failed for " + path);
  return buf.str();
}

// Whitespace split with newline mapped to the <eos> sentinel.
std::vector<std::string> word_tokens(const std::string& text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      tokens.push_back(current);
      current.clear();
    }
  };
  for (char ch : text) {
    if (ch == '\n') {
      flush();
      tokens.push_back("<eos>");
    } else if (ch == ' ' || ch == '\t' || ch == '\r') {
      flush();
    } else {
      current.push_back(ch);
    }
  }
  flush();
  return tokens;
}

}  // namespace

int32_t Vocab::unk_id() const {
  auto it = token_to_id.find("<unk>");
  require(it != token_to_id.end(), ErrorCode::OutOfVocab, "vocabulary has no <unk> token");
  return it->second;
}

Corpus load_corpus(const std::string& path, TokenLevel level) {
  const std::string text = read_file(path);
  Corpus corpus;
  corpus.level = level;
  corpus.vocab.level = level;

  auto intern = [&](const std::string& token) {
    auto [it, inserted] = corpus.vocab.token_to_id.emplace(token, corpus.vocab.size());
    if (inserted) corpus.vocab.id_to_token.push_back(token);
    return it->second;
  };

  if (level == TokenLevel::Char) {
    for (unsigned char byte : text) corpus.ids.push_back(intern(std::string(1, static_cast<char>(byte))));
  } else {
    intern("<unk>");
    intern("<eos>");
    for (const std::string& token : word_tokens(text)) corpus.ids.push_back(intern(token));
  }
  require(!corpus.ids.empty(), ErrorCode::EmptyCorpus, path + " contains no tokens");
  return corpus;
}

std::vector<int32_t> tokenize_with_vocab(const std::string& path, const Vocab& vocab) {
  const std::string text = read_file(path);
  std::vector<int32_t> ids;
  if (vocab.level == TokenLevel::Char) {
    for (unsigned char byte : text) {
      const std::string token(1, static_cast<char>(byte));
      auto it = vocab.token_to_id.find(token);
      require(it != vocab.token_to_id.end(), ErrorCode::OutOfVocab,
              "byte " + std::to_string(static_cast<int>(byte)) + " in " + path +
                  " never appeared in the training split");
      ids.push_back(it->second);
    }
  } else {
    const int32_t unk = vocab.unk_id();
    for (const std::string& token : word_tokens(text)) {
      auto it = vocab.token_to_id.find(token);
      ids.push_back(it == vocab.token_to_id.end() ? unk : it->second);
    }
  }
  require(!ids.empty(), ErrorCode::EmptyCorpus, path + " contains no tokens");
  return ids;
}

BatchStream::BatchStream(const std::vector<int32_t>& ids, int64_t batch_size, int64_t seq_len)
    : ids_(&ids), batch_size_(batch_size), seq_len_(seq_len) {
  require(batch_size >= 1 && seq_len >= 1, ErrorCode::InvalidArgument,
          "batch_size and seq_len must be >= 1");
  const int64_t n = static_cast<int64_t>(ids.size());
  require(n >= batch_size * (seq_len + 1), ErrorCode::CorpusTooSmall,
          "corpus of " + std::to_string(n) + " tokens cannot fill a " +
              std::to_string(batch_size) + "x" + std::to_string(seq_len) + " batch");
  stream_len_ = n / batch_size;
  batch_count_ = (stream_len_ - 1) / seq_len;
}

BatchStream::Batch BatchStream::get(int64_t index) const {
  require(index >= 0 && index < batch_count_, ErrorCode::InvalidArgument,
          "batch index " + std::to_string(index) + " out of range");
  Batch batch;
  batch.inputs.resize(static_cast<size_t>(batch_size_));
  batch.targets.resize(static_cast<size_t>(batch_size_));
  for (int64_t s = 0; s < batch_size_; ++s) {
    const int64_t base = s * stream_len_ + index * seq_len_;
    auto& in = batch.inputs[static_cast<size_t>(s)];
    auto& tg = batch.targets[static_cast<size_t>(s)];
    in.assign(ids_->begin() + base, ids_->begin() + base + seq_len_);
    tg.assign(ids_->begin() + base + 1, ids_->begin() + base + seq_len_ + 1);
  }
  return batch;
}

}  // namespace gatedformer
