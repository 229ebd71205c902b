#include "mose/corpus.hpp"

#include <fstream>

#include "mose/error.hpp"

namespace mose {

Corpus Corpus::load(const std::string& path, int seq_len) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("corpus: cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("corpus: read failure on " + path);
  return from_bytes(std::move(bytes), seq_len);
}

Corpus Corpus::from_bytes(std::vector<uint8_t> bytes, int seq_len) {
  if (seq_len < 2) throw ContractError("corpus: seq_len must be >= 2");
  Corpus c;
  c.bytes_ = std::move(bytes);
  c.seq_len_ = seq_len;
  const int64_t total = static_cast<int64_t>(c.bytes_.size());
  c.train_len_ = total * 19 / 20;  // 95% prefix
  c.train_count_ = c.train_len_ / seq_len;
  c.held_count_ = (total - c.train_len_) / seq_len;
  if (c.train_count_ < 1) {
    throw CorpusError("corpus: " + std::to_string(total) +
                      " bytes is shorter than one training sequence of length " +
                      std::to_string(seq_len));
  }
  return c;
}

void Corpus::sequence(bool held_out, int64_t index, std::vector<int32_t>& inputs,
                      std::vector<int32_t>& targets) const {
  const int64_t count = held_out ? held_count_ : train_count_;
  if (index < 0 || index >= count) {
    throw IndexError("corpus: sequence index " + std::to_string(index) + " outside [0, " +
                     std::to_string(count) + ")");
  }
  const int64_t base = (held_out ? train_len_ : 0) + index * seq_len_;
  inputs.resize(static_cast<size_t>(seq_len_));
  targets.resize(static_cast<size_t>(seq_len_ - 1));
  for (int t = 0; t < seq_len_; ++t) inputs[static_cast<size_t>(t)] = bytes_[static_cast<size_t>(base + t)];
  for (int t = 0; t + 1 < seq_len_; ++t) targets[static_cast<size_t>(t)] = bytes_[static_cast<size_t>(base + t + 1)];
}

void Corpus::sample_train_batch(Rng& rng, int batch_size, std::vector<int32_t>& inputs,
                                std::vector<int32_t>& targets) const {
  std::vector<int64_t> idx(static_cast<size_t>(batch_size));
  for (int b = 0; b < batch_size; ++b) idx[static_cast<size_t>(b)] = static_cast<int64_t>(rng.below(static_cast<uint64_t>(train_count_)));
  gather_batch(false, idx, inputs, targets);
}

void Corpus::gather_batch(bool held_out, const std::vector<int64_t>& indices,
                          std::vector<int32_t>& inputs, std::vector<int32_t>& targets) const {
  const int T = seq_len_;
  inputs.resize(indices.size() * static_cast<size_t>(T));
  targets.resize(indices.size() * static_cast<size_t>(T - 1));
  std::vector<int32_t> seq_in, seq_tgt;
  for (size_t b = 0; b < indices.size(); ++b) {
    sequence(held_out, indices[b], seq_in, seq_tgt);
    std::copy(seq_in.begin(), seq_in.end(), inputs.begin() + static_cast<int64_t>(b) * T);
    std::copy(seq_tgt.begin(), seq_tgt.end(), targets.begin() + static_cast<int64_t>(b) * (T - 1));
  }
}

}  // namespace mose
