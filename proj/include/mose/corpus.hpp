#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mose/rng.hpp"

namespace mose {

// Byte-level corpus (vocab 256) with a deterministic 95/5 contiguous
// train/held-out split. Sequences are non-overlapping seq_len blocks; targets
// shift by one inside each block, so a batch trains seq_len - 1 positions.
class Corpus {
 public:
  static Corpus load(const std::string& path, int seq_len);
  static Corpus from_bytes(std::vector<uint8_t> bytes, int seq_len);

  int seq_len() const { return seq_len_; }
  int64_t train_sequences() const { return train_count_; }
  int64_t held_sequences() const { return held_count_; }
  int64_t size_bytes() const { return static_cast<int64_t>(bytes_.size()); }

  // Sequence i of a split as (inputs[T], targets[T-1]).
  void sequence(bool held_out, int64_t index, std::vector<int32_t>& inputs,
                std::vector<int32_t>& targets) const;

  // Random training batch (with replacement); inputs [B*T], targets [B*(T-1)].
  void sample_train_batch(Rng& rng, int batch_size, std::vector<int32_t>& inputs,
                          std::vector<int32_t>& targets) const;

  // Deterministic batch from explicit sequence indices.
  void gather_batch(bool held_out, const std::vector<int64_t>& indices,
                    std::vector<int32_t>& inputs, std::vector<int32_t>& targets) const;

 private:
  std::vector<uint8_t> bytes_;
  int seq_len_ = 0;
  int64_t train_len_ = 0;   // bytes in the train region (prefix)
  int64_t train_count_ = 0;
  int64_t held_count_ = 0;
};

}  // namespace mose
