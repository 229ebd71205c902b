#pragma once

#include <stdexcept>
#include <string>

namespace mose {

// Error taxonomy shared by the core and the C boundary. Each subclass maps
// onto one mose_status code in mose_c.h.
class Error : public std::runtime_error {
 public:
  explicit Error(std::string msg) : std::runtime_error(std::move(msg)) {}
};

// Incompatible tensor shapes or dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Out-of-range index (token id, class target, expert id).
class IndexError : public Error {
 public:
  using Error::Error;
};

// A stated precondition does not hold (non-scalar backward seed, empty
// batch, width outside [w_min, w_max], ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// File system failure.
class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed config JSON or checkpoint bytes.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Config and checkpoint disagree; message names the differing field.
class MismatchError : public Error {
 public:
  using Error::Error;
};

// Corpus too small or otherwise unusable.
class CorpusError : public Error {
 public:
  using Error::Error;
};

// Non-finite value where the training contract forbids one.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace mose
