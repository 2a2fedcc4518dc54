#pragma once

#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace unsq {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape/channel disagreements between tensors or against a layer's parameters.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Dataset files and manifests: each failure mode is a distinct type so
// callers (and tests) can tell them apart.
class DataError : public Error {
 public:
  using Error::Error;
};
class MissingFileError : public DataError {
 public:
  using DataError::DataError;
};
class NonBinaryMaskError : public DataError {
 public:
  using DataError::DataError;
};
class HashMismatchError : public DataError {
 public:
  using DataError::DataError;
};
class BadDimensionsError : public DataError {
 public:
  using DataError::DataError;
};

// Checkpoint container failures.
class CheckpointError : public Error {
 public:
  using Error::Error;
};
class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointShapeError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

// Training loop abort (non-finite loss and similar unrecoverable states).
class TrainAbortError : public Error {
 public:
  using Error::Error;
};

inline bool env_flag(const char* name) {
  const char* v = std::getenv(name);
  return v != nullptr && v[0] == '1' && v[1] == '\0';
}

// UNSQ_CHECK_FINITE=1 turns on per-op NaN/Inf assertions.
inline bool check_finite_enabled() {
  static const bool on = env_flag("UNSQ_CHECK_FINITE");
  return on;
}

// UNSQ_DETERMINISTIC=1 forces deterministic mode. Every code path in this
// library is already deterministic for fixed seeds; the flag exists so
// callers can assert that no nondeterministic fast path is ever selected.
inline bool deterministic_mode() {
  static const bool on = env_flag("UNSQ_DETERMINISTIC");
  return on;
}

// FNV-1a, used for dataset/checkpoint content hashes.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t state = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    state ^= p[i];
    state *= 0x100000001b3ull;
  }
  return state;
}

inline std::string to_hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace unsq
