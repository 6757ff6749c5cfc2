#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace cssl {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

using SampleId = std::int64_t;
using SourceId = std::int64_t;
using Tick = std::int64_t;

// One element of a stream. class_label is carried for evaluation only; the
// learner's loss never reads it.
struct Sample {
  SampleId id = 0;
  Vector payload;
  SourceId source = 0;
  int class_label = 0;
  Tick arrival_tick = 0;
};

// Invalid configuration or violated precondition on user-supplied settings.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Not enough data available yet (e.g. sampling more than the buffer holds).
class InsufficientDataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values or undefined geometry (zero-norm embeddings).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Argument outside the mathematical domain of a function.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Derives a well-mixed 64-bit seed from a base seed and a stream of salts.
// Used so that every random component of a run gets an independent,
// reproducible generator.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt);

}  // namespace cssl
