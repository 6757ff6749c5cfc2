#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cssl/core.hpp"

namespace cssl {

struct LearnerDims {
  int input = 32;
  int hidden = 64;
  int embedding = 16;
};

struct OptimizerConfig {
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

struct LRSchedule {
  enum class Kind { cosine_fixed_end, constant, constant_plus_decay };

  Kind kind = Kind::cosine_fixed_end;
  double base_lr = 0.05;
  std::int64_t total_steps = 1;
  double decay_start_fraction = 0.8;

  void validate() const;
};

std::string to_string(LRSchedule::Kind kind);
LRSchedule::Kind parse_schedule_kind(const std::string& name);

// cosine_fixed_end: base * (1 + cos(pi t / T)) / 2.
// constant: base.
// constant_plus_decay: base until decay_start_fraction * T, then a half cosine
// down to zero at T.
// Decaying schedules return 0 past total_steps and bump lr_overrun_warnings().
double lr_at(const LRSchedule& schedule, std::int64_t step);
std::uint64_t lr_overrun_warnings();

struct AugmentationConfig {
  double noise_scale = 0.0;
  double dropout_prob = 0.0;
  double scale_lo = 1.0;
  double scale_hi = 1.0;

  void validate() const;
};

// Random multiplicative scale, then coordinate dropout, then additive noise.
Vector augment(const Vector& x, const AugmentationConfig& cfg, std::mt19937_64& rng);
Vector augment(const Vector& x, const AugmentationConfig& cfg, std::uint64_t seed);

// Two-layer perceptron z = W2 tanh(W1 x + b1) + b2 and affine predictor
// p = Wp z + bp.
struct LearnerParams {
  Matrix w1;
  Vector b1;
  Matrix w2;
  Vector b2;
  Matrix wp;
  Vector bp;

  static LearnerParams zeros_like(const LearnerParams& other);
  bool all_finite() const;
  std::size_t num_parameters() const;
  // Flat view helpers used by gradient checks and checkpoints.
  std::vector<double> flatten() const;
  void assign(std::span<const double> flat);
  LearnerParams& operator+=(const LearnerParams& other);
  LearnerParams& operator*=(double s);
};

struct LearnerState {
  LearnerDims dims;
  LearnerParams params;
  LearnerParams velocity;
  OptimizerConfig optimizer;
  std::int64_t step_count = 0;
};

LearnerState make_learner(const LearnerDims& dims, const OptimizerConfig& optimizer, std::uint64_t seed);

// Embeddings of a column-major batch (one sample per column).
Matrix encode(const LearnerParams& params, const Matrix& inputs);
Matrix encode(const LearnerParams& params, std::span<const Sample> samples);

// ---------------------------------------------------------------------------
// SimSiam objective. For one pair of views,
//   L = -cos(sg(z1), g(z2)) - cos(sg(z2), g(z1)),
// where sg() marks a target treated as a constant.

struct PairLoss {
  double loss = 0.0;
  // Gradients through the live (predictor) branches only.
  Vector grad_z1;
  Vector grad_z2;
  Matrix grad_wp;
  Vector grad_bp;
};

// Throws NumericalError when z1, z2 or a prediction has zero norm.
PairLoss simsiam_loss(const Vector& z1, const Vector& z2, const Matrix& wp, const Vector& bp);

enum class GradientFlow {
  stop_gradient,  // the training objective
  through_targets  // gradient also flows into the targets; diagnostic only
};

struct BatchLoss {
  double loss = 0.0;
  LearnerParams grad;
  Matrix z1;
  Matrix z2;
};

// Mean loss over columns of two view batches and its parameter gradient.
BatchLoss batch_loss(const LearnerParams& params, const Matrix& view1, const Matrix& view2,
                     GradientFlow flow = GradientFlow::stop_gradient);

struct TrainStepResult {
  double loss = 0.0;
  double lr = 0.0;
  // (z1 + z2) / 2 per sample, for buffer feature tracking.
  std::vector<Vector> embeddings;
};

// Two augmented views per sample, one SGD step with momentum and weight decay
// at lr_at(schedule, step_count). Throws NumericalError, leaving state
// untouched, when the loss or the updated parameters are non-finite.
TrainStepResult train_step(LearnerState& state, std::span<const Sample> batch, const AugmentationConfig& aug,
                           const LRSchedule& schedule, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Linear probe: multinomial logistic regression on frozen embeddings.

struct ProbeConfig {
  int max_iters = 500;
  double grad_tol = 1e-6;
};

struct ProbeResult {
  double train_accuracy = 0.0;
  double accuracy = 0.0;
  // Held-out accuracy per class label (NaN for labels absent from held-out).
  std::vector<double> per_class;
  // Held-out accuracy per group when a class -> group map was given.
  std::vector<double> per_group;
  // Labels seen in held-out data but missing from training (always wrong).
  std::vector<int> missing_classes;
  int iterations = 0;
  double final_grad_norm = 0.0;
};

// Features are columns. Labels must lie in [0, num_classes). Training uses
// standardized features and accelerated full-batch gradient descent without
// weight decay; deterministic for fixed inputs.
ProbeResult linear_probe(const Matrix& train_features, std::span<const int> train_labels,
                         const Matrix& test_features, std::span<const int> test_labels, int num_classes,
                         const ProbeConfig& cfg = {}, std::span<const int> class_to_group = {});

}  // namespace cssl
