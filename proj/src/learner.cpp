#include "cssl/learner.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace cssl {

namespace {
std::atomic<std::uint64_t> g_lr_overruns{0};
}

void LRSchedule::validate() const {
  if (!(base_lr >= 0.0) || !std::isfinite(base_lr)) throw ConfigError("lr schedule: base_lr must be >= 0");
  if (kind != Kind::constant && total_steps < 1) throw ConfigError("lr schedule: total_steps must be >= 1");
  if (!(decay_start_fraction >= 0.0 && decay_start_fraction <= 1.0))
    throw ConfigError("lr schedule: decay_start_fraction must lie in [0, 1]");
}

std::string to_string(LRSchedule::Kind kind) {
  switch (kind) {
    case LRSchedule::Kind::cosine_fixed_end: return "cosine_fixed_end";
    case LRSchedule::Kind::constant: return "constant";
    case LRSchedule::Kind::constant_plus_decay: return "constant_plus_decay";
  }
  return "unknown";
}

LRSchedule::Kind parse_schedule_kind(const std::string& name) {
  if (name == "cosine_fixed_end" || name == "cosine") return LRSchedule::Kind::cosine_fixed_end;
  if (name == "constant") return LRSchedule::Kind::constant;
  if (name == "constant_plus_decay") return LRSchedule::Kind::constant_plus_decay;
  throw ConfigError("unknown lr schedule '" + name + "'");
}

double lr_at(const LRSchedule& schedule, std::int64_t step) {
  if (step < 0) throw DomainError("lr_at: step must be >= 0");
  if (schedule.kind == LRSchedule::Kind::constant) return schedule.base_lr;
  const double total = static_cast<double>(schedule.total_steps);
  if (step > schedule.total_steps) {
    ++g_lr_overruns;
    return 0.0;
  }
  const double t = static_cast<double>(step);
  if (schedule.kind == LRSchedule::Kind::cosine_fixed_end)
    return schedule.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t / total));

  const double start = schedule.decay_start_fraction * total;
  if (t <= start) return schedule.base_lr;
  const double span = total - start;
  return schedule.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * (t - start) / span));
}

std::uint64_t lr_overrun_warnings() { return g_lr_overruns.load(); }

// ---------------------------------------------------------------------------

void AugmentationConfig::validate() const {
  if (!(noise_scale >= 0.0)) throw ConfigError("augmentation: noise_scale must be >= 0");
  if (!(dropout_prob >= 0.0 && dropout_prob < 1.0))
    throw ConfigError("augmentation: dropout_prob must lie in [0, 1)");
  if (!(scale_lo > 0.0 && scale_lo <= scale_hi)) throw ConfigError("augmentation: need 0 < scale_lo <= scale_hi");
}

Vector augment(const Vector& x, const AugmentationConfig& cfg, std::mt19937_64& rng) {
  Vector out = x;
  if (cfg.scale_hi > cfg.scale_lo) out *= std::uniform_real_distribution<double>(cfg.scale_lo, cfg.scale_hi)(rng);
  else out *= cfg.scale_lo;
  if (cfg.dropout_prob > 0.0) {
    std::bernoulli_distribution drop(cfg.dropout_prob);
    for (auto& v : out)
      if (drop(rng)) v = 0.0;
  }
  if (cfg.noise_scale > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_scale);
    for (auto& v : out) v += noise(rng);
  }
  return out;
}

Vector augment(const Vector& x, const AugmentationConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return augment(x, cfg, rng);
}

// ---------------------------------------------------------------------------

LearnerParams LearnerParams::zeros_like(const LearnerParams& o) {
  LearnerParams p;
  p.w1 = Matrix::Zero(o.w1.rows(), o.w1.cols());
  p.b1 = Vector::Zero(o.b1.size());
  p.w2 = Matrix::Zero(o.w2.rows(), o.w2.cols());
  p.b2 = Vector::Zero(o.b2.size());
  p.wp = Matrix::Zero(o.wp.rows(), o.wp.cols());
  p.bp = Vector::Zero(o.bp.size());
  return p;
}

bool LearnerParams::all_finite() const {
  return w1.allFinite() && b1.allFinite() && w2.allFinite() && b2.allFinite() && wp.allFinite() &&
         bp.allFinite();
}

std::size_t LearnerParams::num_parameters() const {
  return static_cast<std::size_t>(w1.size() + b1.size() + w2.size() + b2.size() + wp.size() + bp.size());
}

namespace {

template <typename F>
void for_each_block(LearnerParams& p, F&& f) {
  f(p.w1.data(), p.w1.size());
  f(p.b1.data(), p.b1.size());
  f(p.w2.data(), p.w2.size());
  f(p.b2.data(), p.b2.size());
  f(p.wp.data(), p.wp.size());
  f(p.bp.data(), p.bp.size());
}

}  // namespace

std::vector<double> LearnerParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(num_parameters());
  auto& self = const_cast<LearnerParams&>(*this);
  for_each_block(self, [&](double* data, Eigen::Index n) { flat.insert(flat.end(), data, data + n); });
  return flat;
}

void LearnerParams::assign(std::span<const double> flat) {
  if (flat.size() != num_parameters()) throw ConfigError("learner params: flat size mismatch");
  std::size_t at = 0;
  for_each_block(*this, [&](double* data, Eigen::Index n) {
    std::copy_n(flat.begin() + at, n, data);
    at += static_cast<std::size_t>(n);
  });
}

LearnerParams& LearnerParams::operator+=(const LearnerParams& o) {
  w1 += o.w1;
  b1 += o.b1;
  w2 += o.w2;
  b2 += o.b2;
  wp += o.wp;
  bp += o.bp;
  return *this;
}

LearnerParams& LearnerParams::operator*=(double s) {
  w1 *= s;
  b1 *= s;
  w2 *= s;
  b2 *= s;
  wp *= s;
  bp *= s;
  return *this;
}

LearnerState make_learner(const LearnerDims& dims, const OptimizerConfig& optimizer, std::uint64_t seed) {
  if (dims.input < 1 || dims.hidden < 1 || dims.embedding < 1)
    throw ConfigError("learner: all dimensions must be >= 1");
  if (!(optimizer.momentum >= 0.0 && optimizer.momentum < 1.0))
    throw ConfigError("learner: momentum must lie in [0, 1)");
  if (!(optimizer.weight_decay >= 0.0)) throw ConfigError("learner: weight_decay must be >= 0");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto init = [&](Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
    for (Eigen::Index c = 0; c < cols; ++c)
      for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = scale * normal(rng);
    return m;
  };

  LearnerState state;
  state.dims = dims;
  state.optimizer = optimizer;
  state.params.w1 = init(dims.hidden, dims.input);
  state.params.b1 = Vector::Zero(dims.hidden);
  state.params.w2 = init(dims.embedding, dims.hidden);
  state.params.b2 = Vector::Zero(dims.embedding);
  state.params.wp = init(dims.embedding, dims.embedding);
  state.params.bp = Vector::Zero(dims.embedding);
  state.velocity = LearnerParams::zeros_like(state.params);
  return state;
}

namespace {

// tanh(a) written through exp, which Eigen vectorizes for doubles.
Matrix hidden_layer(const LearnerParams& params, const Matrix& inputs) {
  const Eigen::ArrayXXd a = ((params.w1 * inputs).colwise() + params.b1).array();
  return (1.0 - 2.0 / ((2.0 * a).exp() + 1.0)).matrix();
}

}  // namespace

Matrix encode(const LearnerParams& params, const Matrix& inputs) {
  Matrix hidden = hidden_layer(params, inputs);
  return (params.w2 * hidden).colwise() + params.b2;
}

Matrix encode(const LearnerParams& params, std::span<const Sample> samples) {
  if (samples.empty()) return Matrix(params.w2.rows(), 0);
  Matrix x(samples.front().payload.size(), static_cast<Eigen::Index>(samples.size()));
  for (std::size_t i = 0; i < samples.size(); ++i) x.col(static_cast<Eigen::Index>(i)) = samples[i].payload;
  return encode(params, x);
}

// ---------------------------------------------------------------------------

namespace {

struct CosineTerm {
  double cosine = 0.0;
  Vector grad_pred;    // d(-cos)/d(prediction)
  Vector grad_target;  // d(-cos)/d(target)
};

CosineTerm negative_cosine(const Eigen::Ref<const Vector>& target, const Eigen::Ref<const Vector>& pred,
                           bool with_target_grad) {
  const double nt = target.norm();
  const double np = pred.norm();
  if (!(nt > 0.0) || !(np > 0.0)) throw NumericalError("simsiam loss: zero-norm embedding or prediction");
  const Vector t = target / nt;
  const Vector p = pred / np;
  CosineTerm term;
  term.cosine = t.dot(p);
  term.grad_pred = -(t - term.cosine * p) / np;
  if (with_target_grad) term.grad_target = -(p - term.cosine * t) / nt;
  return term;
}

struct BatchCosine {
  double cosine_sum = 0.0;
};

// Column-wise negative_cosine. Writes scale * d(-cos)/d(pred) into grad_pred
// and, when asked, adds scale * d(-cos)/d(target) into grad_target.
BatchCosine negative_cosine_columns(const Matrix& target, const Matrix& pred, bool with_target_grad,
                                    double scale, Matrix& grad_pred, Matrix& grad_target) {
  const Eigen::RowVectorXd nt = target.colwise().norm();
  const Eigen::RowVectorXd np = pred.colwise().norm();
  if (!((nt.array() > 0.0).all() && (np.array() > 0.0).all()))
    throw NumericalError("simsiam loss: zero-norm embedding or prediction");
  const Eigen::ArrayXXd t = target.array().rowwise() / nt.array();
  const Eigen::ArrayXXd p = pred.array().rowwise() / np.array();
  const Eigen::RowVectorXd cosine = (t * p).colwise().sum().matrix();
  grad_pred = ((p.rowwise() * cosine.array() - t).rowwise() / (np.array() / scale)).matrix();
  if (with_target_grad)
    grad_target += ((t.rowwise() * cosine.array() - p).rowwise() / (nt.array() / scale)).matrix();
  return {cosine.sum()};
}

}  // namespace

PairLoss simsiam_loss(const Vector& z1, const Vector& z2, const Matrix& wp, const Vector& bp) {
  const Vector p1 = wp * z1 + bp;
  const Vector p2 = wp * z2 + bp;
  const CosineTerm a = negative_cosine(z1, p2, false);
  const CosineTerm b = negative_cosine(z2, p1, false);
  PairLoss out;
  // Rounding can push |cos| a few ulps past 1.
  out.loss = std::clamp(-a.cosine - b.cosine, -2.0, 2.0);
  out.grad_wp = b.grad_pred * z1.transpose() + a.grad_pred * z2.transpose();
  out.grad_bp = a.grad_pred + b.grad_pred;
  out.grad_z1 = wp.transpose() * b.grad_pred;
  out.grad_z2 = wp.transpose() * a.grad_pred;
  return out;
}

BatchLoss batch_loss(const LearnerParams& params, const Matrix& view1, const Matrix& view2, GradientFlow flow) {
  const Eigen::Index n = view1.cols();
  if (n < 1 || view2.cols() != n) throw ConfigError("batch loss: views must be non-empty and equal in size");

  const Matrix h1 = hidden_layer(params, view1);
  const Matrix h2 = hidden_layer(params, view2);
  BatchLoss out;
  out.z1 = (params.w2 * h1).colwise() + params.b2;
  out.z2 = (params.w2 * h2).colwise() + params.b2;
  const Matrix p1 = (params.wp * out.z1).colwise() + params.bp;
  const Matrix p2 = (params.wp * out.z2).colwise() + params.bp;

  const bool through = flow == GradientFlow::through_targets;
  const double inv_n = 1.0 / static_cast<double>(n);
  Matrix dp1(p1.rows(), n), dp2(p2.rows(), n);
  Matrix dz1 = Matrix::Zero(out.z1.rows(), n);
  Matrix dz2 = Matrix::Zero(out.z2.rows(), n);
  // Term a: target z1, prediction from z2. Term b: target z2, prediction from z1.
  const BatchCosine a = negative_cosine_columns(out.z1, p2, through, inv_n, dp2, dz1);
  const BatchCosine b = negative_cosine_columns(out.z2, p1, through, inv_n, dp1, dz2);
  out.loss = std::clamp(-(a.cosine_sum + b.cosine_sum) * inv_n, -2.0, 2.0);

  LearnerParams& g = out.grad;
  g.wp = dp1 * out.z1.transpose() + dp2 * out.z2.transpose();
  g.bp = dp1.rowwise().sum() + dp2.rowwise().sum();
  dz1 += params.wp.transpose() * dp1;
  dz2 += params.wp.transpose() * dp2;
  g.w2 = dz1 * h1.transpose() + dz2 * h2.transpose();
  g.b2 = dz1.rowwise().sum() + dz2.rowwise().sum();
  const Matrix da1 = ((params.w2.transpose() * dz1).array() * (1.0 - h1.array().square())).matrix();
  const Matrix da2 = ((params.w2.transpose() * dz2).array() * (1.0 - h2.array().square())).matrix();
  g.w1 = da1 * view1.transpose() + da2 * view2.transpose();
  g.b1 = da1.rowwise().sum() + da2.rowwise().sum();
  return out;
}

TrainStepResult train_step(LearnerState& state, std::span<const Sample> batch, const AugmentationConfig& aug,
                           const LRSchedule& schedule, std::uint64_t seed) {
  if (batch.empty()) throw ConfigError("train_step: empty batch");
  const Eigen::Index n = static_cast<Eigen::Index>(batch.size());
  const Eigen::Index d = state.dims.input;
  std::mt19937_64 rng(seed);
  Matrix v1(d, n), v2(d, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector& x = batch[static_cast<std::size_t>(i)].payload;
    if (x.size() != d) throw ConfigError("train_step: payload dimension does not match the encoder input");
    v1.col(i) = augment(x, aug, rng);
    v2.col(i) = augment(x, aug, rng);
  }

  BatchLoss bl = batch_loss(state.params, v1, v2);
  if (!std::isfinite(bl.loss) || !bl.grad.all_finite()) {
    std::ostringstream msg;
    msg << "train_step: non-finite loss at step " << state.step_count << " (loss=" << bl.loss << ")";
    throw NumericalError(msg.str());
  }

  const double lr = lr_at(schedule, state.step_count);
  const double mu = state.optimizer.momentum;
  const double wd = state.optimizer.weight_decay;
  LearnerParams velocity = state.velocity;
  LearnerParams params = state.params;
  auto update = [&](auto& theta, auto& vel, const auto& grad) {
    vel = mu * vel + grad + wd * theta;
    theta -= lr * vel;
  };
  update(params.w1, velocity.w1, bl.grad.w1);
  update(params.b1, velocity.b1, bl.grad.b1);
  update(params.w2, velocity.w2, bl.grad.w2);
  update(params.b2, velocity.b2, bl.grad.b2);
  update(params.wp, velocity.wp, bl.grad.wp);
  update(params.bp, velocity.bp, bl.grad.bp);
  if (!params.all_finite()) {
    std::ostringstream msg;
    msg << "train_step: parameters became non-finite at step " << state.step_count;
    throw NumericalError(msg.str());
  }
  state.params = std::move(params);
  state.velocity = std::move(velocity);
  ++state.step_count;

  TrainStepResult result;
  result.loss = bl.loss;
  result.lr = lr;
  result.embeddings.reserve(batch.size());
  for (Eigen::Index i = 0; i < n; ++i) result.embeddings.emplace_back(0.5 * (bl.z1.col(i) + bl.z2.col(i)));
  return result;
}

// ---------------------------------------------------------------------------

ProbeResult linear_probe(const Matrix& train_features, std::span<const int> train_labels,
                         const Matrix& test_features, std::span<const int> test_labels, int num_classes,
                         const ProbeConfig& cfg, std::span<const int> class_to_group) {
  const Eigen::Index dim = train_features.rows();
  const Eigen::Index n = train_features.cols();
  if (static_cast<std::size_t>(n) != train_labels.size() ||
      static_cast<std::size_t>(test_features.cols()) != test_labels.size())
    throw ConfigError("linear probe: label count does not match feature columns");
  if (test_features.rows() != dim) throw ConfigError("linear probe: train/test feature dimensions differ");
  if (num_classes < 2) throw ConfigError("linear probe: need at least two classes");

  std::vector<bool> present(num_classes, false);
  for (int y : train_labels) {
    if (y < 0 || y >= num_classes) throw ConfigError("linear probe: label out of range");
    present[y] = true;
  }
  if (std::count(present.begin(), present.end(), true) < 2)
    throw ConfigError("linear probe: fewer than two classes in training labels");

  // Standardize with training statistics and append a bias row.
  const Vector mu = train_features.rowwise().mean();
  Vector sd = ((train_features.colwise() - mu).array().square().rowwise().mean()).sqrt().matrix();
  for (auto& s : sd)
    if (!(s > 1e-12)) s = 1.0;
  auto prepare = [&](const Matrix& f) {
    Matrix x(dim + 1, f.cols());
    x.topRows(dim) = ((f.colwise() - mu).array().colwise() / sd.array()).matrix();
    x.row(dim).setOnes();
    return x;
  };
  const Matrix x = prepare(train_features);
  const Matrix xt = prepare(test_features);

  Matrix y = Matrix::Zero(num_classes, n);
  for (Eigen::Index i = 0; i < n; ++i) y(train_labels[i], i) = 1.0;

  // Softmax cross-entropy has Hessian bounded by 0.5 * lambda_max(X X^T / n).
  const Matrix gram = x * x.transpose() / static_cast<double>(n);
  Vector v = Vector::Ones(gram.rows()).normalized();
  double lambda = 0.0;
  for (int it = 0; it < 100; ++it) {
    Vector w = gram * v;
    lambda = w.norm();
    if (!(lambda > 0.0)) break;
    v = w / lambda;
  }
  const double step = 1.0 / std::max(0.5 * lambda, 1e-12);

  auto gradient = [&](const Matrix& w) {
    Matrix logits = w * x;
    for (Eigen::Index i = 0; i < n; ++i) {
      auto col = logits.col(i);
      col.array() -= col.maxCoeff();
      col = col.array().exp().matrix();
      col /= col.sum();
    }
    return Matrix((logits - y) * x.transpose() / static_cast<double>(n));
  };

  Matrix w = Matrix::Zero(num_classes, dim + 1);
  Matrix w_prev = w;
  ProbeResult result;
  for (int it = 1; it <= cfg.max_iters; ++it) {
    const double momentum = static_cast<double>(it - 1) / static_cast<double>(it + 2);
    const Matrix look = w + momentum * (w - w_prev);
    const Matrix g = gradient(look);
    result.iterations = it;
    result.final_grad_norm = g.norm();
    w_prev = w;
    w = look - step * g;
    if (result.final_grad_norm < cfg.grad_tol) break;
  }

  auto predict = [&](const Matrix& feats) {
    Matrix logits = w * feats;
    std::vector<int> out(static_cast<std::size_t>(feats.cols()));
    for (Eigen::Index i = 0; i < feats.cols(); ++i) {
      int best = -1;
      for (int c = 0; c < num_classes; ++c)
        if (present[c] && (best < 0 || logits(c, i) > logits(best, i))) best = c;
      out[static_cast<std::size_t>(i)] = best;
    }
    return out;
  };

  const std::vector<int> train_pred = predict(x);
  std::size_t train_hits = 0;
  for (Eigen::Index i = 0; i < n; ++i) train_hits += train_pred[i] == train_labels[i];
  result.train_accuracy = static_cast<double>(train_hits) / static_cast<double>(n);

  const std::vector<int> test_pred = predict(xt);
  std::vector<double> hits(num_classes, 0.0), totals(num_classes, 0.0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test_labels.size(); ++i) {
    const int label = test_labels[i];
    if (label < 0 || label >= num_classes) throw ConfigError("linear probe: label out of range");
    totals[label] += 1.0;
    if (test_pred[i] == label) {
      hits[label] += 1.0;
      ++correct;
    }
  }
  result.accuracy = test_labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(test_labels.size());
  result.per_class.resize(num_classes);
  for (int c = 0; c < num_classes; ++c) {
    result.per_class[c] = totals[c] > 0 ? hits[c] / totals[c] : std::numeric_limits<double>::quiet_NaN();
    if (totals[c] > 0 && !present[c]) result.missing_classes.push_back(c);
  }
  if (!class_to_group.empty()) {
    int groups = 0;
    for (int gidx : class_to_group) groups = std::max(groups, gidx + 1);
    std::vector<double> gh(groups, 0.0), gt(groups, 0.0);
    for (int c = 0; c < num_classes && c < static_cast<int>(class_to_group.size()); ++c) {
      if (class_to_group[c] < 0) continue;
      gh[class_to_group[c]] += hits[c];
      gt[class_to_group[c]] += totals[c];
    }
    result.per_group.resize(groups);
    for (int gidx = 0; gidx < groups; ++gidx)
      result.per_group[gidx] = gt[gidx] > 0 ? gh[gidx] / gt[gidx] : std::numeric_limits<double>::quiet_NaN();
  }
  return result;
}

}  // namespace cssl
