#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

#include "poseprior/common.hpp"
#include "poseprior/nncore.hpp"
#include "poseprior/random.hpp"

namespace poseprior {

/// One affine coupling layer. With swap == false the first half of the
/// vector conditions the hypernet and the second half is transformed;
/// swap == true exchanges the roles. Parities alternate along the stack.
struct CouplingLayer {
  Mlp net;
  bool swap = false;
};

enum class InitMode {
  identity_start,  // zero output head: the flow starts as the identity map
  random,          // random output head too (non-trivial map; used by tests)
};

class FlowModel {
 public:
  FlowModel() = default;

  static FlowModel create(int dim, int n_layers, int hidden_width,
                          int hidden_layers, std::uint64_t seed,
                          InitMode mode = InitMode::identity_start) {
    require(dim >= 2 && dim % 2 == 0, ErrorCode::dimension,
            "flow dimension must be even and at least 2");
    require(n_layers >= 1, ErrorCode::dimension,
            "flow needs at least one coupling layer");
    FlowModel model;
    model.dim_ = dim;
    Rng rng(seed);
    const int half = dim / 2;
    const double out_scale = mode == InitMode::identity_start ? 0.0 : 0.1;
    model.layers_.resize(static_cast<std::size_t>(n_layers));
    for (int l = 0; l < n_layers; ++l) {
      auto& layer = model.layers_[static_cast<std::size_t>(l)];
      layer.net = Mlp(half, half, hidden_width, hidden_layers);
      layer.net.init(rng, out_scale);
      layer.swap = (l % 2) == 1;
    }
    return model;
  }

  int dim() const { return dim_; }
  int half() const { return dim_ / 2; }
  int layer_count() const { return static_cast<int>(layers_.size()); }
  const std::vector<CouplingLayer>& layers() const { return layers_; }
  std::vector<CouplingLayer>& layers() { return layers_; }

  std::vector<ParamView> param_views() {
    std::vector<ParamView> out;
    for (auto& layer : layers_) layer.net.append_param_views(out);
    return out;
  }

  std::vector<ConstParamView> param_views() const {
    std::vector<ConstParamView> out;
    for (const auto& layer : layers_) layer.net.append_param_views(out);
    return out;
  }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const auto& v : param_views()) n += v.size;
    return n;
  }

 private:
  int dim_ = 0;
  std::vector<CouplingLayer> layers_;
};

/// Gradients for every hypernet, aligned with FlowModel::param_views order.
struct FlowGrad {
  std::vector<MlpGrad> layers;

  static FlowGrad zeros(const FlowModel& model) {
    FlowGrad g;
    g.layers.reserve(model.layers().size());
    for (const auto& layer : model.layers()) {
      g.layers.push_back(layer.net.zero_grad());
    }
    return g;
  }

  std::vector<ConstParamView> views() const {
    std::vector<ConstParamView> out;
    for (const auto& l : layers) append_grad_views(l, out);
    return out;
  }

  void accumulate(const FlowGrad& other) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (std::size_t k = 0; k < layers[l].size(); ++k) {
        layers[l][k].d_weights += other.layers[l][k].d_weights;
        layers[l][k].d_biases += other.layers[l][k].d_biases;
      }
    }
  }

  void scale(double factor) {
    for (auto& l : layers) {
      for (auto& g : l) {
        g.d_weights *= factor;
        g.d_biases *= factor;
      }
    }
  }
};

namespace detail {

inline void check_width(const Eigen::MatrixXd& x, int dim, const char* what) {
  require(x.cols() == dim, ErrorCode::dimension,
          std::string(what) + ": vector width mismatch");
}

inline Eigen::MatrixXd cond_half(const CouplingLayer& l,
                                 const Eigen::MatrixXd& x) {
  const int h = static_cast<int>(x.cols()) / 2;
  return l.swap ? x.rightCols(h) : x.leftCols(h);
}

inline Eigen::MatrixXd trans_half(const CouplingLayer& l,
                                  const Eigen::MatrixXd& x) {
  const int h = static_cast<int>(x.cols()) / 2;
  return l.swap ? x.leftCols(h) : x.rightCols(h);
}

inline Eigen::MatrixXd assemble(const CouplingLayer& l,
                                const Eigen::MatrixXd& cond,
                                const Eigen::MatrixXd& trans) {
  Eigen::MatrixXd out(cond.rows(), cond.cols() + trans.cols());
  if (l.swap) {
    out.leftCols(trans.cols()) = trans;
    out.rightCols(cond.cols()) = cond;
  } else {
    out.leftCols(cond.cols()) = cond;
    out.rightCols(trans.cols()) = trans;
  }
  return out;
}

}  // namespace detail

/// y = (cond, trans * exp(s(cond)) + t(cond)); returns per-row forward
/// log-det (the row sum of s).
inline std::pair<Eigen::MatrixXd, Eigen::VectorXd> coupling_forward(
    const CouplingLayer& layer, const Eigen::MatrixXd& x) {
  const Eigen::MatrixXd cond = detail::cond_half(layer, x);
  const Eigen::MatrixXd trans = detail::trans_half(layer, x);
  auto [s, t] = layer.net.forward(cond);
  require(s.allFinite() && t.allFinite(), ErrorCode::numeric, "diverged");
  const Eigen::MatrixXd out_trans =
      (trans.array() * s.array().exp() + t.array()).matrix();
  return {detail::assemble(layer, cond, out_trans), s.rowwise().sum()};
}

/// Exact inverse of coupling_forward; returns the log-det of the inverse
/// direction (= minus the forward log-det).
inline std::pair<Eigen::MatrixXd, Eigen::VectorXd> coupling_inverse(
    const CouplingLayer& layer, const Eigen::MatrixXd& y) {
  const Eigen::MatrixXd cond = detail::cond_half(layer, y);
  const Eigen::MatrixXd trans = detail::trans_half(layer, y);
  auto [s, t] = layer.net.forward(cond);
  require(s.allFinite() && t.allFinite(), ErrorCode::numeric, "diverged");
  const Eigen::MatrixXd out_trans =
      ((trans.array() - t.array()) * (-s.array()).exp()).matrix();
  return {detail::assemble(layer, cond, out_trans), -s.rowwise().sum()};
}

/// Latent-to-ambient map (layers applied in order); log-det is accumulated
/// in double precision across the stack.
inline std::pair<Eigen::MatrixXd, Eigen::VectorXd> flow_forward(
    const FlowModel& model, const Eigen::MatrixXd& z) {
  detail::check_width(z, model.dim(), "flow_forward");
  Eigen::MatrixXd x = z;
  Eigen::VectorXd log_det = Eigen::VectorXd::Zero(z.rows());
  for (const auto& layer : model.layers()) {
    auto [next, ld] = coupling_forward(layer, x);
    x = std::move(next);
    log_det += ld;
  }
  return {std::move(x), std::move(log_det)};
}

/// Ambient-to-latent map (layers inverted in reverse order).
inline std::pair<Eigen::MatrixXd, Eigen::VectorXd> flow_inverse(
    const FlowModel& model, const Eigen::MatrixXd& x) {
  detail::check_width(x, model.dim(), "flow_inverse");
  Eigen::MatrixXd z = x;
  Eigen::VectorXd log_det = Eigen::VectorXd::Zero(x.rows());
  for (auto it = model.layers().rbegin(); it != model.layers().rend(); ++it) {
    auto [next, ld] = coupling_inverse(*it, z);
    z = std::move(next);
    log_det += ld;
  }
  return {std::move(z), std::move(log_det)};
}

inline double standard_normal_logpdf(const Eigen::VectorXd& z) {
  constexpr double kLogTwoPi = 1.8378770664093454836;
  return -0.5 * (static_cast<double>(z.size()) * kLogTwoPi + z.squaredNorm());
}

struct DensityResult {
  double log_prob = 0.0;  // nats
  double log_det = 0.0;   // inverse-direction log |det J|, nats
  Eigen::VectorXd z;
};

struct DensityBatch {
  Eigen::VectorXd log_prob;  // nats, one per row
  Eigen::VectorXd log_det;
  Eigen::MatrixXd z;
};

/// Change-of-variables density: log p(x) = log N(T^-1(x)) + log|det J| of
/// the inverse map. Rows of x are evaluated independently.
inline DensityBatch log_prob_rows(const FlowModel& model,
                                  const Eigen::MatrixXd& x, int threads = 1) {
  detail::check_width(x, model.dim(), "log_prob");
  DensityBatch out;
  out.log_prob.resize(x.rows());
  out.log_det.resize(x.rows());
  out.z.resize(x.rows(), x.cols());
  constexpr double kLogTwoPi = 1.8378770664093454836;
  const double base_const = -0.5 * model.dim() * kLogTwoPi;
  parallel_chunks(x.rows(), threads, [&](std::int64_t begin, std::int64_t end) {
    auto [z, ld] = flow_inverse(model, x.middleRows(begin, end - begin));
    out.z.middleRows(begin, end - begin) = z;
    out.log_det.segment(begin, end - begin) = ld;
    out.log_prob.segment(begin, end - begin) =
        (ld.array() + base_const - 0.5 * z.rowwise().squaredNorm().array())
            .matrix();
  });
  return out;
}

inline DensityResult log_prob(const FlowModel& model, const Eigen::VectorXd& x) {
  DensityBatch batch = log_prob_rows(model, x.transpose());
  return {batch.log_prob[0], batch.log_det[0], batch.z.row(0).transpose()};
}

struct SampleBatch {
  Eigen::MatrixXd x;         // one sample per row
  Eigen::VectorXd log_prob;  // density of each row, computed in the same pass
};

/// Draws n samples (Eq.-style z ~ N(0, I), x = T(z)) and attaches the
/// ambient density from the same forward pass: log N(z) minus the forward
/// log-det. One pass instead of a sample-then-invert round trip.
inline SampleBatch sample(const FlowModel& model, int n, Rng& rng,
                          int threads = 1) {
  require(n >= 1, ErrorCode::domain, "sample: n must be at least 1");
  Eigen::MatrixXd z(n, model.dim());
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < model.dim(); ++j) z(i, j) = rng.normal();
  }
  SampleBatch out;
  out.x.resize(n, model.dim());
  out.log_prob.resize(n);
  constexpr double kLogTwoPi = 1.8378770664093454836;
  const double base_const = -0.5 * model.dim() * kLogTwoPi;
  parallel_chunks(n, threads, [&](std::int64_t begin, std::int64_t end) {
    auto [x, ld] = flow_forward(model, z.middleRows(begin, end - begin));
    out.x.middleRows(begin, end - begin) = x;
    out.log_prob.segment(begin, end - begin) =
        (base_const -
         0.5 * z.middleRows(begin, end - begin).rowwise().squaredNorm().array() -
         ld.array())
            .matrix();
  });
  return out;
}

namespace detail {

struct CouplingTape {
  GradTape net_tape;
  Eigen::MatrixXd s;          // squashed scale head
  Eigen::MatrixXd out_trans;  // transformed half after the inverse step
};

}  // namespace detail

/// Negative mean log-density of the batch rows plus gradients with respect
/// to every hypernet parameter. Batch rows may fan out over `threads`
/// contiguous chunks; chunk results are reduced in a fixed order.
inline std::pair<double, FlowGrad> loss_and_grads(const FlowModel& model,
                                                  const Eigen::MatrixXd& batch,
                                                  int threads = 1) {
  detail::check_width(batch, model.dim(), "loss_and_grads");
  require(batch.rows() > 0, ErrorCode::dimension, "loss_and_grads: empty batch");
  const int n_layers = model.layer_count();
  const std::int64_t n = batch.rows();

  const std::int64_t n_chunks =
      threads <= 1 ? 1 : std::min<std::int64_t>(threads, n);
  std::vector<double> chunk_loss(static_cast<std::size_t>(n_chunks), 0.0);
  std::vector<FlowGrad> chunk_grads(static_cast<std::size_t>(n_chunks));
  for (auto& g : chunk_grads) g = FlowGrad::zeros(model);

  std::vector<std::int64_t> bounds(static_cast<std::size_t>(n_chunks) + 1, 0);
  {
    const std::int64_t base = n / n_chunks, rem = n % n_chunks;
    for (std::int64_t c = 0; c < n_chunks; ++c) {
      bounds[static_cast<std::size_t>(c) + 1] =
          bounds[static_cast<std::size_t>(c)] + base + (c < rem ? 1 : 0);
    }
  }

  parallel_chunks(n_chunks, static_cast<int>(n_chunks),
                  [&](std::int64_t cb, std::int64_t ce) {
    for (std::int64_t c = cb; c < ce; ++c) {
      const std::int64_t begin = bounds[static_cast<std::size_t>(c)];
      const std::int64_t rows = bounds[static_cast<std::size_t>(c) + 1] - begin;
      Eigen::MatrixXd u = batch.middleRows(begin, rows);
      std::vector<detail::CouplingTape> tapes(
          static_cast<std::size_t>(n_layers));
      Eigen::VectorXd log_det = Eigen::VectorXd::Zero(rows);
      // Ambient-to-latent pass, recording per-layer tapes.
      for (int l = n_layers - 1; l >= 0; --l) {
        const auto& layer = model.layers()[static_cast<std::size_t>(l)];
        auto& tape = tapes[static_cast<std::size_t>(l)];
        const Eigen::MatrixXd cond = detail::cond_half(layer, u);
        const Eigen::MatrixXd trans = detail::trans_half(layer, u);
        auto [s, t] = layer.net.forward(cond, &tape.net_tape);
        require(s.allFinite() && t.allFinite(), ErrorCode::numeric, "diverged");
        tape.s = s;
        tape.out_trans =
            ((trans.array() - t.array()) * (-s.array()).exp()).matrix();
        log_det -= s.rowwise().sum();
        u = detail::assemble(layer, cond, tape.out_trans);
      }
      constexpr double kLogTwoPi = 1.8378770664093454836;
      const double chunk_sum =
          -(log_det.sum() +
            rows * (-0.5 * model.dim() * kLogTwoPi) -
            0.5 * u.rowwise().squaredNorm().sum());
      require(std::isfinite(chunk_sum), ErrorCode::numeric, "diverged");
      chunk_loss[static_cast<std::size_t>(c)] = chunk_sum;
      // Backward from z to x; the loss is the chunk sum, normalized at the
      // end.
      Eigen::MatrixXd grad_u = u;  // d(-sum log N(z))/dz = z
      for (int l = 0; l < n_layers; ++l) {
        const auto& layer = model.layers()[static_cast<std::size_t>(l)];
        auto& tape = tapes[static_cast<std::size_t>(l)];
        const Eigen::MatrixXd g_cond = detail::cond_half(layer, grad_u);
        const Eigen::MatrixXd g_trans = detail::trans_half(layer, grad_u);
        const Eigen::ArrayXXd exp_neg_s = (-tape.s.array()).exp();
        const Eigen::MatrixXd g_y_trans =
            (g_trans.array() * exp_neg_s).matrix();
        // Direct log-det term contributes +1 per s entry of the summed loss.
        const Eigen::MatrixXd g_s =
            (1.0 - g_trans.array() * tape.out_trans.array()).matrix();
        const Eigen::MatrixXd g_t = -g_y_trans;
        const Eigen::MatrixXd g_y_cond =
            g_cond + layer.net.backward(tape.net_tape, g_s, g_t,
                                        chunk_grads[static_cast<std::size_t>(c)]
                                            .layers[static_cast<std::size_t>(l)]);
        grad_u = detail::assemble(layer, g_y_cond, g_y_trans);
      }
    }
  });

  double loss = 0.0;
  FlowGrad grads = std::move(chunk_grads[0]);
  for (std::size_t c = 0; c < chunk_loss.size(); ++c) loss += chunk_loss[c];
  for (std::size_t c = 1; c < chunk_grads.size(); ++c) {
    grads.accumulate(chunk_grads[c]);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  grads.scale(inv_n);
  return {loss * inv_n, std::move(grads)};
}

}  // namespace poseprior
