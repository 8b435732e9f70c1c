#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "poseprior/common.hpp"
#include "poseprior/random.hpp"

namespace poseprior {

struct DenseLayer {
  Eigen::MatrixXd weights;  // out x in
  Eigen::VectorXd biases;   // out
};

struct LayerGrad {
  Eigen::MatrixXd d_weights;
  Eigen::VectorXd d_biases;
};

using MlpGrad = std::vector<LayerGrad>;

/// Activations recorded during one forward pass; backward consumes the tape
/// exactly once.
struct GradTape {
  Eigen::MatrixXd input;                // n x in
  std::vector<Eigen::MatrixXd> hidden;  // post-activation, n x width each
  Eigen::MatrixXd s;                    // squashed scale head, n x head
  bool consumed = false;
};

/// A flat view over one parameter block; Adam and serialization iterate
/// blocks in a fixed enumeration order.
struct ParamView {
  double* data = nullptr;
  Eigen::Index size = 0;
};

struct ConstParamView {
  const double* data = nullptr;
  Eigen::Index size = 0;
};

/// Hypernet trunk with two equal-width output heads (scale s and shift t).
/// Hidden activations are leaky rectified linear; the s head is squashed to
/// (-scale_bound, scale_bound) so coupling log-scales stay bounded.
class Mlp {
 public:
  Mlp() = default;

  Mlp(int in_width, int head_width, int hidden_width, int hidden_layers)
      : in_width_(in_width), head_width_(head_width) {
    require(in_width > 0 && head_width > 0 && hidden_width > 0 &&
                hidden_layers > 0,
            ErrorCode::dimension, "Mlp: widths must be positive");
    layers_.resize(static_cast<std::size_t>(hidden_layers) + 1);
    int prev = in_width;
    for (int l = 0; l < hidden_layers; ++l) {
      layers_[static_cast<std::size_t>(l)].weights =
          Eigen::MatrixXd::Zero(hidden_width, prev);
      layers_[static_cast<std::size_t>(l)].biases =
          Eigen::VectorXd::Zero(hidden_width);
      prev = hidden_width;
    }
    layers_.back().weights = Eigen::MatrixXd::Zero(2 * head_width, prev);
    layers_.back().biases = Eigen::VectorXd::Zero(2 * head_width);
  }

  /// Hidden layers: fan-in-scaled uniform. Output layer: zero when
  /// output_scale == 0 (the whole coupling layer then starts as the
  /// identity), otherwise the same fan-in rule scaled by output_scale.
  void init(Rng& rng, double output_scale = 0.0) {
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const bool last = l + 1 == layers_.size();
      const double bound =
          (last ? output_scale : 1.0) /
          std::sqrt(static_cast<double>(layers_[l].weights.cols()));
      fill_uniform(layers_[l].weights, bound, rng);
      layers_[l].biases.setZero();
    }
  }

  /// Batch forward; rows of x are independent inputs. Returns (s, t),
  /// each n x head_width.
  std::pair<Eigen::MatrixXd, Eigen::MatrixXd> forward(
      const Eigen::MatrixXd& x, GradTape* tape = nullptr) const {
    require(x.cols() == in_width_, ErrorCode::dimension,
            "Mlp::forward: input width mismatch");
    if (tape) {
      tape->input = x;
      tape->hidden.clear();
      tape->consumed = false;
    }
    Eigen::MatrixXd act = x;
    for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
      act = ((act * layers_[l].weights.transpose()).rowwise() +
             layers_[l].biases.transpose())
                .eval();
      act = (act.array().max(0.0) + kLeakySlope * act.array().min(0.0)).matrix();
      if (tape) tape->hidden.push_back(act);
    }
    const auto& out_layer = layers_.back();
    Eigen::MatrixXd out = (act * out_layer.weights.transpose()).rowwise() +
                          out_layer.biases.transpose();
    Eigen::MatrixXd s =
        (kScaleBound * (out.leftCols(head_width_) / kScaleBound).array().tanh())
            .matrix();
    Eigen::MatrixXd t = out.rightCols(head_width_);
    if (tape) tape->s = s;
    return {std::move(s), std::move(t)};
  }

  /// Backward through the recorded forward; accumulates parameter gradients
  /// into `grads` (which must match layer shapes) and returns the gradient
  /// with respect to the input rows.
  Eigen::MatrixXd backward(GradTape& tape, const Eigen::MatrixXd& grad_s,
                           const Eigen::MatrixXd& grad_t,
                           MlpGrad& grads) const {
    require(!tape.consumed, ErrorCode::logic, "gradient tape already consumed");
    tape.consumed = true;
    require(grads.size() == layers_.size(), ErrorCode::dimension,
            "Mlp::backward: gradient shape mismatch");
    // Undo the tanh squash on the s head.
    Eigen::MatrixXd d_out(grad_s.rows(), 2 * head_width_);
    d_out.leftCols(head_width_) =
        (grad_s.array() * (1.0 - (tape.s / kScaleBound).array().square()))
            .matrix();
    d_out.rightCols(head_width_) = grad_t;

    Eigen::MatrixXd d_act = d_out;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const Eigen::MatrixXd& below =
          l == 0 ? tape.input : tape.hidden[l - 1];
      grads[l].d_weights.noalias() += d_act.transpose() * below;
      grads[l].d_biases += d_act.colwise().sum().transpose();
      if (l == 0) {
        d_act = d_act * layers_[0].weights;
      } else {
        d_act = d_act * layers_[l].weights;
        // Post-activation sign identifies the leaky branch.
        const Eigen::MatrixXd& act = tape.hidden[l - 1];
        d_act = (act.array() > 0.0).select(d_act, d_act * kLeakySlope);
      }
    }
    return d_act;
  }

  MlpGrad zero_grad() const {
    MlpGrad g(layers_.size());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      g[l].d_weights = Eigen::MatrixXd::Zero(layers_[l].weights.rows(),
                                             layers_[l].weights.cols());
      g[l].d_biases = Eigen::VectorXd::Zero(layers_[l].biases.size());
    }
    return g;
  }

  void append_param_views(std::vector<ParamView>& out) {
    for (auto& layer : layers_) {
      out.push_back({layer.weights.data(), layer.weights.size()});
      out.push_back({layer.biases.data(), layer.biases.size()});
    }
  }

  void append_param_views(std::vector<ConstParamView>& out) const {
    for (const auto& layer : layers_) {
      out.push_back({layer.weights.data(), layer.weights.size()});
      out.push_back({layer.biases.data(), layer.biases.size()});
    }
  }

  int in_width() const { return in_width_; }
  int head_width() const { return head_width_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }

  static constexpr double kLeakySlope = 0.01;
  static constexpr double kScaleBound = 5.0;

 private:
  static void fill_uniform(Eigen::MatrixXd& m, double bound, Rng& rng) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        m(i, j) = bound * (2.0 * rng.uniform() - 1.0);
      }
    }
  }

  int in_width_ = 0;
  int head_width_ = 0;
  std::vector<DenseLayer> layers_;
};

inline void append_grad_views(const MlpGrad& grads,
                              std::vector<ConstParamView>& out) {
  for (const auto& g : grads) {
    out.push_back({g.d_weights.data(), g.d_weights.size()});
    out.push_back({g.d_biases.data(), g.d_biases.size()});
  }
}

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Per-parameter first/second moment accumulators; shapes are locked to the
/// parameter enumeration on first use.
class AdamState {
 public:
  explicit AdamState(const AdamConfig& cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::int64_t step() const { return step_; }

  void step(const std::vector<ParamView>& params,
            const std::vector<ConstParamView>& grads) {
    require(params.size() == grads.size(), ErrorCode::dimension,
            "adam: parameter/gradient block count mismatch");
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = Eigen::ArrayXd::Zero(params[i].size);
        v_[i] = Eigen::ArrayXd::Zero(params[i].size);
      }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      require(params[i].size == grads[i].size && params[i].size == m_[i].size(),
              ErrorCode::dimension, "adam: block shape mismatch");
      Eigen::Map<Eigen::ArrayXd> p(params[i].data, params[i].size);
      Eigen::Map<const Eigen::ArrayXd> g(grads[i].data, grads[i].size);
      require(g.isFinite().all(), ErrorCode::numeric, "diverged");
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.square();
      p -= cfg_.lr * (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + cfg_.eps);
    }
  }

 private:
  AdamConfig cfg_;
  std::int64_t step_ = 0;
  std::vector<Eigen::ArrayXd> m_, v_;
};

}  // namespace poseprior
