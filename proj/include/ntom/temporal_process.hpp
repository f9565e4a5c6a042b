#pragma once

// GRU recurrence over the fused per-step representation, the intensity and
// stance heads, and the graph-side loss terms.

#include <array>
#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "ntom/autodiff.hpp"
#include "ntom/point_process.hpp"

namespace ntom {

inline constexpr std::size_t kStanceClasses = 3;  // support, oppose, neutral

/// Inputs to one GRU step; concatenated in this order.
struct FusedInput {
  ad::Tensor context;  // c_i
  ad::Tensor tweet;    // h_i
  ad::Tensor topic;    // z_i
  ad::Tensor tau;      // 1x1 transformed elapsed time
  ad::Tensor user;     // u

  ad::Tensor concat(ad::Graph& g) const;
};

/// GRU with gate blocks [update | reset | candidate]:
///   u = sig(x Wu + h Uu + b), r = sig(x Wr + h Ur + b)
///   n = tanh(x Wn + bn + r * (h Un + bhn)),  h' = h + u * (n - h)
class GruCell {
 public:
  GruCell() = default;
  GruCell(std::size_t input_dim, std::size_t hidden_dim, std::mt19937_64& rng);

  ad::Tensor step(ad::Graph& g, ad::Tensor prev, ad::Tensor x);
  ad::Tensor step(ad::Graph& g, ad::Tensor prev, const FusedInput& fused) {
    return step(g, prev, fused.concat(g));
  }

  std::size_t input_dim() const { return w_input.value.rows(); }
  std::size_t hidden_dim() const { return w_hidden.value.rows(); }
  void collect(std::vector<ad::Param*>& out);

  ad::Param w_input;   // in x 3m
  ad::Param w_hidden;  // m x 3m
  ad::Param b_input;   // 1 x 3m
  ad::Param b_hidden;  // 1 x 3m
};

/// lambda(t) = exp(b + v . g + w t). Also serves as the linear regression
/// head (b + v . g) of the GRU-only ablation.
class IntensityHead {
 public:
  IntensityHead() = default;
  IntensityHead(std::size_t hidden_dim, std::mt19937_64& rng);

  /// a = b_lambda + g . v_lambda, 1x1.
  ad::Tensor base(ad::Graph& g, ad::Tensor state);
  ad::Tensor slope(ad::Graph& g) { return g.param(w); }
  void collect(std::vector<ad::Param*>& out);

  ad::Param b;  // 1x1
  ad::Param v;  // m x 1
  ad::Param w;  // 1x1
};

class StanceHead {
 public:
  StanceHead() = default;
  StanceHead(std::size_t hidden_dim, std::mt19937_64& rng);

  ad::Tensor logits(ad::Graph& g, ad::Tensor state);
  /// softmax(g W + b) on a plain hidden vector.
  std::array<double, kStanceClasses> predict(std::span<const double> state) const;
  void collect(std::vector<ad::Param*>& out);

  ad::Param w;     // m x 3
  ad::Param bias;  // 1 x 3
};

/// Expected next-event time as a differentiable node of (a, w).
ad::Tensor expected_time_node(ad::Graph& g, ad::Tensor a, ad::Tensor w, double horizon,
                              tpp::Expectation* info = nullptr);

/// Lambda(tau) as a differentiable node of (a, w).
ad::Tensor cumulative_intensity_node(ad::Graph& g, ad::Tensor a, ad::Tensor w, double tau);

/// (tau - tau_hat)^2 / (2 sigma^2) + log(sigma sqrt(2 pi)).
ad::Tensor gaussian_time_loss_node(ad::Graph& g, double tau_true, ad::Tensor tau_hat,
                                   double sigma);

/// -log f(tau_true) = -(a + w tau) + Lambda(tau).
ad::Tensor tpp_time_loss_node(ad::Graph& g, ad::Tensor a, ad::Tensor w, double tau_true);

/// -log softmax(logits)[label].
ad::Tensor cross_entropy_node(ad::Graph& g, ad::Tensor logits, std::size_t label);

struct LossWeights {
  double eta = 0.2;    // topic model
  double beta = 0.4;   // time
  double gamma = 0.4;  // stance
};

double total_loss(double l_x, double l_time, double l_stan, const LossWeights& w);
ad::Tensor total_loss_node(ad::Graph& g, ad::Tensor l_x, ad::Tensor l_time, ad::Tensor l_stan,
                           const LossWeights& w);

}  // namespace ntom
