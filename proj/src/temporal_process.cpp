#include "ntom/temporal_process.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "ntom/attention.hpp"
#include "ntom/encoders.hpp"

namespace ntom {

ad::Tensor FusedInput::concat(ad::Graph& g) const {
  const ad::Tensor parts[] = {context, tweet, topic, tau, user};
  return g.concat_cols(parts);
}

GruCell::GruCell(std::size_t input_dim, std::size_t hidden_dim, std::mt19937_64& rng) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  w_input = uniform_param("gru.w_input", input_dim, 3 * hidden_dim, scale, rng);
  w_hidden = uniform_param("gru.w_hidden", hidden_dim, 3 * hidden_dim, scale, rng);
  b_input = ad::Param("gru.b_input", ad::Matrix(1, 3 * hidden_dim));
  b_hidden = ad::Param("gru.b_hidden", ad::Matrix(1, 3 * hidden_dim));
}

void GruCell::collect(std::vector<ad::Param*>& out) {
  for (ad::Param* p : {&w_input, &w_hidden, &b_input, &b_hidden}) out.push_back(p);
}

ad::Tensor GruCell::step(ad::Graph& g, ad::Tensor prev, ad::Tensor x) {
  if (x.cols() != input_dim() || prev.cols() != hidden_dim()) {
    throw std::invalid_argument("gru_step: input " + x.values().shape_string() + ", state " +
                                prev.values().shape_string() + " do not match cell " +
                                std::to_string(input_dim()) + "->" +
                                std::to_string(hidden_dim()));
  }
  const std::size_t m = hidden_dim();
  ad::Tensor xi = g.add(g.matmul(x, g.param(w_input)), g.param(b_input));
  ad::Tensor hh = g.add(g.matmul(prev, g.param(w_hidden)), g.param(b_hidden));
  ad::Tensor update = g.sigmoid(g.add(g.slice_cols(xi, 0, m), g.slice_cols(hh, 0, m)));
  ad::Tensor reset = g.sigmoid(g.add(g.slice_cols(xi, m, m), g.slice_cols(hh, m, m)));
  ad::Tensor candidate =
      g.tanh(g.add(g.slice_cols(xi, 2 * m, m), g.mul(reset, g.slice_cols(hh, 2 * m, m))));
  return g.add(prev, g.mul(update, g.sub(candidate, prev)));
}

IntensityHead::IntensityHead(std::size_t hidden_dim, std::mt19937_64& rng)
    : b("intensity.b", ad::Matrix(1, 1)),
      v(uniform_param("intensity.v", hidden_dim, 1, 0.1, rng)),
      w("intensity.w", ad::Matrix(1, 1, 0.1)) {}

void IntensityHead::collect(std::vector<ad::Param*>& out) {
  out.push_back(&b);
  out.push_back(&v);
  out.push_back(&w);
}

ad::Tensor IntensityHead::base(ad::Graph& g, ad::Tensor state) {
  return g.add(g.matmul(state, g.param(v)), g.param(b));
}

StanceHead::StanceHead(std::size_t hidden_dim, std::mt19937_64& rng)
    : w(uniform_param("stance.w", hidden_dim, kStanceClasses,
                      1.0 / std::sqrt(static_cast<double>(hidden_dim)), rng)),
      bias("stance.b", ad::Matrix(1, kStanceClasses)) {}

void StanceHead::collect(std::vector<ad::Param*>& out) {
  out.push_back(&w);
  out.push_back(&bias);
}

ad::Tensor StanceHead::logits(ad::Graph& g, ad::Tensor state) {
  return g.add(g.matmul(state, g.param(w)), g.param(bias));
}

std::array<double, kStanceClasses> StanceHead::predict(std::span<const double> state) const {
  if (state.size() != w.value.rows()) {
    throw std::invalid_argument("predict_stance: state has " + std::to_string(state.size()) +
                                " entries, expected " + std::to_string(w.value.rows()));
  }
  std::array<double, kStanceClasses> logit{};
  for (std::size_t c = 0; c < kStanceClasses; ++c) {
    logit[c] = bias.value[c];
    for (std::size_t k = 0; k < state.size(); ++k) logit[c] += state[k] * w.value(k, c);
  }
  const std::vector<double> p = softmax(logit);
  return {p[0], p[1], p[2]};
}

ad::Tensor expected_time_node(ad::Graph& g, ad::Tensor a, ad::Tensor w, double horizon,
                              tpp::Expectation* info) {
  const tpp::Expectation e = tpp::expected_time(a.item(), w.item(), horizon);
  if (info != nullptr) *info = e;
  const ad::Tensor inputs[] = {a, w};
  const double partials[] = {e.d_a, e.d_w};
  return g.scalar_fn(inputs, e.value, partials);
}

ad::Tensor cumulative_intensity_node(ad::Graph& g, ad::Tensor a, ad::Tensor w, double tau) {
  const tpp::CumulativeGrad cg = tpp::cumulative_intensity_grad(a.item(), w.item(), tau);
  const ad::Tensor inputs[] = {a, w};
  const double partials[] = {cg.d_a, cg.d_w};
  return g.scalar_fn(inputs, cg.value, partials);
}

ad::Tensor gaussian_time_loss_node(ad::Graph& g, double tau_true, ad::Tensor tau_hat,
                                   double sigma) {
  if (!(sigma > 0)) throw std::invalid_argument("time loss: sigma must be > 0");
  ad::Tensor diff = g.sub(g.scalar(tau_true), tau_hat);
  ad::Tensor sq = g.scale(g.mul(diff, diff), 1.0 / (2.0 * sigma * sigma));
  return g.add(sq, g.scalar(std::log(sigma * std::sqrt(2.0 * std::numbers::pi))));
}

ad::Tensor tpp_time_loss_node(ad::Graph& g, ad::Tensor a, ad::Tensor w, double tau_true) {
  ad::Tensor log_intensity = g.add(a, g.scale(w, tau_true));
  return g.sub(cumulative_intensity_node(g, a, w, tau_true), log_intensity);
}

ad::Tensor cross_entropy_node(ad::Graph& g, ad::Tensor logits, std::size_t label) {
  if (label >= logits.cols()) {
    throw std::out_of_range("cross_entropy: label " + std::to_string(label) + " out of range");
  }
  return g.scale(g.log(g.slice_cols(g.softmax_rows(logits), label, 1)), -1.0);
}

double total_loss(double l_x, double l_time, double l_stan, const LossWeights& w) {
  return w.eta * l_x + w.beta * l_time + w.gamma * l_stan;
}

ad::Tensor total_loss_node(ad::Graph& g, ad::Tensor l_x, ad::Tensor l_time, ad::Tensor l_stan,
                           const LossWeights& w) {
  return g.add(g.add(g.scale(l_x, w.eta), g.scale(l_time, w.beta)), g.scale(l_stan, w.gamma));
}

}  // namespace ntom
