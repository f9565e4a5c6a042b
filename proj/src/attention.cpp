#include "ntom/attention.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "ntom/encoders.hpp"

namespace ntom {

ContextAttention::ContextAttention(std::size_t context_dim, std::size_t topics,
                                   std::size_t query_dim, std::mt19937_64& rng) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(context_dim + topics));
  w_hidden = uniform_param("attention.w_hidden", context_dim, query_dim, scale, rng);
  w_topic = uniform_param("attention.w_topic", topics, query_dim, scale, rng);
}

void ContextAttention::collect(std::vector<ad::Param*>& out) {
  out.push_back(&w_hidden);
  out.push_back(&w_topic);
}

AttentionOutput ContextAttention::attend(ad::Graph& g, ad::Tensor h_i, ad::Tensor z_i,
                                         std::span<const NeighborState> neighbors) {
  AttentionOutput out;
  if (neighbors.empty()) {
    out.context = g.zeros(1, context_dim());
    return out;
  }
  const ad::Tensor query_parts[] = {h_i, z_i};
  ad::Tensor query = g.concat_cols(query_parts);
  if (query.cols() != w_hidden.value.cols()) {
    throw std::invalid_argument("attend: query has " + std::to_string(query.cols()) +
                                " columns, expected " + std::to_string(w_hidden.value.cols()));
  }
  ad::Tensor wh = g.param(w_hidden);
  ad::Tensor wz = g.param(w_topic);
  std::vector<ad::Tensor> scores;
  std::vector<ad::Tensor> hiddens;
  scores.reserve(neighbors.size());
  for (const NeighborState& n : neighbors) {
    if (n.hidden.cols() != context_dim() || n.topic.cols() != topics()) {
      throw std::invalid_argument("attend: neighbour state has shape " +
                                  n.hidden.values().shape_string() + " / " +
                                  n.topic.values().shape_string());
    }
    ad::Tensor key = g.tanh(g.add(g.matmul(n.hidden, wh), g.matmul(n.topic, wz)));
    scores.push_back(g.sum(g.mul(query, key)));
    hiddens.push_back(n.hidden);
  }
  out.scores = g.concat_cols(scores);
  out.weights = g.softmax_rows(out.scores);
  out.context = g.matmul(out.weights, g.concat_rows(hiddens));
  return out;
}

std::vector<double> softmax(std::span<const double> values) {
  std::vector<double> out(values.begin(), values.end());
  if (out.empty()) return out;
  const double mx = *std::max_element(out.begin(), out.end());
  double total = 0.0;
  for (double& v : out) {
    v = std::exp(v - mx);
    total += v;
  }
  for (double& v : out) v /= total;
  return out;
}

namespace {
void join(std::ostream& os, std::span<const double> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) os << ',';
    os << values[i];
  }
}
}  // namespace

std::string attention_trace_tsv(std::span<const AttentionRecord> records) {
  std::ostringstream os;
  os.precision(10);
  os << "user_id\tstep\tslot\tweight\tuser_topics\tneighbor_topics\n";
  for (const AttentionRecord& r : records) {
    for (std::size_t slot = 0; slot < r.weights.size(); ++slot) {
      os << r.user_id << '\t' << r.step << '\t' << slot << '\t' << r.weights[slot] << '\t';
      join(os, r.user_topics);
      os << '\t';
      join(os, r.neighbor_topics[slot]);
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace ntom
