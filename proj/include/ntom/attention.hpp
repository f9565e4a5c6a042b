#pragma once

// Topic-queried attention over neighbour hidden states:
//
//   score_l = [h_i ; z_i] . tanh(h^c_l W_h + z^c_l W_z)
//   weights = softmax(scores),  context = sum_l weights_l h^c_l

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ntom/autodiff.hpp"

namespace ntom {

struct NeighborState {
  ad::Tensor hidden;  // h^c_l, 1 x context_dim
  ad::Tensor topic;   // z^c_l, 1 x K
};

struct AttentionOutput {
  ad::Tensor context;  // 1 x context_dim; zeros for an empty queue
  ad::Tensor scores;   // 1 x L' (invalid for an empty queue)
  ad::Tensor weights;  // 1 x L' (invalid for an empty queue)
};

class ContextAttention {
 public:
  ContextAttention() = default;
  /// query_dim = dim(h_i) + K.
  ContextAttention(std::size_t context_dim, std::size_t topics, std::size_t query_dim,
                   std::mt19937_64& rng);

  AttentionOutput attend(ad::Graph& g, ad::Tensor h_i, ad::Tensor z_i,
                         std::span<const NeighborState> neighbors);

  std::size_t context_dim() const { return w_hidden.value.rows(); }
  std::size_t topics() const { return w_topic.value.rows(); }
  void collect(std::vector<ad::Param*>& out);

  ad::Param w_hidden;  // W_h: context_dim x query_dim
  ad::Param w_topic;   // W_z: K x query_dim
};

/// One traced attention evaluation, kept for export.
struct AttentionRecord {
  std::string user_id;
  std::size_t step = 0;
  std::vector<double> weights;                       // one per queue slot
  std::vector<double> user_topics;                   // softmax of the user's mu
  std::vector<std::vector<double>> neighbor_topics;  // softmax of each neighbour's mu
  std::vector<std::size_t> neighbor_posts;           // dataset post indices, oldest first
  std::size_t user_post = 0;
};

/// Softmax of a plain vector (the "topic distribution" convention for export).
std::vector<double> softmax(std::span<const double> values);

/// Attention trace TSV: header user_id, step, slot, weight, user_topics,
/// neighbor_topics; one row per (user, step, slot).
std::string attention_trace_tsv(std::span<const AttentionRecord> records);

}  // namespace ntom
