#pragma once

// Variational autoencoder over term-frequency bags of words. The decoder
// weight (stored K x V, row k = word profile of topic k) is the topic-word
// matrix used for inspection.

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ntom/autodiff.hpp"
#include "ntom/encoders.hpp"

namespace ntom {

inline constexpr double kLogvarMin = -8.0;
inline constexpr double kLogvarMax = 8.0;

enum class BowLikelihood { kGaussian, kMultinomial };

/// Graph-side Gaussian posterior q(z | x_b) with diagonal covariance.
struct TopicPosterior {
  ad::Tensor mu;      // 1 x K
  ad::Tensor logvar;  // 1 x K, clamped to [-8, 8]
};

struct VaeLossTerms {
  ad::Tensor total;           // reconstruction + kl
  ad::Tensor reconstruction;  // 1x1
  ad::Tensor kl;              // 1x1
};

class TopicModel {
 public:
  TopicModel() = default;
  TopicModel(std::size_t vocab_size, std::size_t hidden_dim, std::size_t topics,
             std::mt19937_64& rng);

  /// Shared tanh layer followed by separate linear heads for mu and logvar.
  TopicPosterior infer_topic(ad::Graph& g, ad::Tensor bow);
  /// z = mu + exp(logvar / 2) * noise.
  ad::Tensor sample_z(ad::Graph& g, const TopicPosterior& post, ad::Tensor noise);
  /// z * W_dec + b_dec (1 x V).
  ad::Tensor reconstruct(ad::Graph& g, ad::Tensor z);
  /// Negative ELBO: reconstruction NLL (constants dropped) + KL(q || N(0, I)).
  VaeLossTerms vae_loss(ad::Graph& g, ad::Tensor bow, const TopicPosterior& post, ad::Tensor z);

  /// Indices of the n largest weights in topic k's word profile, ties broken
  /// by ascending id. n is truncated to V.
  std::vector<std::size_t> top_word_ids(std::size_t topic, std::size_t n) const;
  std::vector<std::string> top_words(std::size_t topic, std::size_t n,
                                     const Vocabulary& vocab) const;

  std::size_t vocab_size() const { return decoder_w.value.cols(); }
  std::size_t topics() const { return decoder_w.value.rows(); }
  std::size_t hidden_dim() const { return encoder_w.value.cols(); }
  void collect(std::vector<ad::Param*>& out);

  BowLikelihood likelihood = BowLikelihood::kGaussian;

  ad::Param encoder_w;  // V x H
  ad::Param encoder_b;  // 1 x H
  ad::Param mu_w;       // H x K
  ad::Param mu_b;       // 1 x K
  ad::Param logvar_w;   // H x K
  ad::Param logvar_b;   // 1 x K
  ad::Param decoder_w;  // K x V
  ad::Param decoder_b;  // 1 x V
};

/// KL(N(mu, diag exp(logvar)) || N(0, I)) evaluated on plain vectors.
double kl_standard_normal(std::span<const double> mu, std::span<const double> logvar);

/// One row per topic: topic_id, then the top-n "word:weight" pairs, tab separated.
std::string topic_word_tsv(const TopicModel& model, const Vocabulary& vocab, std::size_t n = 10);

}  // namespace ntom
