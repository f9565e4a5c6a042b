#pragma once

// The full model: tweet and neighbour encoders, topic VAE, topic-queried
// attention, GRU recurrence and the intensity / stance heads, plus the
// per-sequence forward pass shared by training, evaluation and export.

#include <array>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ntom/attention.hpp"
#include "ntom/autodiff.hpp"
#include "ntom/data.hpp"
#include "ntom/encoders.hpp"
#include "ntom/temporal_process.hpp"
#include "ntom/topic_model.hpp"

namespace ntom {

enum class Variant { kFull, kNoVae, kNoContext, kGruOnly };

/// Throws std::invalid_argument for an unknown name.
Variant parse_variant(std::string_view name);
const char* variant_name(Variant v);

tpp::TimeLossMode parse_time_loss(std::string_view name);
const char* time_loss_name(tpp::TimeLossMode m);
BowLikelihood parse_likelihood(std::string_view name);
const char* likelihood_name(BowLikelihood l);
const char* time_transform_name(TimeTransform t);

struct ModelConfig {
  std::size_t vocab_size = 0;
  /// Rows of the user table; row 0 stands for users unseen in training.
  std::size_t user_rows = 1;
  std::size_t embed_dim = 50;
  std::size_t lstm_hidden = 32;
  std::size_t context_hidden = 32;
  std::size_t gru_hidden = 32;
  std::size_t user_dim = 16;
  std::size_t topics = 50;
  std::size_t vae_hidden = 100;
  std::size_t queue_len = 3;
  std::size_t max_len = 7;

  Variant variant = Variant::kFull;
  LossWeights weights;
  double sigma = 1.0;
  tpp::TimeLossMode time_loss = tpp::TimeLossMode::kGaussianNll;
  BowLikelihood likelihood = BowLikelihood::kGaussian;
  TimeTransform transform = TimeTransform::kLog1p;
  double horizon = 1e3;

  /// Stable "key=value;..." rendering of every field; hashed into checkpoints.
  std::string canonical() const;
  std::uint64_t hash() const;
  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

/// Applies an ablation switch: no_vae also forces eta to 0.
ModelConfig ablate(ModelConfig cfg, Variant variant);

class NtomModel {
 public:
  NtomModel(ModelConfig cfg, Vocabulary vocab, std::vector<std::string> users,
            std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  /// users()[r - 1] owns row r of the user table.
  const std::vector<std::string>& users() const { return users_; }
  std::size_t user_row(const std::string& user_id) const;

  /// Every parameter, in a fixed order (checkpoint layout).
  std::vector<ad::Param*> params();
  /// Parameters updated by the optimizer.
  std::vector<ad::Param*> trainable_params();

  TweetEncoder tweet;
  NeighborEncoder neighbor;
  TopicModel topic;
  ContextAttention attention;
  GruCell gru;
  IntensityHead intensity;
  StanceHead stance;
  ad::Param user_table;

 private:
  ModelConfig cfg_;
  Vocabulary vocab_;
  std::vector<std::string> users_;
  std::unordered_map<std::string, std::size_t> user_rows_;
};

struct StepOutput {
  std::size_t step = 0;         // position of the input post in the sequence
  std::size_t input_post = 0;   // dataset index of the input post
  double tau_hat = 0.0;         // model space
  double tau_true = std::numeric_limits<double>::quiet_NaN();
  std::array<double, kStanceClasses> stance_probs{};
  int stance_true = -1;
  bool defective = false;
};

struct SequenceOutput {
  ad::Tensor total;   // weighted loss summed over steps
  ad::Tensor l_x;
  ad::Tensor l_time;
  ad::Tensor l_stan;
  std::vector<StepOutput> steps;
  std::vector<AttentionRecord> attention;
};

struct ForwardOptions {
  /// VAE noise source; the posterior mean is used when null.
  std::mt19937_64* noise = nullptr;
  bool trace_attention = false;
  /// Also predict past the last post (no target, no loss).
  bool predict_past_end = false;
};

/// Forward pass bound to one graph. Post encodings are memoized per graph, so
/// a post shared by several sequences of a batch is encoded once.
class ForwardPass {
 public:
  ForwardPass(NtomModel& model, ad::Graph& graph, std::span<const Post> posts);

  SequenceOutput run(const EventSequence& seq, const ForwardOptions& opts = {});

 private:
  struct Encoded {
    ad::Tensor hidden;
    TopicPosterior posterior;
    ad::Tensor bow;
  };
  const Encoded& encode(std::size_t post);

  NtomModel& m_;
  ad::Graph& g_;
  std::span<const Post> posts_;
  std::unordered_map<std::size_t, Encoded> memo_;
};

}  // namespace ntom
