#pragma once

// Optimisation loop, evaluation metrics, reference baselines and
// checkpointing.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ntom/autodiff.hpp"
#include "ntom/data.hpp"
#include "ntom/model.hpp"

namespace ntom {

struct AdamState {
  std::vector<ad::Matrix> m;
  std::vector<ad::Matrix> v;
  std::size_t step = 0;
  double lr = 5e-4;
  double decay = 0.9;  // applied by end_epoch()
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void end_epoch() { lr *= decay; }
};

AdamState make_adam(std::span<ad::Param* const> params, double lr = 5e-4, double decay = 0.9);

/// One bias-corrected Adam update from each Param::grad. Returns false and
/// leaves everything untouched when any gradient is non-finite.
bool adam_step(std::span<ad::Param* const> params, AdamState& state);

/// Rescales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(std::span<ad::Param* const> params, double max_norm);

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  std::size_t patience = 3;
  double lr = 5e-4;
  double lr_decay = 0.9;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;
  /// One JSON object per epoch is appended here when set.
  std::filesystem::path log_path;
  std::ostream* progress = nullptr;
};

struct LossBreakdown {
  double l_x = 0.0;
  double l_time = 0.0;
  double l_stan = 0.0;
  double total = 0.0;
  std::size_t sequences = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  LossBreakdown train;        // means per sequence
  LossBreakdown validation;   // means per sequence (posterior-mean z)
  double first_batch_total = 0.0;
  std::size_t skipped_batches = 0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  bool diverged = false;
  bool stopped_early = false;
};

TrainResult train(NtomModel& model, const PreparedData& data, const TrainOptions& opts);

/// Mean losses with posterior-mean topic vectors.
LossBreakdown mean_loss(NtomModel& model, std::span<const Post> posts,
                        std::span<const EventSequence> sequences);

struct Metrics {
  std::size_t n = 0;
  double accuracy = 0.0;
  double mse = 0.0;  // natural units squared
  /// confusion[true][predicted]
  std::array<std::array<std::size_t, kStanceClasses>, kStanceClasses> confusion{};
  double defect_rate = 0.0;
};

/// Index of the largest probability, lowest index on ties.
std::size_t argmax_stance(std::span<const double> probs);

/// Scores the final prediction of every sequence. Throws std::invalid_argument
/// on an empty test set.
Metrics evaluate(NtomModel& model, std::span<const Post> posts,
                 std::span<const EventSequence> test);

/// Scores a fixed stance and interval (natural units) on the final post of
/// every test sequence.
Metrics evaluate_constant(std::size_t stance, double interval, std::span<const Post> posts,
                          std::span<const EventSequence> test);

struct Baselines {
  std::size_t majority_stance = 0;
  double mean_interval = 0.0;  // natural units
  Metrics metrics;
};

/// Majority-class stance and constant mean interval, both fitted on the
/// prediction targets of the training sequences.
Baselines fit_baselines(const PreparedData& data);

/// Final-step predictions for one sequence ending at the latest known post.
struct NextPrediction {
  std::string user_id;
  double tau_hat = 0.0;  // natural units
  std::array<double, kStanceClasses> stance_probs{};
  bool defective = false;
};
NextPrediction predict_next(NtomModel& model, std::span<const Post> posts,
                            const EventSequence& history);

std::vector<AttentionRecord> trace_attention(NtomModel& model, std::span<const Post> posts,
                                             std::span<const EventSequence> sequences);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(NtomModel& model, const std::filesystem::path& path);
/// Rejects unknown versions, hash mismatches and malformed or truncated files.
/// With `expected`, also rejects a checkpoint whose config differs, naming the
/// first mismatching field.
NtomModel load_checkpoint(const std::filesystem::path& path,
                          const ModelConfig* expected = nullptr);

/// FNV-1a of the checkpoint file bytes, as 16 hex digits.
std::string file_hash(const std::filesystem::path& path);

}  // namespace ntom
