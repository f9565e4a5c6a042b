#pragma once

// Dataset ingestion and preprocessing: JSON-lines loading, vocabulary,
// per-user grouping, filtering and windowing, the per-user train/test split,
// neighbour queues, and interval transforms.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ntom/autodiff.hpp"
#include "ntom/encoders.hpp"

namespace ntom {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Post {
  std::string user_id;
  double timestamp = 0.0;  // natural units (hours, minutes, ...)
  std::string text;
  std::vector<TokenId> token_ids;
  std::vector<std::pair<TokenId, double>> bow;  // sparse term frequencies
  int stance = 0;
  std::vector<std::string> neighbors;
  /// Elapsed time since the user's previous post; 0 for their first post.
  double interval = 0.0;
  /// Planted topic for simulated posts, -1 otherwise.
  int topic = -1;
};

struct LoadResult {
  std::vector<Post> posts;
  std::size_t shifted_duplicates = 0;
};

/// Parses one post per line. Sorted by (user_id, timestamp); a post whose
/// timestamp equals the previous one of the same user is shifted by +1e-6.
/// Throws DataError naming the line on malformed input.
LoadResult load_jsonl(const std::filesystem::path& path);
LoadResult parse_jsonl(std::string_view content);
void write_jsonl(const std::filesystem::path& path, std::span<const Post> posts);

/// Lower-cased whitespace tokens.
std::vector<std::string> tokenize(std::string_view text);

/// PAD, UNK, then the max_size - 2 most frequent tokens (ties lexicographic).
Vocabulary build_vocab(std::span<const Post> corpus, std::size_t max_size = 3000);

/// Fills token_ids (truncated to max_tweet_len, UNK for unseen words, a lone
/// UNK for empty text) and the term-frequency bag over non-special ids.
void assign_tokens(std::span<Post> posts, const Vocabulary& vocab, std::size_t max_tweet_len);

/// 1 x V term-frequency row.
ad::Matrix dense_bow(const Post& post, std::size_t vocab_size);

struct UserPosts {
  std::string user_id;
  std::vector<std::size_t> posts;  // indices into the post list, chronological
};

/// Requires posts sorted by (user_id, timestamp).
std::vector<UserPosts> group_by_user(std::span<const Post> posts);

/// Sets Post::interval from consecutive timestamps of each user. Throws
/// DataError on non-increasing timestamps.
void compute_intervals(std::span<Post> posts);

struct EventSequence {
  std::string user_id;
  std::vector<std::size_t> posts;
  /// queues[i]: up to L neighbour posts strictly before posts[i], oldest first.
  std::vector<std::vector<std::size_t>> queues;
};

/// Start offsets of stride-`stride` windows of length max_len over n posts;
/// a single window when n <= max_len.
std::vector<std::pair<std::size_t, std::size_t>> window_ranges(std::size_t n, std::size_t max_len,
                                                               std::size_t stride);

/// Drops users with fewer than min_posts posts and windows the rest.
std::vector<EventSequence> filter_and_window(std::span<const UserPosts> users,
                                             std::size_t min_posts = 3, std::size_t max_len = 7,
                                             std::size_t stride = 1);

/// ceil((1 - train_frac) n): posts held out at the end of a user's history.
std::size_t test_count(std::size_t n, double train_frac = 0.9);

struct UserSplit {
  UserPosts train;                   // earlier posts
  std::vector<std::size_t> targets;  // held-out posts (indices into the user's full list)
};

std::vector<UserSplit> split_train_test(std::span<const UserPosts> users,
                                        double train_frac = 0.9);

/// Neighbour index over the whole post list, used to fill queues.
class NeighborIndex {
 public:
  explicit NeighborIndex(std::span<const Post> posts);

  /// Up to L most recent posts by `user`'s neighbours (excluding the user)
  /// with timestamp strictly before `before`, oldest first.
  std::vector<std::size_t> queue(const std::string& user, double before, std::size_t L) const;

 private:
  std::span<const Post> posts_;
  std::unordered_map<std::string, std::vector<std::size_t>> by_user_;
  std::unordered_map<std::string, std::vector<std::string>> neighbors_;
};

void attach_neighbor_queues(std::span<EventSequence> sequences, std::span<const Post> posts,
                            std::size_t L = 3);

enum class TimeTransform { kLog1p, kLinear };

TimeTransform parse_time_transform(std::string_view name);
double to_model_time(double natural, TimeTransform t);
double to_natural_time(double model, TimeTransform t);

/// Intervals of one user's chronological timestamps (first = 0), optionally
/// transformed. Throws DataError on non-increasing timestamps.
std::vector<double> transform_intervals(std::span<const double> timestamps, TimeTransform t);


struct PrepareOptions {
  std::size_t min_posts = 3;
  std::size_t max_len = 7;
  std::size_t stride = 1;
  double train_frac = 0.9;
  /// Share of training sequences held out for early stopping.
  double val_frac = 0.1;
  std::size_t queue_len = 3;
  std::size_t vocab_size = 3000;
  std::size_t max_tweet_len = 30;
};

/// Everything the model consumes, with sequences indexing into `posts`.
struct PreparedData {
  std::vector<Post> posts;
  Vocabulary vocab;
  std::vector<std::string> users;  // users that survived filtering, sorted
  std::vector<EventSequence> train;
  std::vector<EventSequence> validation;
  /// One sequence per held-out post, ending at that post; only the final
  /// prediction of each is scored.
  std::vector<EventSequence> test;
};

/// Filter, split, window and queue a loaded post list. The vocabulary is
/// built from training posts unless `vocab` is given.
PreparedData prepare_dataset(std::vector<Post> posts, const PrepareOptions& opts,
                             std::uint64_t seed, const Vocabulary* vocab = nullptr);

}  // namespace ntom
