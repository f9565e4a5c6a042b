#pragma once

// Synthetic marked multivariate Hawkes generator (Ogata thinning) with a
// planted-topic text sampler and neighbour-coupled stances.
//
// User u's intensity is
//
//   lambda_u(t) = mu_u + sum_{v -> u} sum_{t_j < t} alpha_vu * omega * exp(-omega (t - t_j)) * m_j
//
// where v -> u means u follows v (self-excitation uses v = u), and m_j is 1
// when post j's topic equals u's current topic and `cross_topic_factor`
// otherwise. Every user carries a (topic, stance) state. When u posts, with
// probability `topic_switch_prob` a fresh topic is drawn and the user's stance
// is redrawn from that topic's stance distribution, and the post carries the
// user's state. After posting, with probability `influence_prob`, the user
// adopts the stance of the neighbour post contributing most to lambda_u(t),
// so influence shows in the user's next post.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ntom/config.hpp"
#include "ntom/data.hpp"

namespace ntom {

struct SimConfig {
  std::size_t n_users = 50;
  /// (src, dst): dst follows src. Generated from follow_degree when empty.
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  std::size_t follow_degree = 3;
  /// Base rates are log-uniform in [base_rate_min, base_rate_max].
  double base_rate_min = 0.2;
  double base_rate_max = 0.2;
  double alpha_self = 0.0;
  double alpha_neighbor = 0.0;
  double decay = 1.0;  // omega
  double cross_topic_factor = 1.0;
  double horizon = 168.0;
  std::string time_unit = "hours";

  std::size_t n_topics = 8;
  std::size_t words_per_topic = 20;
  std::size_t background_words = 100;
  std::size_t stance_words = 10;
  std::size_t words_per_post = 20;
  double topic_mix = 0.8;
  /// Share of the non-topic tokens drawn from the post's stance markers.
  double stance_marker_share = 0.5;

  double influence_prob = 0.5;
  double topic_switch_prob = 0.1;
  double stance_peak = 0.6;
};

/// Reads the flat keys documented in the README; `edges` names an optional
/// "src dst" edge-list file. Throws ConfigError naming the failing key.
SimConfig sim_config_from(const KeyValues& kv);

/// Perron root of the branching matrix (alpha_vu), computed by power
/// iteration on A + I with a Collatz-Wielandt upper bound.
double branching_spectral_radius(const SimConfig& cfg);

std::string user_name(std::size_t u);

struct SimTruth {
  std::vector<double> base_rates;
  std::vector<std::vector<std::string>> topic_words;  // planted words per topic
  std::vector<std::vector<double>> topic_stance;      // stance distribution per topic
  std::vector<double> event_intensity;                // lambda_u at each accepted event
  std::size_t candidates = 0;
  std::size_t accepted = 0;
  std::size_t bound_violations = 0;
  std::size_t influenced = 0;
  double spectral_radius = 0.0;
};

struct SimResult {
  std::vector<Post> posts;  // sorted by (user_id, timestamp)
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  SimTruth truth;
};

/// Throws std::invalid_argument for an invalid or non-stationary config.
SimResult simulate_hawkes(const SimConfig& cfg, std::uint64_t seed);

/// Writes dataset.jsonl, edges.txt and truth.json under `dir`.
void write_simulation(const SimResult& result, const SimConfig& cfg, std::uint64_t seed,
                      const std::filesystem::path& dir);

}  // namespace ntom
