#include "ntom/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"
#include "ntom/rng.hpp"

namespace ntom {

namespace {

constexpr std::size_t kInboxSize = 32;

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError(key, what);
}

void validate(const SimConfig& c) {
  require(c.decay > 0, "decay", "must be > 0");
  require(c.alpha_self >= 0, "alpha_self", "must be >= 0");
  require(c.alpha_neighbor >= 0, "alpha_neighbor", "must be >= 0");
  require(c.base_rate_min > 0, "base_rate_min", "must be > 0");
  require(c.base_rate_max >= c.base_rate_min, "base_rate_max", "must be >= base_rate_min");
  require(c.horizon >= 0, "horizon", "must be >= 0");
  require(c.n_topics >= 1, "n_topics", "must be >= 1");
  require(c.words_per_topic >= 1, "words_per_topic", "must be >= 1");
  require(c.background_words >= 1, "background_words", "must be >= 1");
  require(c.stance_words >= 1, "stance_words", "must be >= 1");
  require(c.words_per_post >= 1, "words_per_post", "must be >= 1");
  auto prob = [](double p) { return p >= 0 && p <= 1; };
  require(prob(c.topic_mix), "topic_mix", "must be in [0, 1]");
  require(prob(c.stance_marker_share), "stance_marker_share", "must be in [0, 1]");
  require(prob(c.influence_prob), "influence_prob", "must be in [0, 1]");
  require(prob(c.topic_switch_prob), "topic_switch_prob", "must be in [0, 1]");
  require(prob(c.stance_peak), "stance_peak", "must be in [0, 1]");
  require(prob(c.cross_topic_factor), "cross_topic_factor", "must be in [0, 1]");
  for (auto [src, dst] : c.edges) {
    require(src < c.n_users && dst < c.n_users, "edges",
            "edge " + std::to_string(src) + " " + std::to_string(dst) + " out of range");
    require(src != dst, "edges", "self edges are expressed through alpha_self");
  }
}

std::vector<std::pair<std::size_t, std::size_t>> generate_edges(const SimConfig& c,
                                                                std::uint64_t seed) {
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  if (c.n_users < 2) return edges;
  auto rng = substream(seed, "graph");
  const std::size_t degree = std::min(c.follow_degree, c.n_users - 1);
  for (std::size_t dst = 0; dst < c.n_users; ++dst) {
    std::vector<std::size_t> others;
    for (std::size_t v = 0; v < c.n_users; ++v)
      if (v != dst) others.push_back(v);
    // Partial Fisher-Yates with an explicit index draw keeps the stream portable.
    for (std::size_t i = 0; i < degree; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, others.size() - 1);
      std::swap(others[i], others[pick(rng)]);
      edges.emplace_back(others[i], dst);
    }
  }
  std::sort(edges.begin(), edges.end());
  return edges;
}

double spectral_radius(std::size_t n, const std::vector<std::pair<std::size_t, std::size_t>>& edges,
                       double alpha_self, double alpha_neighbor) {
  if (n == 0) return 0.0;
  // y = (A^T + I) x with A[src][dst]; A and A^T share the Perron root.
  auto apply = [&](const std::vector<double>& x) {
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = (1.0 + alpha_self) * x[i];
    for (auto [src, dst] : edges) y[dst] += alpha_neighbor * x[src];
    return y;
  };
  std::vector<double> x(n, 1.0);
  for (int it = 0; it < 2000; ++it) {
    std::vector<double> y = apply(x);
    const double mx = *std::max_element(y.begin(), y.end());
    for (std::size_t i = 0; i < n; ++i) x[i] = y[i] / mx;
  }
  const std::vector<double> y = apply(x);
  double upper = 0.0;
  for (std::size_t i = 0; i < n; ++i) upper = std::max(upper, y[i] / x[i]);
  return upper - 1.0;
}

}  // namespace

std::string user_name(std::size_t u) {
  std::ostringstream os;
  os << 'u' << std::setw(4) << std::setfill('0') << u;
  return os.str();
}

SimConfig sim_config_from(const KeyValues& kv) {
  SimConfig c;
  c.n_users = kv.get_size("n_users", c.n_users);
  c.follow_degree = kv.get_size("follow_degree", c.follow_degree);
  if (kv.has("base_rate")) {
    c.base_rate_min = c.base_rate_max = kv.get_double("base_rate", c.base_rate_min);
  }
  c.base_rate_min = kv.get_double("base_rate_min", c.base_rate_min);
  c.base_rate_max = kv.get_double("base_rate_max", std::max(c.base_rate_max, c.base_rate_min));
  c.alpha_self = kv.get_double("alpha_self", c.alpha_self);
  c.alpha_neighbor = kv.get_double("alpha_neighbor", c.alpha_neighbor);
  c.decay = kv.get_double("decay", c.decay);
  c.cross_topic_factor = kv.get_double("cross_topic_factor", c.cross_topic_factor);
  c.horizon = kv.get_double("horizon", c.horizon);
  c.time_unit = kv.get_string("time_unit", c.time_unit);
  c.n_topics = kv.get_size("n_topics", c.n_topics);
  c.words_per_topic = kv.get_size("words_per_topic", c.words_per_topic);
  c.background_words = kv.get_size("background_words", c.background_words);
  c.stance_words = kv.get_size("stance_words", c.stance_words);
  c.words_per_post = kv.get_size("words_per_post", c.words_per_post);
  c.topic_mix = kv.get_double("topic_mix", c.topic_mix);
  c.stance_marker_share = kv.get_double("stance_marker_share", c.stance_marker_share);
  c.influence_prob = kv.get_double("influence_prob", c.influence_prob);
  c.topic_switch_prob = kv.get_double("topic_switch_prob", c.topic_switch_prob);
  c.stance_peak = kv.get_double("stance_peak", c.stance_peak);
  if (kv.has("edges")) {
    const auto path = kv.get_path("edges");
    std::ifstream in(path);
    if (!in) throw ConfigError("edges", "cannot open edge list " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
      std::istringstream fields(line);
      std::string src, dst;
      if (!(fields >> src >> dst)) {
        throw ConfigError("edges", path.string() + ":" + std::to_string(line_no) +
                                       ": expected 'src dst'");
      }
      auto parse_user = [&](const std::string& s) -> std::size_t {
        const std::string digits = (!s.empty() && s[0] == 'u') ? s.substr(1) : s;
        try {
          return static_cast<std::size_t>(std::stoul(digits));
        } catch (const std::exception&) {
          throw ConfigError("edges", path.string() + ":" + std::to_string(line_no) +
                                         ": bad user '" + s + "'");
        }
      };
      c.edges.emplace_back(parse_user(src), parse_user(dst));
    }
  }
  validate(c);
  return c;
}

double branching_spectral_radius(const SimConfig& cfg) {
  return spectral_radius(cfg.n_users, cfg.edges, cfg.alpha_self, cfg.alpha_neighbor);
}

SimResult simulate_hawkes(const SimConfig& cfg_in, std::uint64_t seed) {
  validate(cfg_in);
  SimConfig cfg = cfg_in;
  if (cfg.edges.empty()) cfg.edges = generate_edges(cfg, seed);

  SimResult result;
  result.edges = cfg.edges;
  SimTruth& truth = result.truth;
  truth.spectral_radius = branching_spectral_radius(cfg);
  if (!(truth.spectral_radius < 1.0)) {
    throw std::invalid_argument("non-stationary config: branching spectral radius " +
                                std::to_string(truth.spectral_radius) + " >= 1");
  }

  const std::size_t n = cfg.n_users;
  const std::size_t K = cfg.n_topics;
  auto rng = substream(seed, "simulation");
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  // Planted vocabulary.
  std::vector<double> zipf(cfg.words_per_topic);
  for (std::size_t j = 0; j < zipf.size(); ++j) zipf[j] = 1.0 / static_cast<double>(j + 1);
  std::discrete_distribution<std::size_t> topic_word(zipf.begin(), zipf.end());
  std::uniform_int_distribution<std::size_t> bg_word(0, cfg.background_words - 1);
  std::uniform_int_distribution<std::size_t> stance_word(0, cfg.stance_words - 1);
  std::uniform_int_distribution<std::size_t> any_topic(0, K - 1);
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<std::string> words;
    for (std::size_t j = 0; j < cfg.words_per_topic; ++j)
      words.push_back("t" + std::to_string(k) + "w" + std::to_string(j));
    truth.topic_words.push_back(std::move(words));
    std::vector<double> dist(3, (1.0 - cfg.stance_peak) / 2.0);
    dist[k % 3] = cfg.stance_peak;
    truth.topic_stance.push_back(std::move(dist));
  }
  auto draw_stance = [&](std::size_t k) {
    std::discrete_distribution<int> d(truth.topic_stance[k].begin(), truth.topic_stance[k].end());
    return d(rng);
  };

  // Per-user state.
  truth.base_rates.resize(n);
  const double lo = std::log(cfg.base_rate_min), hi = std::log(cfg.base_rate_max);
  for (std::size_t u = 0; u < n; ++u) truth.base_rates[u] = std::exp(lo + (hi - lo) * unif(rng));
  std::vector<std::size_t> topic_state(n);
  std::vector<int> stance_state(n);
  for (std::size_t u = 0; u < n; ++u) {
    topic_state[u] = any_topic(rng);
    stance_state[u] = draw_stance(topic_state[u]);
  }
  std::vector<std::vector<std::size_t>> followers(n), following(n);
  for (auto [src, dst] : cfg.edges) {
    followers[src].push_back(dst);
    following[dst].push_back(src);
  }
  std::vector<std::vector<std::string>> following_names(n);
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v : following[u]) following_names[u].push_back(user_name(v));

  // excitation[u * K + k]: decayed excitation of u by topic-k posts.
  std::vector<double> excitation(n * K, 0.0);
  std::vector<std::deque<std::size_t>> inbox(n);  // recent neighbour posts
  struct Event {
    std::size_t user;
    double time;
    std::size_t topic;
    int stance;
    double intensity;
  };
  std::vector<Event> events;

  auto user_intensity = [&](std::size_t u) {
    const double* e = &excitation[u * K];
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) total += e[k];
    const double own = e[topic_state[u]];
    return truth.base_rates[u] + own + cfg.cross_topic_factor * (total - own);
  };

  double t = 0.0;
  std::vector<double> lambda(n);
  while (n > 0) {
    double bound = 0.0;
    for (std::size_t u = 0; u < n; ++u) bound += user_intensity(u);
    std::exponential_distribution<double> gap(bound);
    const double dt = gap(rng);
    if (t + dt > cfg.horizon) break;
    t += dt;
    const double factor = std::exp(-cfg.decay * dt);
    for (double& e : excitation) e *= factor;
    ++truth.candidates;

    double total = 0.0;
    for (std::size_t u = 0; u < n; ++u) {
      lambda[u] = user_intensity(u);
      total += lambda[u];
    }
    if (unif(rng) * bound > total) continue;
    if (total > bound * (1.0 + 1e-12)) ++truth.bound_violations;

    double pick = unif(rng) * total;
    std::size_t u = 0;
    for (; u + 1 < n; ++u) {
      if (pick < lambda[u]) break;
      pick -= lambda[u];
    }

    // Topic may switch (redrawing the user's stance) and the post carries the
    // user's state. Afterwards the user may adopt the stance of the strongest
    // neighbour post seen so far, which shows in their next post.
    const double influence_draw = unif(rng);
    const double switch_draw = unif(rng);
    if (switch_draw < cfg.topic_switch_prob) {
      topic_state[u] = any_topic(rng);
      stance_state[u] = draw_stance(topic_state[u]);
    }
    const std::size_t k = topic_state[u];
    events.push_back({u, t, k, stance_state[u], lambda[u]});
    std::size_t best = SIZE_MAX;
    double best_contrib = 0.0;
    for (std::size_t idx : inbox[u]) {
      const Event& ev = events[idx];
      const double m = ev.topic == k ? 1.0 : cfg.cross_topic_factor;
      const double contrib = cfg.alpha_neighbor * cfg.decay * std::exp(-cfg.decay * (t - ev.time)) * m;
      if (contrib >= best_contrib && contrib > 0) {
        best_contrib = contrib;
        best = idx;
      }
    }
    if (best != SIZE_MAX && influence_draw < cfg.influence_prob) {
      stance_state[u] = events[best].stance;
      ++truth.influenced;
    }
    const std::size_t id = events.size() - 1;
    ++truth.accepted;

    excitation[u * K + k] += cfg.alpha_self * cfg.decay;
    for (std::size_t f : followers[u]) {
      excitation[f * K + k] += cfg.alpha_neighbor * cfg.decay;
      inbox[f].push_back(id);
      if (inbox[f].size() > kInboxSize) inbox[f].pop_front();
    }
  }

  // Text.
  auto text_rng = substream(seed, "text");
  std::uniform_real_distribution<double> tunif(0.0, 1.0);
  std::vector<std::size_t> order(events.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::string> texts(events.size());
  for (std::size_t i = 0; i < events.size(); ++i) {
    const Event& ev = events[i];
    std::ostringstream os;
    for (std::size_t w = 0; w < cfg.words_per_post; ++w) {
      if (w) os << ' ';
      const double r = tunif(text_rng);
      if (r < cfg.topic_mix) {
        os << truth.topic_words[ev.topic][topic_word(text_rng)];
      } else if (r < cfg.topic_mix + (1.0 - cfg.topic_mix) * cfg.stance_marker_share) {
        os << 's' << ev.stance << 'm' << stance_word(text_rng);
      } else {
        os << "bg" << bg_word(text_rng);
      }
    }
    texts[i] = os.str();
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return events[a].user != events[b].user ? events[a].user < events[b].user
                                            : events[a].time < events[b].time;
  });
  for (std::size_t i : order) {
    const Event& ev = events[i];
    Post p;
    p.user_id = user_name(ev.user);
    p.timestamp = ev.time;
    p.text = texts[i];
    p.stance = ev.stance;
    p.neighbors = following_names[ev.user];
    p.topic = static_cast<int>(ev.topic);
    result.posts.push_back(std::move(p));
    truth.event_intensity.push_back(ev.intensity);
  }
  compute_intervals(result.posts);
  return result;
}

void write_simulation(const SimResult& result, const SimConfig& cfg, std::uint64_t seed,
                      const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_jsonl(dir / "dataset.jsonl", result.posts);
  {
    std::ofstream out(dir / "edges.txt", std::ios::binary);
    for (auto [src, dst] : result.edges) out << user_name(src) << ' ' << user_name(dst) << '\n';
  }
  nlohmann::json truth;
  truth["seed"] = seed;
  truth["n_users"] = cfg.n_users;
  truth["time_unit"] = cfg.time_unit;
  truth["horizon"] = cfg.horizon;
  truth["spectral_radius"] = result.truth.spectral_radius;
  truth["base_rates"] = result.truth.base_rates;
  truth["topic_words"] = result.truth.topic_words;
  truth["topic_stance"] = result.truth.topic_stance;
  truth["audit"] = {{"candidates", result.truth.candidates},
                    {"accepted", result.truth.accepted},
                    {"bound_violations", result.truth.bound_violations},
                    {"influenced", result.truth.influenced}};
  nlohmann::json events = nlohmann::json::array();
  for (std::size_t i = 0; i < result.posts.size(); ++i) {
    events.push_back({{"user_id", result.posts[i].user_id},
                      {"timestamp", result.posts[i].timestamp},
                      {"topic", result.posts[i].topic},
                      {"intensity", result.truth.event_intensity[i]}});
  }
  truth["events"] = std::move(events);
  std::ofstream out(dir / "truth.json", std::ios::binary);
  out << truth.dump(1) << '\n';
}

}  // namespace ntom
