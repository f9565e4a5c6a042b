// Acceptance checks: one PASS/FAIL line per criterion; exit status 1 when any
// criterion fails.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "json.hpp"
#include "ntom/attention.hpp"
#include "ntom/point_process.hpp"
#include "ntom/run.hpp"
#include "ntom/simulator.hpp"
#include "ntom/training.hpp"

namespace fs = std::filesystem;
using namespace ntom;
using Clock = std::chrono::steady_clock;

namespace {

// Tolerances and sizes.
constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 10.0;
constexpr double kMassTol = 1e-6;
constexpr double kLambdaTol = 1e-8;
constexpr double kExpTol = 1e-6;
constexpr std::size_t kMonteCarloSamples = 10'000'000;
constexpr double kMonteCarloSe = 3.0;
constexpr double kAttentionSumTol = 1e-9;
constexpr double kHandTol = 1e-4;
constexpr int kPoissonSeeds = 200;
constexpr double kPoissonSigmas = 3.0;
constexpr double kBranchingTol = 0.05;
constexpr double kAccuracyGain = 0.10;
constexpr double kMseGain = 0.10;
constexpr double kEndToEndSeconds = 15 * 60;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const fs::path kWork = fs::path(NTOM_BINARY_DIR) / "acceptance";
const fs::path kConfigs = fs::path(NTOM_SOURCE_DIR) / "configs";

int cli(const std::string& args, const std::string& log) {
  const std::string cmd = "'" NTOM_CLI_PATH "' " + args + " > '" + (kWork / (log + ".out")).string() +
                          "' 2> '" + (kWork / (log + ".err")).string() + "'";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// 1. End-to-end gradient of the total loss on a two-step toy sequence.
Outcome gradient_integrity() {
  const auto t0 = Clock::now();
  auto post = [](std::string user, double t, std::string text, int stance) {
    Post p;
    p.user_id = std::move(user);
    p.timestamp = t;
    p.text = std::move(text);
    p.stance = stance;
    if (p.user_id == "a") p.neighbors = {"b"};
    return p;
  };
  std::vector<Post> posts{post("a", 1.0, "vote leave now", 0), post("a", 2.0, "stay calm", 1),
                          post("a", 3.2, "leave now please", 2), post("b", 0.5, "vote stay", 1),
                          post("b", 1.5, "calm now", 0)};
  compute_intervals(posts);
  const Vocabulary vocab = build_vocab(posts);
  assign_tokens(posts, vocab, 30);
  std::vector<EventSequence> seqs{{"a", {0, 1, 2}, {}}};
  attach_neighbor_queues(seqs, posts, 2);

  double worst = 0.0;
  for (auto mode : {tpp::TimeLossMode::kGaussianNll, tpp::TimeLossMode::kTppNll}) {
    ModelConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.user_rows = 3;
    cfg.embed_dim = 4;
    cfg.lstm_hidden = 3;
    cfg.context_hidden = 4;
    cfg.gru_hidden = 5;
    cfg.user_dim = 2;
    cfg.topics = 4;
    cfg.vae_hidden = 6;
    cfg.queue_len = 2;
    cfg.time_loss = mode;
    NtomModel model(cfg, vocab, {"a", "b"}, 7);
    const std::vector<ad::Param*> params = model.trainable_params();
    const auto r = ad::grad_check([&](ad::Graph& g) {
      std::mt19937_64 noise(3);
      ForwardOptions opts;
      opts.noise = &noise;
      return ForwardPass(model, g, posts).run(seqs[0], opts).total;
    }, params, 1e-6);
    worst = std::max(worst, r.max_rel_error);
  }
  const double secs = seconds_since(t0);
  const bool queues_used = !seqs[0].queues[1].empty();
  return {worst < kGradTol && secs < kGradSeconds && queues_used,
          fmt("max relative error %.3g (< %g), %.2f s (< %g s)", worst, kGradTol, secs, kGradSeconds)};
}

// 2. Density mass on [0, T_max] plus the analytic tail.
Outcome density_normalization() {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> ua(-4, 4), uw(0, 3);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double a = ua(rng), w = uw(rng);
    const double t_max = tpp::quadrature_limit(a, w, 1e3);
    const double mass = tpp::density_mass(a, w) + tpp::survival(a, w, t_max);
    worst = std::max(worst, std::abs(mass - 1.0));
  }
  return {worst < kMassTol, fmt("100 pairs, max |mass - 1| = %.3g (< %g)", worst, kMassTol)};
}

// 3. Closed-form cumulative intensity against adaptive quadrature.
Outcome cumulative_intensity() {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> ua(-3, 3), uw(-2, 2), ut(0, 5), utiny(-1e-6, 1e-6);
  double worst = 0.0;
  std::size_t series = 0;
  for (int i = 0; i < 1000; ++i) {
    const double a = ua(rng), tau = ut(rng);
    const double w = i % 4 == 0 ? utiny(rng) : uw(rng);
    series += std::abs(w) <= tpp::kSeriesThreshold;
    const double ref = test::integrate([&](double t) { return std::exp(a + w * t); }, 0.0, tau);
    const double got = tpp::cumulative_intensity(a, w, tau);
    worst = std::max(worst, std::abs(got - ref) / std::max(std::abs(ref), 1e-300));
  }
  return {worst < kLambdaTol && series > 0,
          fmt("1000 points (%zu on the series branch), max relative error %.3g (< %g)", series, worst,
              kLambdaTol)};
}

// 4. Exponential mean at zero slope.
Outcome exponential_degeneracy() {
  double worst = 0.0;
  for (double a : {-1.0, 0.0, 1.0}) worst = std::max(worst, std::abs(tpp::expected_time(a, 0).value - std::exp(-a)));
  return {worst < kExpTol, fmt("max |E - e^-a| = %.3g (< %g)", worst, kExpTol)};
}

// 5. Quadrature expectation against inverse-transform Monte Carlo.
Outcome expectation_oracle() {
  std::mt19937_64 rng(23);
  std::exponential_distribution<double> ex(1.0);
  double s = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < kMonteCarloSamples; ++i) {
    const double t = test::sample_time(0.0, 1.0, ex(rng));
    s += t;
    s2 += t * t;
  }
  const double n = static_cast<double>(kMonteCarloSamples);
  const double mean = s / n, se = std::sqrt((s2 / n - mean * mean) / n);
  const double got = tpp::expected_time(0.0, 1.0).value;
  const double z = std::abs(got - mean) / se;
  return {z < kMonteCarloSe, fmt("quadrature %.6f, Monte Carlo %.6f +- %.2g, %.2f SE (< %g)", got, mean, se, z,
                                 kMonteCarloSe)};
}

// 6. Attention weights form a distribution; hand-computed example.
Outcome attention_contract() {
  std::mt19937_64 rng(24);
  double worst_sum = 0.0;
  bool nonneg = true;
  for (std::size_t n = 1; n <= 6; ++n) {
    ContextAttention att(4, 3, 9, rng);
    ad::Graph g;
    std::vector<NeighborState> ns;
    for (std::size_t l = 0; l < n; ++l)
      ns.push_back({g.constant(test::random_matrix(1, 4, rng)), g.constant(test::random_matrix(1, 3, rng))});
    const AttentionOutput out =
        att.attend(g, g.constant(test::random_matrix(1, 6, rng)), g.constant(test::random_matrix(1, 3, rng)), ns);
    double total = 0.0;
    for (double w : out.weights.values().values()) {
      nonneg = nonneg && w >= 0.0;
      total += w;
    }
    worst_sum = std::max(worst_sum, std::abs(total - 1.0));
  }

  ContextAttention hand(2, 1, 3, rng);
  hand.w_hidden.value = ad::Matrix(2, 3, {1, 0, 0, 0, 1, 0});
  hand.w_topic.value = ad::Matrix(1, 3);
  ad::Graph g;
  const NeighborState ns[] = {{g.constant(ad::Matrix::row({1, 0})), g.zeros(1, 1)},
                              {g.constant(ad::Matrix::row({-1, 0})), g.zeros(1, 1)}};
  const AttentionOutput out = hand.attend(g, g.constant(ad::Matrix::row({1, 0})), g.zeros(1, 1), ns);
  const double w0 = out.weights.values()[0], w1 = out.weights.values()[1];
  const bool hand_ok = std::abs(w0 - 0.8210) < kHandTol && std::abs(w1 - 0.1790) < kHandTol;
  return {nonneg && worst_sum < kAttentionSumTol && hand_ok,
          fmt("max |sum - 1| = %.3g, hand example (%.4f, %.4f)", worst_sum, w0, w1)};
}

// 7. Poisson counts without excitation; long-run rate under self-excitation.
Outcome simulator_calibration() {
  SimConfig cfg;
  cfg.n_users = 5;
  cfg.follow_degree = 2;
  cfg.base_rate_min = cfg.base_rate_max = 0.2;
  cfg.horizon = 168.0;
  cfg.words_per_post = 4;
  const double mu_t = cfg.n_users * 0.2 * cfg.horizon;
  double sum = 0.0;
  for (int seed = 0; seed < kPoissonSeeds; ++seed) sum += static_cast<double>(simulate_hawkes(cfg, seed).posts.size());
  const double mean = sum / kPoissonSeeds;
  const double sigmas = std::abs(mean - mu_t) / std::sqrt(mu_t / kPoissonSeeds);

  cfg.alpha_self = 0.5;
  cfg.horizon = 5000.0;
  double events = 0.0;
  const int runs = 10;
  for (int seed = 0; seed < runs; ++seed) events += static_cast<double>(simulate_hawkes(cfg, 100 + seed).posts.size());
  const double rate = events / (runs * cfg.n_users * cfg.horizon);
  const double expected = 0.2 / (1.0 - 0.5);
  const double rel = std::abs(rate - expected) / expected;
  return {sigmas < kPoissonSigmas && rel < kBranchingTol,
          fmt("Poisson mean %.2f vs %.1f (%.2f sigma), branching rate %.4f vs %.4f (%.2f%%)", mean, mu_t, sigmas,
              rate, expected, 100 * rel)};
}

struct EndToEnd {
  bool ran = false;
  nlohmann::json full, no_context;
  std::string full_hash;
  double seconds = 0.0;
};

std::string run_args(const std::string& variant, const std::string& tag) {
  return "--config '" + (kConfigs / "run_acceptance.cfg").string() + "' --set dataset='" +
         (kWork / "sim" / "dataset.jsonl").string() + "' --variant " + variant + " --checkpoint '" +
         (kWork / (tag + ".ckpt")).string() + "'";
}

// Trains and evaluates one variant; returns the metrics report.
std::optional<nlohmann::json> train_and_evaluate(const std::string& variant, const std::string& tag) {
  if (cli("train " + run_args(variant, tag) + " --set log=", "train_" + tag) != 0) return std::nullopt;
  const fs::path metrics = kWork / (tag + "_metrics.json");
  if (cli("evaluate " + run_args(variant, tag) + " --out '" + metrics.string() + "'", "evaluate_" + tag) != 0)
    return std::nullopt;
  return nlohmann::json::parse(slurp(metrics));
}

// 8. Synthetic recovery against baselines and the no_context ablation.
Outcome synthetic_recovery(EndToEnd& e2e) {
  const auto t0 = Clock::now();
  const std::string sim = "simulate --config '" + (kConfigs / "sim_acceptance.cfg").string() + "' --out '" +
                          (kWork / "sim").string() + "'";
  if (cli(sim, "simulate") != 0) return {false, "simulate failed; see " + (kWork / "simulate.err").string()};
  const auto full = train_and_evaluate("full", "full");
  if (!full) return {false, "full variant failed; see " + kWork.string()};
  const auto noctx = train_and_evaluate("no_context", "no_context");
  if (!noctx) return {false, "no_context variant failed; see " + kWork.string()};
  e2e.seconds = seconds_since(t0);
  e2e.ran = true;
  e2e.full = *full;
  e2e.no_context = *noctx;
  e2e.full_hash = file_hash(kWork / "full.ckpt");

  const double acc = (*full)["accuracy"], mse = (*full)["mse"];
  const double majority = (*full)["baselines"]["majority_accuracy"];
  const double constant = (*full)["baselines"]["constant_interval_mse"];
  const double acc_nc = (*noctx)["accuracy"];
  const bool a = acc - majority >= kAccuracyGain;
  const bool b = mse <= (1.0 - kMseGain) * constant;
  const bool c = acc > acc_nc;
  const bool t = e2e.seconds < kEndToEndSeconds;
  return {a && b && c && t,
          fmt("accuracy %.3f vs majority %.3f (%+.1f pts), MSE %.3f vs constant %.3f (%+.1f%%), "
              "no_context accuracy %.3f, %.0f s",
              acc, majority, 100 * (acc - majority), mse, constant, 100 * (mse / constant - 1.0), acc_nc,
              e2e.seconds)};
}

// 9. Attention on neighbours sharing the user's planted topic.
Outcome topical_attention(const EndToEnd& e2e) {
  if (!e2e.ran) return {false, "needs the trained model from criterion 8"};
  KeyValues kv = KeyValues::load(kConfigs / "run_acceptance.cfg");
  kv.set("dataset", (kWork / "sim" / "dataset.jsonl").string());
  RunConfig cfg = run_config_from(kv);
  NtomModel model = load_checkpoint(kWork / "full.ckpt");
  cfg.prepare.max_len = model.config().max_len;
  cfg.prepare.queue_len = model.config().queue_len;
  const PreparedData data = prepare_from(cfg, &model.vocab());
  std::vector<EventSequence> all = data.train;
  all.insert(all.end(), data.validation.begin(), data.validation.end());
  all.insert(all.end(), data.test.begin(), data.test.end());
  const auto records = trace_attention(model, data.posts, all);

  // The exported trace holds the same rows.
  const fs::path tsv = kWork / "attention.tsv";
  if (cli("export attention " + run_args("full", "full") + " --out '" + tsv.string() + "'", "export") != 0)
    return {false, "attention export failed"};
  std::size_t rows = 0, exported = 0;
  for (const auto& r : records) rows += r.weights.size();
  std::istringstream in(slurp(tsv));
  for (std::string l; std::getline(in, l);) ++exported;
  if (exported != rows + 1) return {false, fmt("export has %zu rows, trace %zu", exported - 1, rows)};

  // Full queues where some, but not all, neighbours share the user's topic.
  const std::size_t L = model.config().queue_len;
  double matched_weight = 0.0;
  std::size_t matched = 0, steps = 0;
  for (const auto& r : records) {
    if (r.weights.size() != L) continue;
    const int topic = data.posts[r.user_post].topic;
    std::size_t same = 0;
    for (std::size_t q : r.neighbor_posts) same += data.posts[q].topic == topic;
    if (same == 0 || same == L) continue;
    ++steps;
    for (std::size_t s = 0; s < L; ++s) {
      if (data.posts[r.neighbor_posts[s]].topic != topic) continue;
      matched_weight += r.weights[s];
      ++matched;
    }
  }
  if (matched == 0) return {false, "no mixed-topic steps in the trace"};
  const double mean = matched_weight / static_cast<double>(matched);
  return {mean > 1.0 / static_cast<double>(L),
          fmt("mean weight on same-topic neighbours %.4f (> 1/L = %.4f) over %zu steps", mean,
              1.0 / static_cast<double>(L), steps)};
}

// 10. A second identical run reproduces metrics and checkpoint bytes.
Outcome reproducibility(const EndToEnd& e2e) {
  if (!e2e.ran) return {false, "needs the first run from criterion 8"};
  const auto again = train_and_evaluate("full", "full_repeat");
  if (!again) return {false, "repeat run failed"};
  const std::string hash = file_hash(kWork / "full_repeat.ckpt");
  const bool same_metrics = again->dump() == e2e.full.dump();
  const bool same_hash = hash == e2e.full_hash;
  return {same_metrics && same_hash, fmt("metrics %s, checkpoint hashes %s / %s", same_metrics ? "identical" : "differ",
                                         e2e.full_hash.c_str(), hash.c_str())};
}

}  // namespace

int main() {
  fs::create_directories(kWork);
  EndToEnd e2e;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient integrity", gradient_integrity},
      {"density normalization", density_normalization},
      {"cumulative intensity", cumulative_intensity},
      {"exponential degeneracy", exponential_degeneracy},
      {"expectation oracle", expectation_oracle},
      {"attention contract", attention_contract},
      {"simulator calibration", simulator_calibration},
      {"synthetic recovery", [&] { return synthetic_recovery(e2e); }},
      {"topical attention", [&] { return topical_attention(e2e); }},
      {"reproducibility", [&] { return reproducibility(e2e); }},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << "criterion " << i + 1 << " " << criteria[i].first << ": " << (o.pass ? "PASS" : "FAIL") << " ("
              << o.detail << ")" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
