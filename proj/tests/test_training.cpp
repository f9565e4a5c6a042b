#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "ntom/point_process.hpp"
#include "ntom/simulator.hpp"
#include "ntom/training.hpp"

using namespace ntom;
using ad::Matrix;
using ad::Param;
namespace fs = std::filesystem;

namespace {

PreparedData small_data(std::uint64_t seed = 3) {
  SimConfig sim;
  sim.n_users = 12;
  sim.follow_degree = 2;
  sim.base_rate_min = sim.base_rate_max = 0.5;
  sim.alpha_neighbor = 0.2;
  sim.horizon = 30.0;
  sim.n_topics = 3;
  sim.words_per_topic = 5;
  sim.background_words = 10;
  sim.stance_words = 3;
  sim.words_per_post = 6;
  PrepareOptions opts;
  opts.vocab_size = 40;
  return prepare_dataset(simulate_hawkes(sim, seed).posts, opts, seed);
}

ModelConfig small_config(const PreparedData& d, Variant v = Variant::kFull) {
  ModelConfig cfg;
  cfg.vocab_size = d.vocab.size();
  cfg.user_rows = d.users.size() + 1;
  cfg.embed_dim = 4;
  cfg.lstm_hidden = 3;
  cfg.context_hidden = 3;
  cfg.gru_hidden = 4;
  cfg.user_dim = 2;
  cfg.topics = 3;
  cfg.vae_hidden = 5;
  return ablate(cfg, v);
}

NtomModel small_model(const PreparedData& d, Variant v = Variant::kFull, std::uint64_t seed = 1) {
  return NtomModel(small_config(d, v), d.vocab, d.users, seed);
}

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("ntom_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("adam updates") {
  Param p("p", Matrix(1, 3, 1.0));
  Param* params[] = {&p};

  SUBCASE("zero gradient leaves values unchanged") {
    AdamState s = make_adam(params, 0.1);
    p.grad.fill(0.0);
    CHECK(adam_step(params, s));
    CHECK(p.value == Matrix(1, 3, 1.0));
  }
  SUBCASE("first step moves by lr against the gradient sign") {
    AdamState s = make_adam(params, 0.1);
    p.grad = Matrix(1, 3, 1.0);
    CHECK(adam_step(params, s));
    for (double v : p.value.values()) CHECK(v == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(s.step == 1);
  }
  SUBCASE("learning rate decays per epoch") {
    AdamState s = make_adam(params, 0.1, 0.9);
    s.end_epoch();
    CHECK(s.lr == doctest::Approx(0.09));
  }
  SUBCASE("non-finite gradient is skipped") {
    AdamState s = make_adam(params, 0.1);
    p.grad = Matrix(1, 3, 1.0);
    p.grad(0, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_FALSE(adam_step(params, s));
    CHECK(p.value == Matrix(1, 3, 1.0));
    CHECK(s.step == 0);
  }
}

TEST_CASE("gradient clipping preserves direction") {
  Param a("a", Matrix(1, 2)), b("b", Matrix(1, 1));
  a.grad = Matrix::row({3.0, 0.0});
  b.grad = Matrix::row({4.0});
  Param* params[] = {&a, &b};
  CHECK(clip_grad_norm(params, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad(0, 0) == doctest::Approx(0.6));
  CHECK(b.grad(0, 0) == doctest::Approx(0.8));
  CHECK(clip_grad_norm(params, 10.0) == doctest::Approx(1.0));
  CHECK(a.grad(0, 0) == doctest::Approx(0.6));
}

TEST_CASE("full model gradient matches finite differences") {
  const PreparedData d = small_data();
  REQUIRE_FALSE(d.train.empty());
  const EventSequence* seq = &d.train.front();
  for (const auto& s : d.train)
    if (s.posts.size() >= 4 && !s.queues[1].empty()) { seq = &s; break; }
  for (auto mode : {tpp::TimeLossMode::kGaussianNll, tpp::TimeLossMode::kTppNll}) {
    ModelConfig cfg = small_config(d);
    cfg.time_loss = mode;
    NtomModel model(cfg, d.vocab, d.users, 1);
    const std::vector<Param*> params = model.trainable_params();
    const auto r = ad::grad_check([&](ad::Graph& g) {
      ForwardPass fp(model, g, d.posts);
      return fp.run(*seq).total;
    }, params, 1e-6);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("training smoke run") {
  const PreparedData d = small_data();
  TrainOptions opts;
  opts.epochs = 2;
  opts.lr = 5e-3;
  const fs::path dir = temp_dir("train");
  opts.log_path = dir / "log.jsonl";
  NtomModel a = small_model(d);
  const TrainResult ra = train(a, d, opts);
  REQUIRE(ra.epochs.size() == 2);
  CHECK_FALSE(ra.diverged);
  for (const auto& e : ra.epochs) CHECK(std::isfinite(e.train.total));
  CHECK(ra.epochs[1].lr == doctest::Approx(opts.lr * 0.9));
  std::ifstream log(opts.log_path);
  std::size_t lines = 0;
  for (std::string l; std::getline(log, l);) ++lines;
  CHECK(lines == 2);

  NtomModel b = small_model(d);
  opts.log_path.clear();
  const TrainResult rb = train(b, d, opts);
  for (std::size_t i = 0; i < 2; ++i) CHECK(rb.epochs[i].train.total == ra.epochs[i].train.total);
  const auto pa = a.params(), pb = b.params();
  for (std::size_t k = 0; k < pa.size(); ++k) CHECK(pa[k]->value == pb[k]->value);
  fs::remove_all(dir);
}

TEST_CASE("evaluation metrics") {
  const PreparedData d = small_data();
  REQUIRE_FALSE(d.test.empty());

  SUBCASE("constant predictor against independent tallies") {
    double mean = 0.0;
    for (const auto& s : d.test) mean += d.posts[s.posts.back()].interval;
    mean /= static_cast<double>(d.test.size());
    double var = 0.0;
    std::size_t ones = 0;
    for (const auto& s : d.test) {
      const Post& t = d.posts[s.posts.back()];
      var += (t.interval - mean) * (t.interval - mean);
      ones += t.stance == 1;
    }
    var /= static_cast<double>(d.test.size());
    const Metrics m = evaluate_constant(1, mean, d.posts, d.test);
    CHECK(m.n == d.test.size());
    CHECK(m.mse == doctest::Approx(var).epsilon(1e-12));
    CHECK(m.accuracy == doctest::Approx(static_cast<double>(ones) / static_cast<double>(m.n)));
    std::size_t total = 0;
    for (const auto& row : m.confusion)
      for (std::size_t c : row) total += c;
    CHECK(total == m.n);
    CHECK(m.confusion[0][1] + m.confusion[1][1] + m.confusion[2][1] == m.n);
  }
  SUBCASE("perfect stance labels") {
    std::vector<Post> posts = d.posts;
    for (Post& p : posts) p.stance = 2;
    const Metrics m = evaluate_constant(2, 0.0, posts, d.test);
    CHECK(m.accuracy == 1.0);
  }
  SUBCASE("random labels score near one third") {
    std::vector<Post> posts = d.posts;
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<int> pick(0, 2);
    for (Post& p : posts) p.stance = pick(rng);
    const Metrics m = evaluate_constant(0, 0.0, posts, d.test);
    const double se = std::sqrt(2.0 / 9.0 / static_cast<double>(m.n));
    CHECK(std::abs(m.accuracy - 1.0 / 3.0) < 4.0 * se);
  }
  SUBCASE("model evaluation") {
    NtomModel model = small_model(d);
    const Metrics m = evaluate(model, d.posts, d.test);
    CHECK(m.n == d.test.size());
    CHECK(std::isfinite(m.mse));
    CHECK((m.accuracy >= 0.0 && m.accuracy <= 1.0));
    CHECK_THROWS_AS(evaluate(model, d.posts, {}), std::invalid_argument);
  }
  SUBCASE("baselines") {
    const Baselines b = fit_baselines(d);
    CHECK(b.mean_interval > 0.0);
    CHECK(b.metrics.n == d.test.size());
  }
  CHECK(argmax_stance(std::vector<double>{0.2, 0.4, 0.4}) == 1);
}

TEST_CASE("checkpoints") {
  const PreparedData d = small_data();
  const fs::path dir = temp_dir("ckpt");
  NtomModel model = small_model(d, Variant::kFull, 5);
  save_checkpoint(model, dir / "m.ckpt");

  SUBCASE("round trip is exact") {
    NtomModel back = load_checkpoint(dir / "m.ckpt");
    const auto pa = model.params(), pb = back.params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t k = 0; k < pa.size(); ++k) CHECK(pa[k]->value == pb[k]->value);
    CHECK(back.users() == model.users());
    CHECK(back.config().hash() == model.config().hash());
    save_checkpoint(back, dir / "m2.ckpt");
    CHECK(file_hash(dir / "m.ckpt") == file_hash(dir / "m2.ckpt"));
  }
  SUBCASE("truncated file") {
    std::ifstream in(dir / "m.ckpt", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    std::ofstream(dir / "t.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "t.ckpt"), doctest::Contains("truncated"), CheckpointError);
  }
  SUBCASE("edited fields") {
    std::ifstream in(dir / "m.ckpt", std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(in)), {});
    auto edit = [&](const std::string& from, const std::string& to) {
      std::string s = bytes;
      const auto pos = s.find(from);
      REQUIRE(pos != std::string::npos);
      s.replace(pos, from.size(), to);
      std::ofstream(dir / "e.ckpt", std::ios::binary) << s;
      return dir / "e.ckpt";
    };
    CHECK_THROWS_WITH_AS(load_checkpoint(edit("\"format_version\":1", "\"format_version\":2")),
                         doctest::Contains("version"), CheckpointError);
    CHECK_THROWS_WITH_AS(load_checkpoint(edit("\"topics\":3", "\"topics\":4")),
                         doctest::Contains("hash"), CheckpointError);
  }
  SUBCASE("expected config mismatch names the field") {
    ModelConfig other = model.config();
    other.topics = 4;
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "m.ckpt", &other), doctest::Contains("topics"), CheckpointError);
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt"), CheckpointError);
  fs::remove_all(dir);
}

TEST_CASE("ablation switches") {
  const PreparedData d = small_data();
  const EventSequence& seq = d.train.front();

  SUBCASE("no_context matches full when queues are empty") {
    EventSequence lonely = seq;
    for (auto& q : lonely.queues) q.clear();
    NtomModel full = small_model(d, Variant::kFull, 2);
    NtomModel noctx = small_model(d, Variant::kNoContext, 2);
    ad::Graph g1, g2;
    const double a = ForwardPass(full, g1, d.posts).run(lonely).total.item();
    const double b = ForwardPass(noctx, g2, d.posts).run(seq).total.item();
    CHECK(a == doctest::Approx(b).epsilon(1e-14));
  }
  SUBCASE("no_vae drops the topic loss") {
    CHECK(ablate(ModelConfig{}, Variant::kNoVae).weights.eta == 0.0);
    NtomModel m = small_model(d, Variant::kNoVae);
    ad::Graph g;
    const SequenceOutput out = ForwardPass(m, g, d.posts).run(seq);
    CHECK(out.l_x.item() == 0.0);
    CHECK(std::isfinite(out.total.item()));
  }
  SUBCASE("gru_only never evaluates the intensity") {
    NtomModel m = small_model(d, Variant::kGruOnly);
    tpp::counters().reset();
    ad::Graph g;
    ForwardPass(m, g, d.posts).run(seq);
    CHECK(tpp::counters().intensity_evaluations == 0);
    CHECK(tpp::counters().expectation_evaluations == 0);
  }
  CHECK(parse_variant("no_context") == Variant::kNoContext);
  CHECK_THROWS_AS(parse_variant("tiny"), std::invalid_argument);
}
