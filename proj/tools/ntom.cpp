// ntom: simulate, train, evaluate, predict and export.
//
// Exit codes: 0 success, 1 internal error, 2 input error, 3 empty result.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ntom/attention.hpp"
#include "ntom/run.hpp"
#include "ntom/simulator.hpp"

namespace fs = std::filesystem;
using namespace ntom;

namespace {

struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string variant;
  std::string out;
  std::string checkpoint;
  long long seed = -1;
};

KeyValues load_kv(const Common& c) {
  KeyValues kv;
  if (!c.config.empty()) {
    if (!fs::exists(c.config)) throw InputError("config file not found: " + c.config);
    kv = KeyValues::load(c.config);
  } else {
    kv.set_base_dir(fs::current_path());
  }
  for (const std::string& s : c.sets) kv.set_override(s);
  if (!c.variant.empty()) kv.set("variant", c.variant);
  if (c.seed >= 0) kv.set("seed", std::to_string(c.seed));
  return kv;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

int cmd_simulate(const Common& c) {
  const KeyValues kv = load_kv(c);
  const SimConfig cfg = sim_config_from(kv);
  const auto seed = static_cast<std::uint64_t>(kv.get_int("seed", 0));
  SimResult result;
  try {
    result = simulate_hawkes(cfg, seed);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("alpha_neighbor", e.what());
  }
  const fs::path dir = c.out.empty() ? fs::path("sim") : fs::path(c.out);
  write_simulation(result, cfg, seed, dir);
  if (result.posts.empty()) std::cerr << "warning: simulation produced no events\n";
  std::cout << "wrote " << result.posts.size() << " posts from " << cfg.n_users << " users to "
            << dir.string() << " (branching radius " << result.truth.spectral_radius << ")\n";
  return 0;
}

NtomModel load_model(const Common& c, const RunConfig& cfg) {
  const fs::path path = c.checkpoint.empty() ? cfg.checkpoint : fs::path(c.checkpoint);
  if (!fs::exists(path)) throw InputError("checkpoint not found: " + path.string());
  return load_checkpoint(path);
}

RunConfig run_config(const Common& c) {
  const KeyValues kv = load_kv(c);
  return run_config_from(kv);
}

int cmd_train(const Common& c) {
  RunConfig cfg = run_config(c);
  if (!c.checkpoint.empty()) cfg.checkpoint = c.checkpoint;
  PreparedData data = prepare_from(cfg);
  if (data.train.empty()) throw EmptyResultError("no training sequences after filtering");
  std::cerr << "users " << data.users.size() << ", train " << data.train.size()
            << ", validation " << data.validation.size() << ", test " << data.test.size()
            << ", vocab " << data.vocab.size() << "\n";
  NtomModel model = build_model(cfg, data);
  cfg.train.progress = &std::cerr;
  const TrainResult result = train(model, data, cfg.train);
  if (cfg.checkpoint.has_parent_path()) fs::create_directories(cfg.checkpoint.parent_path());
  save_checkpoint(model, cfg.checkpoint);
  LossBreakdown v;
  if (result.best_epoch > 0) v = result.epochs[result.best_epoch - 1].validation;
  nlohmann::json summary = {{"best_epoch", result.best_epoch},
                            {"epochs_run", result.epochs.size()},
                            {"diverged", result.diverged},
                            {"stopped_early", result.stopped_early},
                            {"validation", {{"l_x", v.l_x}, {"l_time", v.l_time},
                                            {"l_stan", v.l_stan}, {"total", v.total}}},
                            {"checkpoint", cfg.checkpoint.string()},
                            {"checkpoint_hash", file_hash(cfg.checkpoint)}};
  std::cout << summary.dump(2) << "\n";
  if (!c.out.empty()) write_text(c.out, summary.dump(2) + "\n");
  return result.diverged ? 1 : 0;
}

int cmd_evaluate(const Common& c) {
  const RunConfig cfg = run_config(c);
  NtomModel model = load_model(c, cfg);
  const std::string text = evaluation_report(cfg, model);
  std::cout << text << "\n";
  if (!c.out.empty()) write_text(c.out, text + "\n");
  return 0;
}

int cmd_predict(const Common& c) {
  const RunConfig cfg = run_config(c);
  NtomModel model = load_model(c, cfg);
  const RunConfig& pcfg = cfg;
  if (pcfg.dataset.empty()) throw ConfigError("dataset", "no dataset configured");
  if (!fs::exists(pcfg.dataset)) throw ConfigError("dataset", "file not found: " + pcfg.dataset.string());
  LoadResult loaded = load_jsonl(pcfg.dataset);
  compute_intervals(loaded.posts);
  assign_tokens(loaded.posts, model.vocab(), pcfg.prepare.max_tweet_len);
  std::vector<EventSequence> histories;
  for (const UserPosts& u : group_by_user(loaded.posts)) {
    EventSequence seq;
    seq.user_id = u.user_id;
    const std::size_t n = u.posts.size();
    const std::size_t start = n > model.config().max_len ? n - model.config().max_len : 0;
    seq.posts.assign(u.posts.begin() + static_cast<std::ptrdiff_t>(start), u.posts.end());
    histories.push_back(std::move(seq));
  }
  attach_neighbor_queues(histories, loaded.posts, model.config().queue_len);
  if (histories.empty()) throw EmptyResultError("dataset has no posts");
  std::ostringstream out;
  for (const EventSequence& h : histories) {
    const NextPrediction p = predict_next(model, loaded.posts, h);
    const double last_ts = loaded.posts[h.posts.back()].timestamp;
    nlohmann::json j = {{"user_id", p.user_id},
                        {"interval", p.tau_hat},
                        {"timestamp", last_ts + p.tau_hat},
                        {"stance", argmax_stance(p.stance_probs)},
                        {"stance_probs", p.stance_probs},
                        {"defective", p.defective}};
    out << j.dump() << "\n";
  }
  if (c.out.empty()) {
    std::cout << out.str();
  } else {
    write_text(c.out, out.str());
  }
  return 0;
}

int cmd_export(const Common& c, const std::string& what) {
  const RunConfig cfg = run_config(c);
  NtomModel model = load_model(c, cfg);
  std::string text;
  if (what == "topics") {
    text = topic_word_tsv(model.topic, model.vocab(), 10);
  } else {
    RunConfig ecfg = cfg;
    ecfg.prepare.max_len = model.config().max_len;
    ecfg.prepare.queue_len = model.config().queue_len;
    PreparedData data = prepare_from(ecfg, &model.vocab());
    std::vector<EventSequence> all = data.train;
    all.insert(all.end(), data.validation.begin(), data.validation.end());
    all.insert(all.end(), data.test.begin(), data.test.end());
    const auto records = trace_attention(model, data.posts, all);
    if (records.empty()) throw EmptyResultError("no step has a non-empty neighbour queue");
    text = attention_trace_tsv(records);
  }
  if (c.out.empty()) {
    std::cout << text;
  } else {
    write_text(c.out, text);
  }
  return 0;
}

void add_common(CLI::App* cmd, Common& c, bool model_flags) {
  cmd->add_option("--config", c.config, "Config file (flat key = value)");
  cmd->add_option("--set", c.sets, "Override a config key (key=value, repeatable)");
  cmd->add_option("--seed", c.seed, "Seed (overrides the config)");
  cmd->add_option("--out", c.out, "Output path");
  if (model_flags) {
    cmd->add_option("--variant", c.variant, "full | no_vae | no_context | gru_only");
    cmd->add_option("--checkpoint", c.checkpoint, "Checkpoint path (overrides the config)");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural temporal opinion model: simulate, train, evaluate, predict, export"};
  app.require_subcommand(1);
  Common common;
  std::string what;

  auto* sim = app.add_subcommand("simulate", "Generate a synthetic dataset");
  sim->footer(sim_config_help());
  add_common(sim, common, false);
  auto* tr = app.add_subcommand("train", "Train a model and write a checkpoint");
  tr->footer(run_config_help());
  add_common(tr, common, true);
  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on the held-out posts");
  ev->footer(run_config_help());
  add_common(ev, common, true);
  auto* pr = app.add_subcommand("predict", "Predict each user's next interval and stance");
  pr->footer(run_config_help());
  add_common(pr, common, true);
  auto* ex = app.add_subcommand("export", "Export the attention trace or topic-word table");
  ex->footer(run_config_help());
  ex->add_option("what", what, "attention | topics")
      ->required()
      ->check(CLI::IsMember({"attention", "topics"}));
  add_common(ex, common, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*sim) return cmd_simulate(common);
    if (*tr) return cmd_train(common);
    if (*ev) return cmd_evaluate(common);
    if (*pr) return cmd_predict(common);
    if (*ex) return cmd_export(common, what);
  } catch (const EmptyResultError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
