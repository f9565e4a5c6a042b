#include "ntom/run.hpp"

#include <sstream>

#include "json.hpp"

namespace ntom {

namespace {

template <class F>
auto keyed(const std::string& key, F&& parse) {
  try {
    return parse();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(key, e.what());
  }
}

void require_positive(std::size_t v, const std::string& key) {
  if (v == 0) throw ConfigError(key, "must be >= 1");
}

void require_nonneg(double v, const std::string& key) {
  if (!(v >= 0)) throw ConfigError(key, "must be >= 0");
}

}  // namespace

RunConfig run_config_from(const KeyValues& kv) {
  RunConfig c;
  c.dataset = kv.get_path("dataset");
  c.checkpoint = kv.get_path("checkpoint", c.checkpoint);
  c.log = kv.get_path("log");
  c.embeddings = kv.get_path("embeddings");
  c.embeddings_trainable = kv.get_bool("embeddings_trainable", c.embeddings_trainable);
  c.time_unit = kv.get_string("time_unit", c.time_unit);
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", 0));

  PrepareOptions& p = c.prepare;
  p.min_posts = kv.get_size("min_posts", p.min_posts);
  p.max_len = kv.get_size("max_len", p.max_len);
  p.stride = kv.get_size("stride", p.stride);
  p.train_frac = kv.get_double("train_frac", p.train_frac);
  p.val_frac = kv.get_double("val_frac", p.val_frac);
  p.queue_len = kv.get_size("queue_len", p.queue_len);
  p.vocab_size = kv.get_size("vocab_size", p.vocab_size);
  p.max_tweet_len = kv.get_size("max_tweet_len", p.max_tweet_len);
  if (p.max_len < 2) throw ConfigError("max_len", "must be >= 2");
  require_positive(p.stride, "stride");
  require_positive(p.queue_len, "queue_len");
  require_positive(p.max_tweet_len, "max_tweet_len");
  if (p.vocab_size < 3) throw ConfigError("vocab_size", "must be >= 3");
  if (!(p.train_frac > 0 && p.train_frac <= 1)) throw ConfigError("train_frac", "must be in (0, 1]");
  if (!(p.val_frac >= 0 && p.val_frac < 1)) throw ConfigError("val_frac", "must be in [0, 1)");

  ModelConfig& m = c.model;
  m.embed_dim = kv.get_size("embed_dim", m.embed_dim);
  m.lstm_hidden = kv.get_size("lstm_hidden", m.lstm_hidden);
  m.context_hidden = kv.get_size("context_hidden", m.context_hidden);
  m.gru_hidden = kv.get_size("gru_hidden", m.gru_hidden);
  m.user_dim = kv.get_size("user_dim", m.user_dim);
  m.topics = kv.get_size("topics", m.topics);
  m.vae_hidden = kv.get_size("vae_hidden", m.vae_hidden);
  m.queue_len = p.queue_len;
  m.max_len = p.max_len;
  for (auto [v, key] : {std::pair{m.embed_dim, "embed_dim"}, {m.lstm_hidden, "lstm_hidden"},
                        {m.context_hidden, "context_hidden"}, {m.gru_hidden, "gru_hidden"},
                        {m.user_dim, "user_dim"}, {m.topics, "topics"},
                        {m.vae_hidden, "vae_hidden"}})
    require_positive(v, key);
  m.weights.eta = kv.get_double("eta", m.weights.eta);
  m.weights.beta = kv.get_double("beta", m.weights.beta);
  m.weights.gamma = kv.get_double("gamma", m.weights.gamma);
  require_nonneg(m.weights.eta, "eta");
  require_nonneg(m.weights.beta, "beta");
  require_nonneg(m.weights.gamma, "gamma");
  m.sigma = kv.get_double("sigma", m.sigma);
  if (!(m.sigma > 0)) throw ConfigError("sigma", "must be > 0");
  m.horizon = kv.get_double("horizon", m.horizon);
  if (!(m.horizon > 0)) throw ConfigError("horizon", "must be > 0");
  m.time_loss = keyed("time_loss", [&] {
    return parse_time_loss(kv.get_string("time_loss", time_loss_name(m.time_loss)));
  });
  m.likelihood = keyed("likelihood", [&] {
    return parse_likelihood(kv.get_string("likelihood", likelihood_name(m.likelihood)));
  });
  m.transform = keyed("time_transform", [&] {
    return parse_time_transform(kv.get_string("time_transform", time_transform_name(m.transform)));
  });
  const Variant variant = keyed("variant", [&] {
    return parse_variant(kv.get_string("variant", variant_name(m.variant)));
  });
  m = ablate(m, variant);

  TrainOptions& t = c.train;
  t.epochs = kv.get_size("epochs", t.epochs);
  t.batch_size = kv.get_size("batch_size", t.batch_size);
  t.patience = kv.get_size("patience", t.patience);
  t.lr = kv.get_double("lr", t.lr);
  t.lr_decay = kv.get_double("lr_decay", t.lr_decay);
  t.clip_norm = kv.get_double("clip_norm", t.clip_norm);
  require_positive(t.batch_size, "batch_size");
  require_positive(t.patience, "patience");
  if (!(t.lr > 0)) throw ConfigError("lr", "must be > 0");
  if (!(t.lr_decay > 0)) throw ConfigError("lr_decay", "must be > 0");
  if (!(t.clip_norm > 0)) throw ConfigError("clip_norm", "must be > 0");
  t.seed = c.seed;
  t.log_path = c.log;
  return c;
}

std::string run_config_help() {
  return R"(Run config keys (flat "key = value", '#' comments; override with --set key=value):
  dataset               JSON-lines dataset (required)
  checkpoint            checkpoint path written by train (ntom.ckpt)
  log                   per-epoch JSON log, appended (none)
  embeddings            optional "word v1 .. vk" embedding text file
  embeddings_trainable  fine-tune loaded embeddings (true)
  time_unit             label of the natural time unit (hours)
  time_transform        log1p | linear (log1p)
  seed                  run seed (0)
  min_posts             drop users with fewer posts (3)
  max_len               sequence window length (7)
  stride                window stride (1)
  train_frac            per-user share of posts used for training (0.9)
  val_frac              share of training sequences held out for early stopping (0.1)
  queue_len             neighbour queue length L (3)
  vocab_size            vocabulary size including PAD and UNK (3000)
  max_tweet_len         tokens kept per post (30)
  embed_dim             word embedding size (50)
  lstm_hidden           tweet Bi-LSTM hidden size per direction (32)
  context_hidden        neighbour LSTM hidden size (32)
  gru_hidden            GRU hidden size (32)
  user_dim              user embedding size (16)
  topics                number of topics K (50)
  vae_hidden            VAE encoder hidden size (100)
  variant               full | no_vae | no_context | gru_only (full)
  eta, beta, gamma      loss weights (0.2, 0.4, 0.4)
  sigma                 Gaussian time-loss scale (1)
  time_loss             gaussian_nll | tpp_nll (gaussian_nll)
  likelihood            gaussian | multinomial bag-of-words likelihood (gaussian)
  horizon               cap on the expected-time quadrature range (1000)
  epochs                maximum epochs (30)
  batch_size            sequences per batch (16)
  patience              early-stopping patience in epochs (3)
  lr                    Adam learning rate (0.0005)
  lr_decay              per-epoch learning-rate factor (0.9)
  clip_norm             global gradient-norm clip (5)
)";
}

std::string sim_config_help() {
  return R"(Simulation config keys:
  n_users               number of users (50)
  edges                 optional edge-list file, one "src dst" per line (dst follows src)
  follow_degree         accounts each user follows when edges is not given (3)
  base_rate             sets base_rate_min and base_rate_max together
  base_rate_min/max     log-uniform range of per-user base rates (0.2, 0.2)
  alpha_self            self-excitation branching ratio (0)
  alpha_neighbor        excitation from each followed account (0)
  decay                 exponential kernel decay omega (1)
  cross_topic_factor    excitation multiplier for off-topic posts (1)
  horizon               simulated time span (168)
  time_unit             label of the time unit (hours)
  n_topics              planted topics (8)
  words_per_topic       planted words per topic (20)
  background_words      background vocabulary size (100)
  stance_words          marker words per stance (10)
  words_per_post        tokens per post (20)
  topic_mix             share of tokens from the active topic (0.8)
  stance_marker_share   share of the remaining tokens drawn from stance markers (0.5)
  influence_prob        probability of adopting the most influential neighbour post's stance (0.5)
  topic_switch_prob     per-post probability of a fresh topic and stance (0.1)
  stance_peak           probability of a topic's dominant stance (0.6)
)";
}

PreparedData prepare_from(const RunConfig& cfg, const Vocabulary* vocab) {
  if (cfg.dataset.empty()) throw ConfigError("dataset", "no dataset configured");
  if (!std::filesystem::exists(cfg.dataset)) {
    throw ConfigError("dataset", "file not found: " + cfg.dataset.string());
  }
  LoadResult loaded = load_jsonl(cfg.dataset);
  return prepare_dataset(std::move(loaded.posts), cfg.prepare, cfg.seed, vocab);
}

ModelConfig model_config_for(const RunConfig& cfg, const PreparedData& data) {
  ModelConfig m = cfg.model;
  m.vocab_size = data.vocab.size();
  m.user_rows = data.users.size() + 1;
  return m;
}

NtomModel build_model(const RunConfig& cfg, const PreparedData& data) {
  NtomModel model(model_config_for(cfg, data), data.vocab, data.users, cfg.seed);
  if (!cfg.embeddings.empty()) {
    if (!std::filesystem::exists(cfg.embeddings)) {
      throw ConfigError("embeddings", "file not found: " + cfg.embeddings.string());
    }
    model.tweet.embedding.load_text(cfg.embeddings, data.vocab);
    model.tweet.embedding.trainable = cfg.embeddings_trainable;
  }
  return model;
}

std::string metrics_json(const Metrics& m, const std::string& time_unit) {
  nlohmann::json confusion = nlohmann::json::array();
  for (const auto& row : m.confusion) confusion.push_back(row);
  nlohmann::json j = {{"n", m.n},
                      {"accuracy", m.accuracy},
                      {"mse", m.mse},
                      {"time_unit", time_unit},
                      {"confusion", confusion},
                      {"defect_rate", m.defect_rate}};
  return j.dump(2);
}

std::string evaluation_report(const RunConfig& cfg, NtomModel& model) {
  RunConfig eval_cfg = cfg;
  eval_cfg.prepare.max_len = model.config().max_len;
  eval_cfg.prepare.queue_len = model.config().queue_len;
  const PreparedData data = prepare_from(eval_cfg, &model.vocab());
  if (data.test.empty()) throw EmptyResultError("empty test split");
  const Metrics m = evaluate(model, data.posts, data.test);
  nlohmann::json report = nlohmann::json::parse(metrics_json(m, cfg.time_unit));
  const Baselines b = fit_baselines(data);
  report["baselines"] = {{"majority_stance", b.majority_stance},
                         {"majority_accuracy", b.metrics.accuracy},
                         {"mean_interval", b.mean_interval},
                         {"constant_interval_mse", b.metrics.mse}};
  return report.dump(2);
}

}  // namespace ntom
