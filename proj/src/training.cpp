#include "ntom/training.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "ntom/rng.hpp"

namespace ntom {

using nlohmann::json;

AdamState make_adam(std::span<ad::Param* const> params, double lr, double decay) {
  AdamState s;
  s.lr = lr;
  s.decay = decay;
  for (const ad::Param* p : params) {
    s.m.emplace_back(p->value.rows(), p->value.cols());
    s.v.emplace_back(p->value.rows(), p->value.cols());
  }
  return s;
}

bool adam_step(std::span<ad::Param* const> params, AdamState& s) {
  if (s.m.size() != params.size()) throw std::invalid_argument("adam: state/param count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (s.m[k].rows() != params[k]->value.rows() || s.m[k].cols() != params[k]->value.cols())
      throw std::invalid_argument("adam: moment shape mismatch for " + params[k]->name);
    for (double g : params[k]->grad.storage())
      if (!std::isfinite(g)) return false;
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    ad::Param& p = *params[k];
    auto& m = s.m[k].storage();
    auto& v = s.v[k].storage();
    auto& w = p.value.storage();
    const auto& g = p.grad.storage();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
      v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
      w[i] -= s.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + s.eps);
    }
  }
  return true;
}

double clip_grad_norm(std::span<ad::Param* const> params, double max_norm) {
  double sq = 0.0;
  for (const ad::Param* p : params)
    for (double g : p->grad.storage()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (std::isfinite(norm) && norm > max_norm) {
    const double f = max_norm / norm;
    for (ad::Param* p : params)
      for (double& g : p->grad.storage()) g *= f;
  }
  return norm;
}

namespace {

using Snapshot = std::vector<ad::Matrix>;

Snapshot snapshot(std::span<ad::Param* const> params) {
  Snapshot s;
  for (const ad::Param* p : params) s.push_back(p->value);
  return s;
}

void restore(std::span<ad::Param* const> params, const Snapshot& s) {
  for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = s[k];
}

void add_terms(LossBreakdown& acc, const SequenceOutput& out) {
  acc.l_x += out.l_x.item();
  acc.l_time += out.l_time.item();
  acc.l_stan += out.l_stan.item();
  acc.total += out.total.item();
  ++acc.sequences;
}

LossBreakdown averaged(LossBreakdown b) {
  if (b.sequences > 0) {
    const double n = static_cast<double>(b.sequences);
    b.l_x /= n;
    b.l_time /= n;
    b.l_stan /= n;
    b.total /= n;
  }
  return b;
}

json breakdown_json(const LossBreakdown& b) {
  return {{"l_x", b.l_x}, {"l_time", b.l_time}, {"l_stan", b.l_stan}, {"total", b.total},
          {"sequences", b.sequences}};
}

const Post& final_target(std::span<const Post> posts, const EventSequence& seq) {
  return posts[seq.posts.back()];
}

void score(Metrics& m, std::size_t predicted, int truth, double tau_hat, double tau_true,
           bool defective) {
  m.confusion[static_cast<std::size_t>(truth)][predicted] += 1;
  if (predicted == static_cast<std::size_t>(truth)) m.accuracy += 1.0;
  const double e = tau_hat - tau_true;
  m.mse += e * e;
  if (defective) m.defect_rate += 1.0;
  ++m.n;
}

void finish(Metrics& m) {
  const double n = static_cast<double>(m.n);
  m.accuracy /= n;
  m.mse /= n;
  m.defect_rate /= n;
}

}  // namespace

LossBreakdown mean_loss(NtomModel& model, std::span<const Post> posts,
                        std::span<const EventSequence> sequences) {
  LossBreakdown acc;
  for (const EventSequence& seq : sequences) {
    ad::Graph g;
    ForwardPass fp(model, g, posts);
    add_terms(acc, fp.run(seq));
  }
  return averaged(acc);
}

TrainResult train(NtomModel& model, const PreparedData& data, const TrainOptions& opts) {
  if (data.train.empty()) throw std::invalid_argument("no training sequences");
  if (opts.batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  const std::vector<ad::Param*> params = model.trainable_params();
  AdamState adam = make_adam(params, opts.lr, opts.lr_decay);
  TrainResult result;

  std::ofstream log;
  if (!opts.log_path.empty()) {
    if (opts.log_path.has_parent_path()) std::filesystem::create_directories(opts.log_path.parent_path());
    log.open(opts.log_path, std::ios::app);
    if (!log) throw std::runtime_error("cannot open log file " + opts.log_path.string());
  }

  Snapshot best = snapshot(params);
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  std::size_t batch_counter = 0;

  for (std::size_t epoch = 1; epoch <= opts.epochs && !result.diverged; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = adam.lr;

    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);
    auto shuffle_rng = substream(opts.seed, "shuffle", epoch);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(shuffle_rng)]);
    }

    LossBreakdown acc;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      auto noise = substream(opts.seed, "vae_noise", batch_counter++);
      ad::Graph g;
      ForwardPass fp(model, g, data.posts);
      LossBreakdown batch;
      ad::Tensor sum = g.scalar(0.0);
      for (std::size_t k = start; k < end; ++k) {
        ForwardOptions fo;
        fo.noise = &noise;
        SequenceOutput out = fp.run(data.train[order[k]], fo);
        add_terms(batch, out);
        sum = g.add(sum, out.total);
      }
      ad::Tensor loss = g.scale(sum, 1.0 / static_cast<double>(end - start));
      if (!std::isfinite(loss.item())) {
        result.diverged = true;
        if (opts.progress) *opts.progress << "epoch " << epoch << ": non-finite loss, aborting\n";
        break;
      }
      if (start == 0) entry.first_batch_total = loss.item();
      g.backward(loss);
      for (ad::Param* p : params) p->zero_grad();
      g.accumulate_param_grads();
      clip_grad_norm(params, opts.clip_norm);
      if (!adam_step(params, adam)) {
        ++entry.skipped_batches;
        if (opts.progress)
          *opts.progress << "epoch " << epoch << ": skipped batch at " << start
                         << " (non-finite gradient)\n";
      }
      acc.l_x += batch.l_x;
      acc.l_time += batch.l_time;
      acc.l_stan += batch.l_stan;
      acc.total += batch.total;
      acc.sequences += batch.sequences;
    }
    if (result.diverged) break;
    adam.end_epoch();

    entry.train = averaged(acc);
    entry.validation = data.validation.empty()
                           ? entry.train
                           : mean_loss(model, data.posts, data.validation);
    entry.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(entry);

    if (log) {
      json j = {{"epoch", entry.epoch},
                {"lr", entry.lr},
                {"train", breakdown_json(entry.train)},
                {"validation", breakdown_json(entry.validation)},
                {"first_batch_total", entry.first_batch_total},
                {"skipped_batches", entry.skipped_batches}};
      log << j.dump() << '\n';
      log.flush();
    }
    if (opts.progress) {
      *opts.progress << "epoch " << epoch << " lr " << entry.lr << " train " << entry.train.total
                     << " (x " << entry.train.l_x << ", time " << entry.train.l_time
                     << ", stance " << entry.train.l_stan << ") val "
                     << entry.validation.total << " (stance " << entry.validation.l_stan
                     << ", time " << entry.validation.l_time << ") [" << entry.seconds << "s]\n";
    }

    const double val = entry.validation.total;
    if (!std::isfinite(val)) {
      result.diverged = true;
      break;
    }
    if (val < best_loss) {
      best_loss = val;
      best = snapshot(params);
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= opts.patience) {
      result.stopped_early = true;
      break;
    }
  }
  restore(params, best);
  return result;
}

std::size_t argmax_stance(std::span<const double> probs) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < probs.size(); ++k)
    if (probs[k] > probs[best]) best = k;
  return best;
}

Metrics evaluate(NtomModel& model, std::span<const Post> posts,
                 std::span<const EventSequence> test) {
  if (test.empty()) throw std::invalid_argument("empty test set");
  const TimeTransform tt = model.config().transform;
  Metrics m;
  for (const EventSequence& seq : test) {
    if (seq.posts.size() < 2) throw std::invalid_argument("test sequence needs >= 2 posts");
    ad::Graph g;
    ForwardPass fp(model, g, posts);
    const SequenceOutput out = fp.run(seq);
    const StepOutput& last = out.steps.back();
    const Post& target = final_target(posts, seq);
    score(m, argmax_stance(last.stance_probs), target.stance, to_natural_time(last.tau_hat, tt),
          target.interval, last.defective);
  }
  finish(m);
  return m;
}

Metrics evaluate_constant(std::size_t stance, double interval, std::span<const Post> posts,
                          std::span<const EventSequence> test) {
  if (test.empty()) throw std::invalid_argument("empty test set");
  Metrics m;
  for (const EventSequence& seq : test) {
    const Post& target = final_target(posts, seq);
    score(m, stance, target.stance, interval, target.interval, false);
  }
  finish(m);
  return m;
}

Baselines fit_baselines(const PreparedData& data) {
  std::array<std::size_t, kStanceClasses> counts{};
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto* set : {&data.train, &data.validation}) {
    for (const EventSequence& seq : *set) {
      for (std::size_t i = 1; i < seq.posts.size(); ++i) {
        const Post& p = data.posts[seq.posts[i]];
        counts[static_cast<std::size_t>(p.stance)] += 1;
        sum += p.interval;
        ++n;
      }
    }
  }
  if (n == 0) throw std::invalid_argument("no training targets");
  Baselines b;
  b.majority_stance = argmax_stance(std::vector<double>(counts.begin(), counts.end()));
  b.mean_interval = sum / static_cast<double>(n);
  b.metrics = evaluate_constant(b.majority_stance, b.mean_interval, data.posts, data.test);
  return b;
}

NextPrediction predict_next(NtomModel& model, std::span<const Post> posts,
                            const EventSequence& history) {
  ad::Graph g;
  ForwardPass fp(model, g, posts);
  ForwardOptions fo;
  fo.predict_past_end = true;
  const SequenceOutput out = fp.run(history, fo);
  const StepOutput& last = out.steps.back();
  NextPrediction p;
  p.user_id = history.user_id;
  p.tau_hat = to_natural_time(last.tau_hat, model.config().transform);
  p.stance_probs = last.stance_probs;
  p.defective = last.defective;
  return p;
}

std::vector<AttentionRecord> trace_attention(NtomModel& model, std::span<const Post> posts,
                                             std::span<const EventSequence> sequences) {
  std::vector<AttentionRecord> out;
  ForwardOptions fo;
  fo.trace_attention = true;
  for (const EventSequence& seq : sequences) {
    ad::Graph g;
    ForwardPass fp(model, g, posts);
    SequenceOutput r = fp.run(seq, fo);
    for (AttentionRecord& rec : r.attention) out.push_back(std::move(rec));
  }
  return out;
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string encode_values(const ad::Matrix& m) {
  std::string out;
  out.reserve(m.size() * 16);
  for (double v : m.storage()) out += hex64(std::bit_cast<std::uint64_t>(v));
  return out;
}

std::vector<double> decode_values(const std::string& hex, std::size_t n, const std::string& name) {
  if (hex.size() != n * 16) {
    throw CheckpointError("parameter " + name + ": expected " + std::to_string(n) +
                          " values, blob holds " + std::to_string(hex.size() / 16));
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits = 0;
    for (std::size_t c = 0; c < 16; ++c) {
      const char ch = hex[i * 16 + c];
      int d = 0;
      if (ch >= '0' && ch <= '9') d = ch - '0';
      else if (ch >= 'a' && ch <= 'f') d = ch - 'a' + 10;
      else throw CheckpointError("parameter " + name + ": bad hex digit");
      bits = (bits << 4) | static_cast<std::uint64_t>(d);
    }
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

json config_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"user_rows", c.user_rows},
          {"embed_dim", c.embed_dim},
          {"lstm_hidden", c.lstm_hidden},
          {"context_hidden", c.context_hidden},
          {"gru_hidden", c.gru_hidden},
          {"user_dim", c.user_dim},
          {"topics", c.topics},
          {"vae_hidden", c.vae_hidden},
          {"queue_len", c.queue_len},
          {"max_len", c.max_len},
          {"variant", variant_name(c.variant)},
          {"eta", c.weights.eta},
          {"beta", c.weights.beta},
          {"gamma", c.weights.gamma},
          {"sigma", c.sigma},
          {"time_loss", time_loss_name(c.time_loss)},
          {"likelihood", likelihood_name(c.likelihood)},
          {"time_transform", time_transform_name(c.transform)},
          {"horizon", c.horizon}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.user_rows = j.at("user_rows").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.lstm_hidden = j.at("lstm_hidden").get<std::size_t>();
  c.context_hidden = j.at("context_hidden").get<std::size_t>();
  c.gru_hidden = j.at("gru_hidden").get<std::size_t>();
  c.user_dim = j.at("user_dim").get<std::size_t>();
  c.topics = j.at("topics").get<std::size_t>();
  c.vae_hidden = j.at("vae_hidden").get<std::size_t>();
  c.queue_len = j.at("queue_len").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.weights.eta = j.at("eta").get<double>();
  c.weights.beta = j.at("beta").get<double>();
  c.weights.gamma = j.at("gamma").get<double>();
  c.sigma = j.at("sigma").get<double>();
  c.time_loss = parse_time_loss(j.at("time_loss").get<std::string>());
  c.likelihood = parse_likelihood(j.at("likelihood").get<std::string>());
  c.transform = parse_time_transform(j.at("time_transform").get<std::string>());
  c.horizon = j.at("horizon").get<double>();
  return c;
}

std::string first_difference(const std::string& a, const std::string& b) {
  std::istringstream sa(a), sb(b);
  std::string fa, fb;
  while (std::getline(sa, fa, ';') && std::getline(sb, fb, ';'))
    if (fa != fb) return "checkpoint has " + fa + ", expected " + fb;
  return "configs differ";
}

}  // namespace

void save_checkpoint(NtomModel& model, const std::filesystem::path& path) {
  json params = json::array();
  for (const ad::Param* p : model.params()) {
    params.push_back({{"name", p->name},
                      {"rows", p->value.rows()},
                      {"cols", p->value.cols()},
                      {"data", encode_values(p->value)}});
  }
  json j = {{"format_version", kCheckpointVersion},
            {"config_hash", hex64(model.config().hash())},
            {"config", config_json(model.config())},
            {"embedding_trainable", model.tweet.embedding.trainable},
            {"vocab", model.vocab().words()},
            {"users", model.users()},
            {"params", params}};
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    out << j.dump() << '\n';
    if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

NtomModel load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw CheckpointError("checkpoint " + path.string() + " is truncated or malformed: " +
                          e.what());
  }
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kCheckpointVersion) {
      throw CheckpointError("checkpoint format version " + std::to_string(version) +
                            ", this build reads version " + std::to_string(kCheckpointVersion));
    }
    const ModelConfig cfg = config_from_json(j.at("config"));
    const std::string stored = j.at("config_hash").get<std::string>();
    if (stored != hex64(cfg.hash())) {
      throw CheckpointError("config hash mismatch: file says " + stored + ", config hashes to " +
                            hex64(cfg.hash()));
    }
    if (expected && expected->hash() != cfg.hash()) {
      throw CheckpointError("config hash mismatch: checkpoint " + stored + ", expected " +
                            hex64(expected->hash()) + " (" +
                            first_difference(cfg.canonical(), expected->canonical()) + ")");
    }
    Vocabulary vocab = Vocabulary::from_words(j.at("vocab").get<std::vector<std::string>>());
    NtomModel model(cfg, std::move(vocab), j.at("users").get<std::vector<std::string>>(), 0);
    model.tweet.embedding.trainable = j.at("embedding_trainable").get<bool>();
    const json& blobs = j.at("params");
    std::vector<ad::Param*> params = model.params();
    if (blobs.size() != params.size()) {
      throw CheckpointError("checkpoint holds " + std::to_string(blobs.size()) +
                            " parameters, model has " + std::to_string(params.size()));
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      ad::Param& p = *params[k];
      const json& b = blobs[k];
      const std::string name = b.at("name").get<std::string>();
      const std::size_t rows = b.at("rows").get<std::size_t>();
      const std::size_t cols = b.at("cols").get<std::size_t>();
      if (name != p.name || rows != p.value.rows() || cols != p.value.cols()) {
        throw CheckpointError("parameter " + std::to_string(k) + ": checkpoint has " + name +
                              " " + std::to_string(rows) + "x" + std::to_string(cols) +
                              ", model expects " + p.name + " " + p.value.shape_string());
      }
      p.value = ad::Matrix(rows, cols, decode_values(b.at("data").get<std::string>(),
                                                     rows * cols, name));
    }
    return model;
  } catch (const json::exception& e) {
    throw CheckpointError("checkpoint " + path.string() + " is missing fields: " + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError("checkpoint " + path.string() + ": " + e.what());
  }
}

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return hex64(fnv1a(buf.str()));
}

}  // namespace ntom
