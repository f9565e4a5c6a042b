#include "ntom/model.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "ntom/rng.hpp"

namespace ntom {

Variant parse_variant(std::string_view name) {
  if (name == "full") return Variant::kFull;
  if (name == "no_vae") return Variant::kNoVae;
  if (name == "no_context") return Variant::kNoContext;
  if (name == "gru_only") return Variant::kGruOnly;
  throw std::invalid_argument("unknown variant '" + std::string(name) +
                              "' (expected full, no_vae, no_context or gru_only)");
}

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kNoVae: return "no_vae";
    case Variant::kNoContext: return "no_context";
    case Variant::kGruOnly: return "gru_only";
  }
  return "?";
}

tpp::TimeLossMode parse_time_loss(std::string_view name) {
  if (name == "gaussian_nll") return tpp::TimeLossMode::kGaussianNll;
  if (name == "tpp_nll") return tpp::TimeLossMode::kTppNll;
  throw std::invalid_argument("unknown time_loss '" + std::string(name) +
                              "' (expected gaussian_nll or tpp_nll)");
}

const char* time_loss_name(tpp::TimeLossMode m) {
  return m == tpp::TimeLossMode::kGaussianNll ? "gaussian_nll" : "tpp_nll";
}

BowLikelihood parse_likelihood(std::string_view name) {
  if (name == "gaussian") return BowLikelihood::kGaussian;
  if (name == "multinomial") return BowLikelihood::kMultinomial;
  throw std::invalid_argument("unknown likelihood '" + std::string(name) +
                              "' (expected gaussian or multinomial)");
}

const char* likelihood_name(BowLikelihood l) {
  return l == BowLikelihood::kGaussian ? "gaussian" : "multinomial";
}

const char* time_transform_name(TimeTransform t) {
  return t == TimeTransform::kLog1p ? "log1p" : "linear";
}

std::string ModelConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  os << "vocab_size=" << vocab_size << ";user_rows=" << user_rows << ";embed_dim=" << embed_dim
     << ";lstm_hidden=" << lstm_hidden << ";context_hidden=" << context_hidden
     << ";gru_hidden=" << gru_hidden << ";user_dim=" << user_dim << ";topics=" << topics
     << ";vae_hidden=" << vae_hidden << ";queue_len=" << queue_len << ";max_len=" << max_len
     << ";variant=" << variant_name(variant) << ";eta=" << weights.eta
     << ";beta=" << weights.beta << ";gamma=" << weights.gamma << ";sigma=" << sigma
     << ";time_loss=" << time_loss_name(time_loss) << ";likelihood=" << likelihood_name(likelihood)
     << ";time_transform=" << time_transform_name(transform) << ";horizon=" << horizon;
  return os.str();
}

std::uint64_t ModelConfig::hash() const { return fnv1a(canonical()); }

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* key) {
    if (v == 0) throw std::invalid_argument(std::string(key) + " must be >= 1");
  };
  positive(vocab_size, "vocab_size");
  positive(user_rows, "user_rows");
  positive(embed_dim, "embed_dim");
  positive(lstm_hidden, "lstm_hidden");
  positive(context_hidden, "context_hidden");
  positive(gru_hidden, "gru_hidden");
  positive(user_dim, "user_dim");
  positive(topics, "topics");
  positive(vae_hidden, "vae_hidden");
  positive(queue_len, "queue_len");
  if (max_len < 2) throw std::invalid_argument("max_len must be >= 2");
  if (weights.eta < 0) throw std::invalid_argument("eta must be >= 0");
  if (weights.beta < 0) throw std::invalid_argument("beta must be >= 0");
  if (weights.gamma < 0) throw std::invalid_argument("gamma must be >= 0");
  if (!(sigma > 0)) throw std::invalid_argument("sigma must be > 0");
  if (!(horizon > 0)) throw std::invalid_argument("horizon must be > 0");
}

ModelConfig ablate(ModelConfig cfg, Variant variant) {
  cfg.variant = variant;
  if (variant == Variant::kNoVae) cfg.weights.eta = 0.0;
  return cfg;
}

NtomModel::NtomModel(ModelConfig cfg, Vocabulary vocab, std::vector<std::string> users,
                     std::uint64_t seed)
    : cfg_(std::move(cfg)), vocab_(std::move(vocab)), users_(std::move(users)) {
  if (cfg_.vocab_size != vocab_.size()) {
    throw std::invalid_argument("vocab_size " + std::to_string(cfg_.vocab_size) +
                                " does not match vocabulary of " +
                                std::to_string(vocab_.size()) + " words");
  }
  if (cfg_.user_rows != users_.size() + 1) {
    throw std::invalid_argument("user_rows must be number of users + 1");
  }
  cfg_.validate();
  for (std::size_t i = 0; i < users_.size(); ++i) user_rows_[users_[i]] = i + 1;

  auto rng = substream(seed, "init");
  const std::size_t post_dim = 2 * cfg_.lstm_hidden;
  tweet = TweetEncoder(cfg_.vocab_size, cfg_.embed_dim, cfg_.lstm_hidden, rng);
  neighbor = NeighborEncoder(post_dim, cfg_.context_hidden, rng);
  topic = TopicModel(cfg_.vocab_size, cfg_.vae_hidden, cfg_.topics, rng);
  topic.likelihood = cfg_.likelihood;
  attention = ContextAttention(cfg_.context_hidden, cfg_.topics, post_dim + cfg_.topics, rng);
  const std::size_t fused = cfg_.context_hidden + post_dim + cfg_.topics + 1 + cfg_.user_dim;
  gru = GruCell(fused, cfg_.gru_hidden, rng);
  intensity = IntensityHead(cfg_.gru_hidden, rng);
  stance = StanceHead(cfg_.gru_hidden, rng);
  user_table = uniform_param("user_table", cfg_.user_rows, cfg_.user_dim, 0.1, rng);
}

std::size_t NtomModel::user_row(const std::string& user_id) const {
  auto it = user_rows_.find(user_id);
  return it == user_rows_.end() ? 0 : it->second;
}

std::vector<ad::Param*> NtomModel::params() {
  std::vector<ad::Param*> out;
  out.push_back(&tweet.embedding.table);
  tweet.forward.collect(out);
  tweet.backward.collect(out);
  neighbor.collect(out);
  topic.collect(out);
  attention.collect(out);
  gru.collect(out);
  intensity.collect(out);
  stance.collect(out);
  out.push_back(&user_table);
  return out;
}

std::vector<ad::Param*> NtomModel::trainable_params() {
  std::vector<ad::Param*> out;
  for (ad::Param* p : params()) {
    if (p == &tweet.embedding.table && !tweet.embedding.trainable) continue;
    out.push_back(p);
  }
  return out;
}

ForwardPass::ForwardPass(NtomModel& model, ad::Graph& graph, std::span<const Post> posts)
    : m_(model), g_(graph), posts_(posts) {}

const ForwardPass::Encoded& ForwardPass::encode(std::size_t post) {
  if (auto it = memo_.find(post); it != memo_.end()) return it->second;
  const Post& p = posts_[post];
  Encoded e;
  e.hidden = m_.tweet.encode(g_, p.token_ids);
  if (m_.config().variant != Variant::kNoVae) {
    e.bow = g_.constant(dense_bow(p, m_.config().vocab_size));
    e.posterior = m_.topic.infer_topic(g_, e.bow);
  }
  return memo_.emplace(post, std::move(e)).first->second;
}

SequenceOutput ForwardPass::run(const EventSequence& seq, const ForwardOptions& opts) {
  const ModelConfig& cfg = m_.config();
  const bool use_vae = cfg.variant != Variant::kNoVae;
  const bool use_context = cfg.variant != Variant::kNoContext;
  const std::size_t n = seq.posts.size();
  if (n == 0) throw std::invalid_argument("empty sequence");
  if (use_context && seq.queues.size() != n) {
    throw std::invalid_argument("sequence for " + seq.user_id + " has no neighbour queues");
  }
  const std::size_t steps = opts.predict_past_end ? n : n - 1;

  SequenceOutput out;
  ad::Tensor l_x = g_.scalar(0.0);
  ad::Tensor l_time = g_.scalar(0.0);
  ad::Tensor l_stan = g_.scalar(0.0);

  const std::size_t user_row = m_.user_row(seq.user_id);
  ad::Tensor user = g_.gather_rows(g_.param(m_.user_table), std::span(&user_row, 1));
  ad::Tensor state = g_.zeros(1, cfg.gru_hidden);
  std::normal_distribution<double> normal(0.0, 1.0);

  for (std::size_t i = 0; i < steps; ++i) {
    const std::size_t pi = seq.posts[i];
    const Encoded& enc = encode(pi);

    ad::Tensor z;
    if (use_vae) {
      if (opts.noise) {
        ad::Matrix eps(1, cfg.topics);
        for (double& v : eps.storage()) v = normal(*opts.noise);
        z = m_.topic.sample_z(g_, enc.posterior, g_.constant(std::move(eps)));
      } else {
        z = enc.posterior.mu;
      }
      l_x = g_.add(l_x, m_.topic.vae_loss(g_, enc.bow, enc.posterior, z).total);
    } else {
      z = g_.zeros(1, cfg.topics);
    }

    ad::Tensor context = g_.zeros(1, cfg.context_hidden);
    if (use_context && !seq.queues[i].empty()) {
      const auto& queue = seq.queues[i];
      std::vector<ad::Tensor> posts;
      for (std::size_t q : queue) posts.push_back(encode(q).hidden);
      std::vector<ad::Tensor> hidden = m_.neighbor.encode_queue(g_, posts);
      std::vector<NeighborState> states;
      for (std::size_t l = 0; l < queue.size(); ++l) {
        ad::Tensor zc = use_vae ? encode(queue[l]).posterior.mu : g_.zeros(1, cfg.topics);
        states.push_back({hidden[l], zc});
      }
      AttentionOutput att = m_.attention.attend(g_, enc.hidden, z, states);
      context = att.context;
      if (opts.trace_attention) {
        AttentionRecord rec;
        rec.user_id = seq.user_id;
        rec.step = i;
        rec.user_post = pi;
        rec.neighbor_posts = queue;
        const auto& w = att.weights.values().storage();
        rec.weights.assign(w.begin(), w.end());
        if (use_vae) {
          rec.user_topics = softmax(enc.posterior.mu.values().values());
          for (std::size_t q : queue)
            rec.neighbor_topics.push_back(softmax(encode(q).posterior.mu.values().values()));
        } else {
          const std::vector<double> zeros(cfg.topics, 0.0);
          rec.user_topics = softmax(zeros);
          rec.neighbor_topics.assign(queue.size(), rec.user_topics);
        }
        out.attention.push_back(std::move(rec));
      }
    }

    const double tau_in = to_model_time(posts_[pi].interval, cfg.transform);
    FusedInput fused{context, enc.hidden, z, g_.scalar(tau_in), user};
    state = m_.gru.step(g_, state, fused);

    StepOutput step;
    step.step = i;
    step.input_post = pi;
    ad::Tensor a = m_.intensity.base(g_, state);
    ad::Tensor tau_hat;
    tpp::Expectation info;
    if (cfg.variant == Variant::kGruOnly) {
      tau_hat = a;
    } else {
      tau_hat = expected_time_node(g_, a, m_.intensity.slope(g_), cfg.horizon, &info);
      step.defective = info.defective;
    }
    step.tau_hat = tau_hat.item();
    ad::Tensor logits = m_.stance.logits(g_, state);
    const std::vector<double> probs = softmax(logits.values().values());
    std::copy(probs.begin(), probs.end(), step.stance_probs.begin());

    if (i + 1 < n) {
      const Post& target = posts_[seq.posts[i + 1]];
      step.tau_true = to_model_time(target.interval, cfg.transform);
      step.stance_true = target.stance;
      ad::Tensor lt;
      if (cfg.variant == Variant::kGruOnly) {
        ad::Tensor diff = g_.sub(g_.scalar(step.tau_true), tau_hat);
        lt = g_.mul(diff, diff);
      } else if (cfg.time_loss == tpp::TimeLossMode::kGaussianNll) {
        lt = gaussian_time_loss_node(g_, step.tau_true, tau_hat, cfg.sigma);
      } else {
        lt = tpp_time_loss_node(g_, a, m_.intensity.slope(g_), step.tau_true);
      }
      l_time = g_.add(l_time, lt);
      l_stan = g_.add(l_stan, cross_entropy_node(g_, logits, static_cast<std::size_t>(target.stance)));
    }
    out.steps.push_back(step);
  }

  out.l_x = l_x;
  out.l_time = l_time;
  out.l_stan = l_stan;
  out.total = total_loss_node(g_, l_x, l_time, l_stan, cfg.weights);
  return out;
}

}  // namespace ntom
