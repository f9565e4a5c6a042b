#include "ntom/topic_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace ntom {

TopicModel::TopicModel(std::size_t vocab_size, std::size_t hidden_dim, std::size_t topics,
                       std::mt19937_64& rng) {
  const double enc_scale = 1.0 / std::sqrt(static_cast<double>(vocab_size));
  const double hid_scale = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  const double dec_scale = 1.0 / std::sqrt(static_cast<double>(topics));
  encoder_w = uniform_param("vae.encoder_w", vocab_size, hidden_dim, enc_scale, rng);
  encoder_b = ad::Param("vae.encoder_b", ad::Matrix(1, hidden_dim));
  mu_w = uniform_param("vae.mu_w", hidden_dim, topics, hid_scale, rng);
  mu_b = ad::Param("vae.mu_b", ad::Matrix(1, topics));
  logvar_w = uniform_param("vae.logvar_w", hidden_dim, topics, hid_scale, rng);
  logvar_b = ad::Param("vae.logvar_b", ad::Matrix(1, topics));
  decoder_w = uniform_param("vae.decoder_w", topics, vocab_size, 0.1 * dec_scale, rng);
  decoder_b = ad::Param("vae.decoder_b", ad::Matrix(1, vocab_size));
}

void TopicModel::collect(std::vector<ad::Param*>& out) {
  for (ad::Param* p : {&encoder_w, &encoder_b, &mu_w, &mu_b, &logvar_w, &logvar_b, &decoder_w,
                       &decoder_b})
    out.push_back(p);
}

TopicPosterior TopicModel::infer_topic(ad::Graph& g, ad::Tensor bow) {
  if (bow.cols() != vocab_size() || bow.rows() != 1) {
    throw std::invalid_argument("infer_topic: bag of words has shape " +
                                bow.values().shape_string() + ", expected 1x" +
                                std::to_string(vocab_size()));
  }
  ad::Tensor hidden =
      g.tanh(g.add(g.matmul(bow, g.param(encoder_w)), g.param(encoder_b)));
  ad::Tensor mu = g.add(g.matmul(hidden, g.param(mu_w)), g.param(mu_b));
  ad::Tensor logvar = g.add(g.matmul(hidden, g.param(logvar_w)), g.param(logvar_b));
  return {mu, g.clamp(logvar, kLogvarMin, kLogvarMax)};
}

ad::Tensor TopicModel::sample_z(ad::Graph& g, const TopicPosterior& post, ad::Tensor noise) {
  ad::Tensor stddev = g.exp(g.scale(post.logvar, 0.5));
  return g.add(post.mu, g.mul(stddev, noise));
}

ad::Tensor TopicModel::reconstruct(ad::Graph& g, ad::Tensor z) {
  return g.add(g.matmul(z, g.param(decoder_w)), g.param(decoder_b));
}

VaeLossTerms TopicModel::vae_loss(ad::Graph& g, ad::Tensor bow, const TopicPosterior& post,
                                  ad::Tensor z) {
  ad::Tensor decoded = reconstruct(g, z);
  ad::Tensor recon;
  if (likelihood == BowLikelihood::kGaussian) {
    ad::Tensor diff = g.sub(bow, decoded);
    recon = g.scale(g.sum(g.mul(diff, diff)), 0.5);
  } else {
    ad::Tensor log_probs = g.log(g.softmax_rows(decoded));
    recon = g.scale(g.sum(g.mul(bow, log_probs)), -1.0);
  }
  const double k = static_cast<double>(post.mu.cols());
  ad::Tensor inner =
      g.sub(g.add(g.exp(post.logvar), g.mul(post.mu, post.mu)), post.logvar);
  ad::Tensor kl = g.scale(g.add(g.sum(inner), g.scalar(-k)), 0.5);
  return {g.add(recon, kl), recon, kl};
}

std::vector<std::size_t> TopicModel::top_word_ids(std::size_t topic, std::size_t n) const {
  if (topic >= topics()) {
    throw std::out_of_range("topic " + std::to_string(topic) + " >= topic count " +
                            std::to_string(topics()));
  }
  const std::size_t v = vocab_size();
  n = std::min(n, v);
  std::vector<std::size_t> ids(v);
  std::iota(ids.begin(), ids.end(), 0);
  const ad::Matrix& w = decoder_w.value;
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n), ids.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double wa = w(topic, a), wb = w(topic, b);
                      return wa != wb ? wa > wb : a < b;
                    });
  ids.resize(n);
  return ids;
}

std::vector<std::string> TopicModel::top_words(std::size_t topic, std::size_t n,
                                               const Vocabulary& vocab) const {
  std::vector<std::string> out;
  for (std::size_t id : top_word_ids(topic, n)) {
    out.push_back(id < vocab.size() ? vocab.word_of(static_cast<TokenId>(id))
                                    : std::to_string(id));
  }
  return out;
}

double kl_standard_normal(std::span<const double> mu, std::span<const double> logvar) {
  double kl = 0.0;
  for (std::size_t k = 0; k < mu.size(); ++k)
    kl += std::exp(logvar[k]) + mu[k] * mu[k] - 1.0 - logvar[k];
  return 0.5 * kl;
}

std::string topic_word_tsv(const TopicModel& model, const Vocabulary& vocab, std::size_t n) {
  std::ostringstream os;
  os.precision(6);
  for (std::size_t k = 0; k < model.topics(); ++k) {
    os << k;
    for (std::size_t id : model.top_word_ids(k, n))
      os << '\t' << vocab.word_of(static_cast<TokenId>(id)) << ':' << model.decoder_w.value(k, id);
    os << '\n';
  }
  return os.str();
}

}  // namespace ntom
