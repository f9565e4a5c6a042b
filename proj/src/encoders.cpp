#include "ntom/encoders.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ntom {

Vocabulary::Vocabulary() {
  add(kPadWord);
  add(kUnkWord);
}

Vocabulary Vocabulary::from_words(std::vector<std::string> words) {
  if (words.size() < 2 || words[0] != kPadWord || words[1] != kUnkWord) {
    throw std::invalid_argument("vocabulary must start with " + std::string(kPadWord) + ", " +
                                std::string(kUnkWord));
  }
  Vocabulary v;
  for (std::size_t i = 2; i < words.size(); ++i) {
    if (v.contains(words[i])) throw std::invalid_argument("duplicate vocabulary word: " + words[i]);
    v.add(words[i]);
  }
  return v;
}

TokenId Vocabulary::add(std::string_view word) {
  std::string key(word);
  if (auto it = ids_.find(key); it != ids_.end()) return it->second;
  const auto id = static_cast<TokenId>(words_.size());
  words_.push_back(key);
  ids_.emplace(std::move(key), id);
  return id;
}

TokenId Vocabulary::id_of(std::string_view word) const {
  auto it = ids_.find(std::string(word));
  return it == ids_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view word) const {
  return ids_.contains(std::string(word));
}

const std::string& Vocabulary::word_of(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " out of vocabulary range");
  }
  return words_[static_cast<std::size_t>(id)];
}

ad::Param uniform_param(std::string name, std::size_t rows, std::size_t cols, double scale,
                        std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  ad::Matrix m(rows, cols);
  for (double& v : m.storage()) v = dist(rng);
  return ad::Param(std::move(name), std::move(m));
}

EmbeddingTable::EmbeddingTable(std::size_t vocab_size, std::size_t dim, std::mt19937_64& rng,
                               double init_scale)
    : table(uniform_param("embedding", vocab_size, dim, init_scale, rng)) {
  for (std::size_t c = 0; c < dim; ++c) table.value(Vocabulary::kPad, c) = 0.0;
  table.pin_row0 = true;
}

ad::Tensor EmbeddingTable::embed(ad::Graph& g, std::span<const TokenId> ids) {
  std::vector<std::size_t> rows;
  rows.reserve(ids.size());
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size()) {
      throw std::out_of_range("embed: token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(vocab_size()));
    }
    rows.push_back(static_cast<std::size_t>(id));
  }
  ad::Tensor t = trainable ? g.param(table) : g.constant(table.value);
  return g.gather_rows(t, rows);
}

std::size_t EmbeddingTable::load_text(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open embedding file " + path.string());
  std::string line;
  std::size_t replaced = 0;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::string word;
    if (!(fields >> word)) continue;
    std::vector<double> values;
    double v = 0.0;
    while (fields >> v) values.push_back(v);
    if (values.size() != dim()) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected " +
                               std::to_string(dim()) + " values, got " +
                               std::to_string(values.size()));
    }
    if (!vocab.contains(word)) continue;
    const TokenId id = vocab.id_of(word);
    if (id == Vocabulary::kPad) continue;
    for (std::size_t c = 0; c < dim(); ++c) table.value(static_cast<std::size_t>(id), c) = values[c];
    ++replaced;
  }
  return replaced;
}

ad::Tensor LstmState::hidden(ad::Graph& g) const {
  return g.slice_cols(packed, 0, packed.cols() / 2);
}

ad::Tensor LstmState::cell(ad::Graph& g) const {
  return g.slice_cols(packed, packed.cols() / 2, packed.cols() / 2);
}

LstmState LstmState::zeros(ad::Graph& g, std::size_t dim) { return {g.zeros(1, 2 * dim)}; }

LstmCell::LstmCell(std::string name, std::size_t input_dim, std::size_t hidden_dim,
                   std::mt19937_64& rng) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  w_input = uniform_param(name + ".w_input", input_dim, 4 * hidden_dim, scale, rng);
  w_hidden = uniform_param(name + ".w_hidden", hidden_dim, 4 * hidden_dim, scale, rng);
  bias = ad::Param(name + ".bias", ad::Matrix(1, 4 * hidden_dim));
}

void LstmCell::collect(std::vector<ad::Param*>& out) {
  out.push_back(&w_input);
  out.push_back(&w_hidden);
  out.push_back(&bias);
}

LstmState LstmCell::step(ad::Graph& g, const LstmState& state, ad::Tensor x) {
  return step_projected(g, state, g.add(g.matmul(x, g.param(w_input)), g.param(bias)));
}

LstmState LstmCell::step_projected(ad::Graph& g, const LstmState& state, ad::Tensor x_proj,
                                   std::size_t row) {
  return {g.lstm_cell(x_proj, row, state.packed, g.param(w_hidden))};
}

TweetEncoder::TweetEncoder(std::size_t vocab_size, std::size_t embed_dim, std::size_t hidden_dim,
                           std::mt19937_64& rng)
    : embedding(vocab_size, embed_dim, rng),
      forward("tweet.fwd", embed_dim, hidden_dim, rng),
      backward("tweet.bwd", embed_dim, hidden_dim, rng) {}

void TweetEncoder::collect(std::vector<ad::Param*>& out) {
  if (embedding.trainable) out.push_back(&embedding.table);
  forward.collect(out);
  backward.collect(out);
}

ad::Tensor TweetEncoder::encode(ad::Graph& g, std::span<const TokenId> token_ids) {
  std::vector<TokenId> ids;
  ids.reserve(token_ids.size());
  for (TokenId id : token_ids)
    if (id != Vocabulary::kPad) ids.push_back(id);
  if (ids.empty()) throw std::invalid_argument("encode_tweet: tweet is empty after PAD removal");

  ad::Tensor emb = embedding.embed(g, ids);
  ad::Tensor proj_f = g.add(g.matmul(emb, g.param(forward.w_input)), g.param(forward.bias));
  ad::Tensor proj_b = g.add(g.matmul(emb, g.param(backward.w_input)), g.param(backward.bias));

  LstmState fs = LstmState::zeros(g, forward.hidden_dim());
  for (std::size_t t = 0; t < ids.size(); ++t) fs = forward.step_projected(g, fs, proj_f, t);
  LstmState bs = LstmState::zeros(g, backward.hidden_dim());
  for (std::size_t t = ids.size(); t-- > 0;) bs = backward.step_projected(g, bs, proj_b, t);
  const ad::Tensor halves[] = {fs.hidden(g), bs.hidden(g)};
  return g.concat_cols(halves);
}

NeighborEncoder::NeighborEncoder(std::size_t post_dim, std::size_t hidden_dim,
                                 std::mt19937_64& rng)
    : cell("neighbor.lstm", post_dim, hidden_dim, rng) {}

std::vector<ad::Tensor> NeighborEncoder::encode_queue(ad::Graph& g,
                                                      std::span<const ad::Tensor> posts) {
  std::vector<ad::Tensor> out;
  out.reserve(posts.size());
  LstmState s = LstmState::zeros(g, cell.hidden_dim());
  for (ad::Tensor p : posts) {
    s = cell.step(g, s, p);
    out.push_back(s.hidden(g));
  }
  return out;
}

}  // namespace ntom
