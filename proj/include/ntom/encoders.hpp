#pragma once

// Token-sequence encoders: vocabulary, embedding lookup, LSTM cells, the
// Bi-LSTM tweet encoder and the cross-post neighbour encoder.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ntom/autodiff.hpp"

namespace ntom {

using TokenId = std::int32_t;

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr std::string_view kPadWord = "<pad>";
  static constexpr std::string_view kUnkWord = "<unk>";

  Vocabulary();
  /// Rebuilds from a stored word list; entries 0 and 1 must be PAD and UNK.
  static Vocabulary from_words(std::vector<std::string> words);

  /// Returns the id of `word`, inserting it when new.
  TokenId add(std::string_view word);
  /// UNK for unknown words.
  TokenId id_of(std::string_view word) const;
  const std::string& word_of(TokenId id) const;
  bool contains(std::string_view word) const;

  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> ids_;
};

ad::Param uniform_param(std::string name, std::size_t rows, std::size_t cols, double scale,
                        std::mt19937_64& rng);

class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(std::size_t vocab_size, std::size_t dim, std::mt19937_64& rng,
                 double init_scale = 0.1);

  /// T x dim matrix, row t = embedding of ids[t]. Throws std::out_of_range on
  /// an id outside the table.
  ad::Tensor embed(ad::Graph& g, std::span<const TokenId> ids);

  /// Replaces rows of words present in a whitespace-separated "word v1 .. vk"
  /// text file. Returns the number of rows replaced.
  std::size_t load_text(const std::filesystem::path& path, const Vocabulary& vocab);

  std::size_t vocab_size() const { return table.value.rows(); }
  std::size_t dim() const { return table.value.cols(); }

  ad::Param table;
  bool trainable = true;
};

/// [h | c] packed in one 1 x 2d node.
struct LstmState {
  ad::Tensor packed;

  ad::Tensor hidden(ad::Graph& g) const;
  ad::Tensor cell(ad::Graph& g) const;
  static LstmState zeros(ad::Graph& g, std::size_t dim);
};

/// Standard LSTM cell; gate blocks are laid out [input | forget | candidate | output].
class LstmCell {
 public:
  LstmCell() = default;
  LstmCell(std::string name, std::size_t input_dim, std::size_t hidden_dim,
           std::mt19937_64& rng);

  LstmState step(ad::Graph& g, const LstmState& state, ad::Tensor x);
  /// Same as step() with row `row` of x_proj = X w_input + bias precomputed.
  LstmState step_projected(ad::Graph& g, const LstmState& state, ad::Tensor x_proj,
                           std::size_t row = 0);

  std::size_t input_dim() const { return w_input.value.rows(); }
  std::size_t hidden_dim() const { return w_hidden.value.rows(); }
  void collect(std::vector<ad::Param*>& out);

  ad::Param w_input;   // input_dim x 4d
  ad::Param w_hidden;  // d x 4d
  ad::Param bias;      // 1 x 4d
};

/// Bi-LSTM over a tweet; the representation is the concatenation of the last
/// forward and last backward hidden states over non-PAD tokens.
class TweetEncoder {
 public:
  TweetEncoder() = default;
  TweetEncoder(std::size_t vocab_size, std::size_t embed_dim, std::size_t hidden_dim,
               std::mt19937_64& rng);

  /// Throws std::invalid_argument when no non-PAD token remains.
  ad::Tensor encode(ad::Graph& g, std::span<const TokenId> token_ids);

  std::size_t output_dim() const { return 2 * forward.hidden_dim(); }
  void collect(std::vector<ad::Param*>& out);

  EmbeddingTable embedding;
  LstmCell forward;
  LstmCell backward;
};

/// Unidirectional LSTM run across the per-post encodings of a neighbour queue,
/// oldest first. Output l is the hidden state after post l.
class NeighborEncoder {
 public:
  NeighborEncoder() = default;
  NeighborEncoder(std::size_t post_dim, std::size_t hidden_dim, std::mt19937_64& rng);

  std::vector<ad::Tensor> encode_queue(ad::Graph& g, std::span<const ad::Tensor> posts);

  std::size_t output_dim() const { return cell.hidden_dim(); }
  void collect(std::vector<ad::Param*>& out) { cell.collect(out); }

  LstmCell cell;
};

}  // namespace ntom
