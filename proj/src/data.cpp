#include "ntom/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "ntom/rng.hpp"

namespace ntom {

using nlohmann::json;

namespace {

Post parse_post(const json& obj, std::size_t line_no) {
  auto fail = [&](const std::string& what) -> DataError {
    return DataError("line " + std::to_string(line_no) + ": " + what);
  };
  if (!obj.is_object()) throw fail("expected a JSON object");
  Post p;
  if (!obj.contains("user_id")) throw fail("missing user_id");
  const json& uid = obj["user_id"];
  if (uid.is_string()) {
    p.user_id = uid.get<std::string>();
  } else if (uid.is_number_integer()) {
    p.user_id = std::to_string(uid.get<long long>());
  } else {
    throw fail("user_id must be a string");
  }
  if (!obj.contains("timestamp") || !obj["timestamp"].is_number()) {
    throw fail("timestamp must be a number");
  }
  p.timestamp = obj["timestamp"].get<double>();
  if (!std::isfinite(p.timestamp)) throw fail("timestamp must be finite");

  if (obj.contains("text")) {
    if (!obj["text"].is_string()) throw fail("text must be a string");
    p.text = obj["text"].get<std::string>();
  } else if (obj.contains("token_ids")) {
    if (!obj["token_ids"].is_array()) throw fail("token_ids must be an array");
    std::ostringstream os;
    bool first = true;
    for (const json& t : obj["token_ids"]) {
      if (!t.is_number_integer()) throw fail("token_ids must hold integers");
      if (!first) os << ' ';
      os << "tok" << t.get<long long>();
      first = false;
    }
    p.text = os.str();
  } else {
    throw fail("missing text or token_ids");
  }

  if (!obj.contains("stance") || !obj["stance"].is_number_integer()) {
    throw fail("stance must be an integer");
  }
  const long long stance = obj["stance"].get<long long>();
  if (stance < 0 || stance > 2) throw fail("stance " + std::to_string(stance) + " not in {0,1,2}");
  p.stance = static_cast<int>(stance);

  if (obj.contains("neighbors")) {
    if (!obj["neighbors"].is_array()) throw fail("neighbors must be an array");
    for (const json& n : obj["neighbors"]) {
      if (n.is_string()) {
        p.neighbors.push_back(n.get<std::string>());
      } else if (n.is_number_integer()) {
        p.neighbors.push_back(std::to_string(n.get<long long>()));
      } else {
        throw fail("neighbors must hold user ids");
      }
    }
  }
  if (obj.contains("topic") && obj["topic"].is_number_integer()) {
    p.topic = obj["topic"].get<int>();
  }
  return p;
}

}  // namespace

LoadResult parse_jsonl(std::string_view content) {
  LoadResult out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < content.size()) {
    std::size_t end = content.find('\n', pos);
    if (end == std::string_view::npos) end = content.size();
    std::string_view line = content.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError("line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
    }
    out.posts.push_back(parse_post(obj, line_no));
  }
  std::stable_sort(out.posts.begin(), out.posts.end(), [](const Post& a, const Post& b) {
    return a.user_id != b.user_id ? a.user_id < b.user_id : a.timestamp < b.timestamp;
  });
  for (std::size_t i = 1; i < out.posts.size(); ++i) {
    Post& cur = out.posts[i];
    const Post& prev = out.posts[i - 1];
    if (cur.user_id == prev.user_id && cur.timestamp <= prev.timestamp) {
      cur.timestamp = prev.timestamp + 1e-6;
      ++out.shifted_duplicates;
    }
  }
  return out;
}

LoadResult load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_jsonl(buf.str());
}

void write_jsonl(const std::filesystem::path& path, std::span<const Post> posts) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const Post& p : posts) {
    json obj;
    obj["user_id"] = p.user_id;
    obj["timestamp"] = p.timestamp;
    obj["text"] = p.text;
    obj["stance"] = p.stance;
    obj["neighbors"] = p.neighbors;
    if (p.topic >= 0) obj["topic"] = p.topic;
    out << obj.dump() << '\n';
  }
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) tokens.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

Vocabulary build_vocab(std::span<const Post> corpus, std::size_t max_size) {
  std::map<std::string, std::size_t> counts;
  for (const Post& p : corpus)
    for (std::string& t : tokenize(p.text)) ++counts[std::move(t)];
  counts.erase(std::string(Vocabulary::kPadWord));
  counts.erase(std::string(Vocabulary::kUnkWord));

  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary vocab;
  const std::size_t keep = max_size > 2 ? max_size - 2 : 0;
  for (std::size_t i = 0; i < ranked.size() && i < keep; ++i) vocab.add(ranked[i].first);
  return vocab;
}

void assign_tokens(std::span<Post> posts, const Vocabulary& vocab, std::size_t max_tweet_len) {
  for (Post& p : posts) {
    std::vector<std::string> tokens = tokenize(p.text);
    if (tokens.size() > max_tweet_len) tokens.resize(max_tweet_len);
    p.token_ids.clear();
    for (const std::string& t : tokens) p.token_ids.push_back(vocab.id_of(t));
    if (p.token_ids.empty()) p.token_ids.push_back(Vocabulary::kUnk);
    std::map<TokenId, double> tf;
    for (TokenId id : p.token_ids)
      if (id > Vocabulary::kUnk) tf[id] += 1.0;
    p.bow.assign(tf.begin(), tf.end());
  }
}

ad::Matrix dense_bow(const Post& post, std::size_t vocab_size) {
  ad::Matrix m(1, vocab_size);
  for (const auto& [id, count] : post.bow) {
    if (static_cast<std::size_t>(id) >= vocab_size) {
      throw std::out_of_range("bag of words id " + std::to_string(id) + " >= vocab size " +
                              std::to_string(vocab_size));
    }
    m[static_cast<std::size_t>(id)] = count;
  }
  return m;
}

std::vector<UserPosts> group_by_user(std::span<const Post> posts) {
  std::vector<UserPosts> out;
  for (std::size_t i = 0; i < posts.size(); ++i) {
    if (out.empty() || out.back().user_id != posts[i].user_id) {
      if (!out.empty() && posts[i].user_id < out.back().user_id) {
        throw DataError("posts are not sorted by user_id");
      }
      out.push_back({posts[i].user_id, {}});
    }
    out.back().posts.push_back(i);
  }
  return out;
}

void compute_intervals(std::span<Post> posts) {
  for (std::size_t i = 0; i < posts.size(); ++i) {
    if (i > 0 && posts[i].user_id == posts[i - 1].user_id) {
      const double dt = posts[i].timestamp - posts[i - 1].timestamp;
      if (!(dt > 0)) {
        throw DataError("non-increasing timestamps for user " + posts[i].user_id + " at " +
                        std::to_string(posts[i].timestamp));
      }
      posts[i].interval = dt;
    } else {
      posts[i].interval = 0.0;
    }
  }
}

std::vector<std::pair<std::size_t, std::size_t>> window_ranges(std::size_t n, std::size_t max_len,
                                                               std::size_t stride) {
  if (max_len == 0 || stride == 0) throw std::invalid_argument("window: max_len and stride >= 1");
  if (n <= max_len) return {{0, n}};
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t s = 0; s + max_len <= n; s += stride) out.emplace_back(s, max_len);
  return out;
}

std::vector<EventSequence> filter_and_window(std::span<const UserPosts> users,
                                             std::size_t min_posts, std::size_t max_len,
                                             std::size_t stride) {
  std::vector<EventSequence> out;
  for (const UserPosts& u : users) {
    if (u.posts.size() < min_posts || u.posts.empty()) continue;
    for (auto [start, len] : window_ranges(u.posts.size(), max_len, stride)) {
      EventSequence seq;
      seq.user_id = u.user_id;
      seq.posts.assign(u.posts.begin() + static_cast<std::ptrdiff_t>(start),
                       u.posts.begin() + static_cast<std::ptrdiff_t>(start + len));
      out.push_back(std::move(seq));
    }
  }
  return out;
}

std::size_t test_count(std::size_t n, double train_frac) {
  if (n == 0) return 0;
  const double held = (1.0 - train_frac) * static_cast<double>(n);
  auto k = static_cast<std::size_t>(std::ceil(held - 1e-9));
  return std::min(k, n - 1);
}

std::vector<UserSplit> split_train_test(std::span<const UserPosts> users, double train_frac) {
  std::vector<UserSplit> out;
  out.reserve(users.size());
  for (const UserPosts& u : users) {
    const std::size_t held = test_count(u.posts.size(), train_frac);
    const std::size_t keep = u.posts.size() - held;
    UserSplit s;
    s.train.user_id = u.user_id;
    s.train.posts.assign(u.posts.begin(), u.posts.begin() + static_cast<std::ptrdiff_t>(keep));
    for (std::size_t j = keep; j < u.posts.size(); ++j) s.targets.push_back(j);
    out.push_back(std::move(s));
  }
  return out;
}

NeighborIndex::NeighborIndex(std::span<const Post> posts) : posts_(posts) {
  std::unordered_map<std::string, std::set<std::string>> nb;
  for (std::size_t i = 0; i < posts.size(); ++i) {
    by_user_[posts[i].user_id].push_back(i);
    auto& s = nb[posts[i].user_id];
    for (const std::string& n : posts[i].neighbors)
      if (n != posts[i].user_id) s.insert(n);
  }
  for (auto& [user, list] : by_user_) {
    std::stable_sort(list.begin(), list.end(), [&](std::size_t a, std::size_t b) {
      return posts_[a].timestamp < posts_[b].timestamp;
    });
  }
  for (auto& [user, s] : nb) neighbors_[user].assign(s.begin(), s.end());
}

std::vector<std::size_t> NeighborIndex::queue(const std::string& user, double before,
                                              std::size_t L) const {
  std::vector<std::size_t> candidates;
  auto nit = neighbors_.find(user);
  if (nit == neighbors_.end() || L == 0) return candidates;
  for (const std::string& v : nit->second) {
    auto pit = by_user_.find(v);
    if (pit == by_user_.end()) continue;
    const auto& list = pit->second;
    auto end = std::lower_bound(list.begin(), list.end(), before, [&](std::size_t idx, double t) {
      return posts_[idx].timestamp < t;
    });
    const auto avail = static_cast<std::size_t>(end - list.begin());
    const std::size_t take = std::min(avail, L);
    candidates.insert(candidates.end(), end - static_cast<std::ptrdiff_t>(take), end);
  }
  std::sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
    return posts_[a].timestamp != posts_[b].timestamp ? posts_[a].timestamp < posts_[b].timestamp
                                                      : a < b;
  });
  if (candidates.size() > L) {
    candidates.erase(candidates.begin(),
                     candidates.end() - static_cast<std::ptrdiff_t>(L));
  }
  return candidates;
}

void attach_neighbor_queues(std::span<EventSequence> sequences, std::span<const Post> posts,
                            std::size_t L) {
  NeighborIndex index(posts);
  for (EventSequence& seq : sequences) {
    seq.queues.clear();
    for (std::size_t p : seq.posts) {
      seq.queues.push_back(index.queue(seq.user_id, posts[p].timestamp, L));
    }
  }
}

TimeTransform parse_time_transform(std::string_view name) {
  if (name == "log1p") return TimeTransform::kLog1p;
  if (name == "linear") return TimeTransform::kLinear;
  throw std::invalid_argument("unknown time transform '" + std::string(name) +
                              "' (expected log1p or linear)");
}

double to_model_time(double natural, TimeTransform t) {
  return t == TimeTransform::kLog1p ? std::log1p(natural) : natural;
}

double to_natural_time(double model, TimeTransform t) {
  return t == TimeTransform::kLog1p ? std::expm1(model) : model;
}

std::vector<double> transform_intervals(std::span<const double> timestamps, TimeTransform t) {
  std::vector<double> out;
  out.reserve(timestamps.size());
  for (std::size_t i = 0; i < timestamps.size(); ++i) {
    if (i == 0) {
      out.push_back(0.0);
      continue;
    }
    const double dt = timestamps[i] - timestamps[i - 1];
    if (!(dt > 0)) {
      throw DataError("transform_intervals: non-increasing timestamps at index " +
                      std::to_string(i));
    }
    out.push_back(to_model_time(dt, t));
  }
  return out;
}

PreparedData prepare_dataset(std::vector<Post> posts, const PrepareOptions& opts,
                             std::uint64_t seed, const Vocabulary* vocab) {
  if (opts.max_len < 2) throw std::invalid_argument("max_len must be >= 2");
  compute_intervals(posts);
  PreparedData out;
  out.posts = std::move(posts);

  std::vector<UserPosts> kept;
  for (UserPosts& u : group_by_user(out.posts))
    if (u.posts.size() >= opts.min_posts && u.posts.size() >= 2) kept.push_back(std::move(u));
  const std::vector<UserSplit> splits = split_train_test(kept, opts.train_frac);

  if (vocab) {
    out.vocab = *vocab;
  } else {
    std::vector<Post> corpus;
    for (const UserSplit& s : splits)
      for (std::size_t p : s.train.posts) corpus.push_back(out.posts[p]);
    out.vocab = build_vocab(corpus, opts.vocab_size);
  }
  assign_tokens(out.posts, out.vocab, opts.max_tweet_len);

  std::vector<EventSequence> train;
  for (std::size_t k = 0; k < splits.size(); ++k) {
    const UserSplit& s = splits[k];
    const UserPosts& all = kept[k];
    out.users.push_back(all.user_id);
    if (s.train.posts.size() >= 2) {
      for (auto [start, len] : window_ranges(s.train.posts.size(), opts.max_len, opts.stride)) {
        EventSequence seq;
        seq.user_id = all.user_id;
        seq.posts.assign(s.train.posts.begin() + static_cast<std::ptrdiff_t>(start),
                         s.train.posts.begin() + static_cast<std::ptrdiff_t>(start + len));
        train.push_back(std::move(seq));
      }
    }
    for (std::size_t j : s.targets) {
      const std::size_t start = j + 1 >= opts.max_len ? j + 1 - opts.max_len : 0;
      EventSequence seq;
      seq.user_id = all.user_id;
      seq.posts.assign(all.posts.begin() + static_cast<std::ptrdiff_t>(start),
                       all.posts.begin() + static_cast<std::ptrdiff_t>(j + 1));
      out.test.push_back(std::move(seq));
    }
  }

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  auto rng = substream(seed, "split");
  for (std::size_t i = order.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  const auto n_val = static_cast<std::size_t>(std::floor(opts.val_frac * static_cast<double>(train.size())));
  std::vector<bool> is_val(train.size(), false);
  for (std::size_t i = 0; i < n_val; ++i) is_val[order[i]] = true;
  for (std::size_t i = 0; i < train.size(); ++i)
    (is_val[i] ? out.validation : out.train).push_back(std::move(train[i]));

  attach_neighbor_queues(out.train, out.posts, opts.queue_len);
  attach_neighbor_queues(out.validation, out.posts, opts.queue_len);
  attach_neighbor_queues(out.test, out.posts, opts.queue_len);
  return out;
}

}  // namespace ntom
