#pragma once

// Run configuration shared by the command-line tool and the Python module.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ntom/config.hpp"
#include "ntom/data.hpp"
#include "ntom/model.hpp"
#include "ntom/training.hpp"

namespace ntom {

/// A split or dataset that should hold items came out empty.
class EmptyResultError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::filesystem::path dataset;
  std::filesystem::path checkpoint = "ntom.ckpt";
  std::filesystem::path log;
  std::filesystem::path embeddings;  // optional "word v1 .. vk" text file
  bool embeddings_trainable = true;
  std::string time_unit = "hours";
  std::uint64_t seed = 0;
  PrepareOptions prepare;
  ModelConfig model;  // vocab_size and user_rows are filled from the data
  TrainOptions train;
};

/// Throws ConfigError naming the offending key.
RunConfig run_config_from(const KeyValues& kv);

/// Documentation of every run config key, one per line.
std::string run_config_help();
std::string sim_config_help();

/// Loads and prepares the dataset named by the config.
PreparedData prepare_from(const RunConfig& cfg, const Vocabulary* vocab = nullptr);

/// Model config for a prepared dataset.
ModelConfig model_config_for(const RunConfig& cfg, const PreparedData& data);

/// Builds a freshly initialised model for the data (loading embeddings when
/// configured).
NtomModel build_model(const RunConfig& cfg, const PreparedData& data);

std::string metrics_json(const Metrics& m, const std::string& time_unit);

/// Metrics of `model` on the held-out posts of the configured dataset plus the
/// majority-stance and constant-interval baselines, as JSON text. Throws
/// EmptyResultError on an empty test split.
std::string evaluation_report(const RunConfig& cfg, NtomModel& model);

}  // namespace ntom
