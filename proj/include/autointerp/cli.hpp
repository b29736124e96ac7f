#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "autointerp/explainer.hpp"
#include "autointerp/gateway.hpp"
#include "autointerp/sampling.hpp"

namespace autointerp::cli {

struct Roles {
  Endpoint explainer;
  Endpoint judge;
  Endpoint base;
  Endpoint embedder;
  Endpoint subject;
};

struct RunConfig {
  std::string command;
  std::filesystem::path cache;
  std::filesystem::path vocab;  // empty = <cache>/vocab.json
  std::string features = "all";
  std::filesystem::path out = "out";
  std::uint64_t seed = 0;
  Roles roles;

  // explain
  SamplerConfig sampler;
  PromptVariant variant = PromptVariant::plain;
  std::uint64_t min_fires = 200;

  // score
  std::vector<std::string> methods;
  std::size_t n_activating = 100;
  std::size_t n_nonactivating = 100;
  std::uint32_t eval_window = 32;
  std::size_t batch_size = 5;
  std::filesystem::path interpretations;  // empty = <out>/interpretations.jsonl
  bool shuffle_interpretations = false;
  bool simulation_tbt = false;

  // intervene
  std::vector<double> target_kl;
  std::string mode = "additive";

  // analyze
  std::filesystem::path scores;  // empty = <out>/scores.jsonl

  // cost
  std::vector<std::filesystem::path> usage_files;
  double n_features = 100000;
  std::optional<double> input_price;   // $ per million tokens
  std::optional<double> output_price;  // $ per million tokens
  std::vector<std::string> model_prices;  // "model=in,out", $ per million tokens

  // execution
  std::size_t max_in_flight = 16;
  std::size_t workers = 8;
  int retries = 3;
  std::string gateway_cache;  // empty = <out>/gateway-cache, "none" disables
};

/// "all", or a comma list of ids and inclusive ranges ("0-9,12,40-41").
/// Result is sorted and deduplicated. Throws ConfigError on malformed input or
/// ids >= n_features.
std::vector<std::uint32_t> parse_features(const std::string& spec, std::uint32_t n_features);

/// Parses argv (argv[0] = program name) and runs the selected subcommand.
/// Returns 0 on success, 2 on usage or configuration errors, 1 on other errors.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace autointerp::cli
