#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <sstream>
#include <string>

#include "autointerp/activation_store.hpp"
#include "autointerp/gateway.hpp"
#include "autointerp/mock/server.hpp"
#include "autointerp/mock/world.hpp"

namespace autointerp::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    for (;;) {
      path_ = std::filesystem::temp_directory_path() /
              ("autointerp-test-" + std::to_string(rd()) + std::to_string(rd()));
      if (std::filesystem::create_directory(path_)) break;
    }
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << content;
}

inline CacheManifest small_manifest(std::uint32_t context_len, std::uint32_t n_features) {
  CacheManifest m;
  m.model_id = "test-model";
  m.sae_id = "test-sae";
  m.hook_point = "resid";
  m.context_len = context_len;
  m.n_features = n_features;
  m.tokenizer_id = "test-tok";
  return m;
}

/// Planted world, its cache on disk, and a running mock server.
struct MockEnv {
  explicit MockEnv(mock::WorldConfig world_config = small_world(), mock::MockOptions options = {})
      : world(std::make_shared<const mock::PlantedWorld>(mock::PlantedWorld::generate(world_config))),
        server(world, std::move(options)) {
    world->write_cache(dir.path() / "cache");
    cache = std::make_unique<CacheHandle>(open_cache(dir.path() / "cache"));
    server.start();
  }

  static mock::WorldConfig small_world() {
    mock::WorldConfig c;
    c.n_features = 12;
    c.contexts_per_feature = 90;
    c.background_contexts = 400;
    return c;
  }

  Endpoint endpoint(const std::string& model) const { return {server.base_url(), "", model}; }

  TempDir dir;
  std::shared_ptr<const mock::PlantedWorld> world;
  mock::MockServer server;
  std::unique_ptr<CacheHandle> cache;
};

inline GatewayOptions fast_gateway_options() {
  GatewayOptions o;
  o.initial_backoff = std::chrono::milliseconds(1);
  o.max_backoff = std::chrono::milliseconds(4);
  return o;
}

}  // namespace autointerp::testing
