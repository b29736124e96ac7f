// Serves a planted world over loopback for manual end-to-end runs:
//
//   autointerp_mock_server --cache-dir /tmp/world --features 100
//   autointerp explain --cache /tmp/world --explainer-url http://127.0.0.1:PORT --explainer-model oracle

#include <atomic>
#include <chrono>
#include <csignal>
#include <iostream>
#include <memory>
#include <thread>

#include "CLI11.hpp"
#include "autointerp/mock/server.hpp"
#include "autointerp/mock/world.hpp"

namespace {
std::atomic<bool> stop_requested{false};
void on_signal(int) { stop_requested = true; }
}  // namespace

int main(int argc, char** argv) {
  autointerp::mock::WorldConfig world;
  std::string cache_dir;
  std::string explainer = "oracle", judge = "oracle", base = "oracle", embedder = "oracle";
  bool no_echo = false;

  CLI::App app{"Loopback mock of the inference and subject-service protocols"};
  app.add_option("--cache-dir", cache_dir, "Write the planted cache here before serving");
  app.add_option("--features", world.n_features, "Planted features");
  app.add_option("--seed", world.seed, "World seed");
  app.add_option("--explainer-policy", explainer, "Default policy when the request model names none");
  app.add_option("--judge-policy", judge);
  app.add_option("--base-policy", base);
  app.add_option("--embedder-policy", embedder);
  app.add_flag("--no-echo", no_echo, "Reject echoed prompt logprobs");
  CLI11_PARSE(app, argc, argv);

  autointerp::mock::MockOptions options;
  auto policy = [](const std::string& name) {
    auto p = autointerp::mock::Policy::parse(name);
    if (!p) throw std::invalid_argument("unknown policy '" + name + "'");
    return *p;
  };
  try {
    options.explainer = policy(explainer);
    options.judge = policy(judge);
    options.base = policy(base);
    options.embedder = policy(embedder);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  options.faults.echo_supported = !no_echo;

  auto planted = std::make_shared<const autointerp::mock::PlantedWorld>(autointerp::mock::PlantedWorld::generate(world));
  if (!cache_dir.empty()) planted->write_cache(cache_dir);
  autointerp::mock::MockServer server(planted, options);
  server.start();
  std::cout << server.base_url() << std::endl;

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!stop_requested) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
  return 0;
}
