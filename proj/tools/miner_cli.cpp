// miner: synthetic data generation, mining runs, evaluation, the annotation
// API and run reports.

#include <atomic>
#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "miner/engine.hpp"
#include "miner/error.hpp"
#include "miner/evaluation.hpp"
#include "miner/service.hpp"
#include "miner/synthbench.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::atomic<bool> g_interrupted{false};

void on_signal(int) { g_interrupted = true; }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw miner::Error(miner::ErrorCode::Io, "cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw miner::Error(miner::ErrorCode::MalformedRecord, path.string() + ": " + e.what());
  }
}

// Closes the queue on SIGINT/SIGTERM so a blocked engine unwinds cleanly.
class InterruptWatcher {
 public:
  explicit InterruptWatcher(miner::AnnotationQueue& queue)
      : thread_([&queue](std::stop_token stop) {
          while (!stop.stop_requested()) {
            if (g_interrupted) {
              queue.close();
              return;
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(100));
          }
        }) {}

 private:
  std::jthread thread_;
};

void print_summary(const miner::Engine& engine) {
  std::cout << "terminated: " << engine.termination_reason() << " after " << engine.rounds_completed()
            << " rounds, " << engine.annotations_used() << " annotations, " << engine.pseudo_labeled_count()
            << " pseudo-labeled proposals";
  if (engine.last_map()) std::cout << ", mAP " << *engine.last_map();
  std::cout << '\n';
}

int drive_human(miner::Engine& engine, miner::AnnotationQueue& queue, const std::string& host, int port) {
  miner::AnnotationServer server(queue, engine.state().num_categories);
  const int bound = server.start(host, port);
  std::cerr << "annotation API listening on http://" << host << ':' << bound << "/api/queue\n";
  engine.set_stats_sink([&queue](const miner::QueueStats& s) { queue.set_stats(s); });
  InterruptWatcher watcher(queue);
  try {
    engine.run();
  } catch (const miner::Error& e) {
    if (e.code() != miner::ErrorCode::IncompleteRun) throw;
    std::cerr << "interrupted; resume with: miner serve --rundir <dir>\n";
    return 130;
  }
  print_summary(engine);
  return 0;
}

fs::path latest_checkpoint(const fs::path& run_dir) {
  fs::path best;
  int best_round = -1;
  for (const auto& entry : fs::directory_iterator(run_dir / "checkpoints")) {
    const auto name = entry.path().filename().string();
    if (name.rfind("round-", 0) != 0 || entry.path().extension() != ".json") continue;
    try {
      const int r = std::stoi(name.substr(6));
      if (r > best_round) {
        best_round = r;
        best = entry.path();
      }
    } catch (const std::exception&) {
    }
  }
  if (best.empty()) throw miner::Error(miner::ErrorCode::IncompleteRun, "no checkpoint in " + run_dir.string());
  return best;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised sample mining with active learning for object detection"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic detection dataset");
  std::string spec_path, data_out;
  std::uint64_t gen_seed = 1;
  gen->add_option("--spec", spec_path, "Scene spec JSON")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", data_out, "Output directory")->required();
  gen->add_option("--seed", gen_seed, "Master seed")->required();

  auto* run = app.add_subcommand("run", "Run the mining loop");
  std::string config_path, data_dir, annotator = "simulated", run_out, host = "127.0.0.1";
  std::optional<int> budget;
  int run_port = 8080;
  run->add_option("--config", config_path, "Mining config JSON")->required()->check(CLI::ExistingFile);
  run->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  run->add_option("--annotator", annotator, "simulated or human")
      ->check(CLI::IsMember({"simulated", "human"}));
  run->add_option("--out", run_out, "Run directory")->required();
  run->add_option("--budget", budget, "Total annotation budget")->check(CLI::NonNegativeNumber);
  run->add_option("--port", run_port, "Annotation API port (human annotator)");
  run->add_option("--host", host, "Annotation API bind address");

  auto* eval = app.add_subcommand("eval", "Evaluate a detector checkpoint on the test split");
  std::string checkpoint_path, eval_data;
  eval->add_option("--checkpoint", checkpoint_path, "Detector or engine checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);

  auto* serve = app.add_subcommand("serve", "Resume a human-annotated run and serve the annotation API");
  std::string serve_dir;
  int serve_port = 8080;
  serve->add_option("--rundir", serve_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  serve->add_option("--port", serve_port, "Port")->required();
  serve->add_option("--host", host, "Bind address");

  auto* report = app.add_subcommand("report", "Summarize a finished run");
  std::string report_dir;
  report->add_option("--rundir", report_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);

  try {
    if (*gen) {
      auto spec = miner::scene_spec_from_json(read_json(spec_path));
      spec.seed = gen_seed;
      const auto dataset = miner::generate_dataset(spec);
      miner::save_dataset(dataset, data_out);
      std::cout << "wrote " << dataset.images.size() << " images to " << data_out << '\n';
      return 0;
    }
    if (*run) {
      auto config = miner::mining_config_from_json(read_json(config_path));
      if (budget) config.annotation_budget = *budget;
      miner::validate(config);
      const auto dataset = miner::load_dataset(data_dir);
      fs::create_directories(run_out);
      std::ofstream(fs::path(run_out) / "run.json")
          << json{{"data", fs::absolute(data_dir).string()}, {"annotator", annotator}}.dump(2) << '\n';
      if (annotator == "simulated") {
        miner::SimulatedOracle oracle(dataset);
        miner::Engine engine(config, dataset, oracle, fs::path(run_out));
        engine.run();
        print_summary(engine);
        return 0;
      }
      const auto journal = fs::path(run_out) / "queue.jsonl";
      fs::remove(journal);
      miner::AnnotationQueue queue(journal);
      miner::QueueAnnotator human(queue);
      miner::Engine engine(config, dataset, human, fs::path(run_out));
      return drive_human(engine, queue, host, run_port);
    }
    if (*eval) {
      const auto state = miner::load_detector(checkpoint_path);
      const auto dataset = miner::load_dataset(eval_data);
      const auto test = dataset.split(miner::Split::Test);
      const auto result = miner::evaluate_map(state, test);
      json ap = json::array();
      for (const auto& a : result.per_category) ap.push_back(a ? json(*a) : json(nullptr));
      std::cout << json{{"map", result.map}, {"ap", ap}, {"test_images", test.size()}}.dump(2) << '\n';
      return 0;
    }
    if (*serve) {
      const fs::path dir(serve_dir);
      const auto meta = read_json(dir / "run.json");
      const auto dataset = miner::load_dataset(meta.at("data").get<std::string>());
      miner::AnnotationQueue queue(dir / "queue.jsonl");
      miner::QueueAnnotator human(queue);
      auto engine = miner::Engine::resume(latest_checkpoint(dir), dataset, human, dir);
      if (engine->terminated()) {
        print_summary(*engine);
        return 0;
      }
      return drive_human(*engine, queue, host, serve_port);
    }
    if (*report) {
      const auto r = miner::write_report(report_dir);
      std::cout << miner::render_report(r);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
