#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "civc/dataio.hpp"
#include "civc/distill.hpp"
#include "civc/memory.hpp"
#include "civc/model.hpp"

namespace civc::harness {

enum class Method { ft, joint, fused, decomposed_pool, decomposed_traj, dual_gra, full };

const char* to_string(Method method);
Method parse_method(const std::string& text);
const std::vector<Method>& all_methods();

/// What a preset switches on.
struct Preset {
  distill::TransferMode transfer = distill::TransferMode::none;
  bool replay = false;
  bool compress = false;  // key-frame compression of stored exemplars
  bool offline = false;   // joint training on every class at once
};
Preset preset_for(Method method);

/// Step schedule: lr * factor^(number of milestones <= epoch).
struct Schedule {
  int epochs = 50;
  double learning_rate = 0.1;
  std::vector<int> milestones{35, 45};
  double factor = 0.1;

  double lr_at(int epoch) const;
  void validate(const char* name) const;
  bool operator==(const Schedule&) const = default;
};

struct TrainingConfig {
  Schedule base{50, 0.1, {35, 45}, 0.1};
  Schedule incremental{25, 0.05, {17, 22}, 0.1};
  int batch_size = 16;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;  ///< global L2 norm cap on the loss gradient, 0 disables

  void validate() const;
  bool operator==(const TrainingConfig&) const = default;
};

struct ExperimentConfig {
  dataio::BenchmarkConfig benchmark;
  model::BackboneConfig backbone;
  Method method = Method::full;
  distill::LossWeights weights;
  distill::PoolOp pool = distill::PoolOp::mean;
  int temporal_dim = 8;  // output width of the trajectory descriptor projection
  memory::MemoryConfig memory;
  TrainingConfig training;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

struct EpochSummary {
  int epoch = 0;
  double learning_rate = 0.0;
  distill::LossBreakdown loss;  // mean over the epoch's batches
  double train_acc = 0.0;       // on the batches as they were trained
};

struct SessionResult {
  int session_index = 1;
  int num_classes = 0;
  double acc_seen = 0.0;
  double acc_on_first = 0.0;
  std::vector<double> acc_per_session;  // accuracy on each seen session's test set
  double train_acc = 0.0;  // eval-mode accuracy on the session's own training videos
  std::uint64_t mem_bytes = 0;
  std::size_t exemplars = 0;
  std::vector<EpochSummary> loss_trace;
};

struct RunSummary {
  std::string method;
  double final_acc = 0.0;
  double forgetting = 0.0;
  std::uint64_t mem_bytes = 0;
  std::vector<double> acc_curve;
};

struct EvalResult {
  std::vector<double> per_set;           // percentages
  std::vector<std::size_t> per_set_size;
  double overall = 0.0;                  // over the union
};

EvalResult evaluate(const model::Model& model, const std::vector<std::vector<dataio::Video>>& test_sets);

/// Accuracy on session 1 at the first result minus the same at the last.
double forgetting_rate(const std::vector<SessionResult>& results);

struct TrainContext {
  int session_index = 1;
  const Schedule* schedule = nullptr;
  std::function<void(const std::string&)> log;  // receives one JSON line per epoch
};

/// CE-only training from scratch. Throws TrainingDiverged on a non-finite loss.
model::Model train_base_session(const std::vector<dataio::Video>& train, int num_classes,
                                const ExperimentConfig& config, std::vector<EpochSummary>* trace = nullptr,
                                const TrainContext& context = {});

/// Expands a copy of `previous` by the session's classes and trains it on the session data plus
/// replayed exemplars, distilling from `previous` as the preset dictates.
model::Model train_incremental_session(const model::Model& previous, const dataio::Session& session,
                                       const memory::ExemplarStore* store, const ExperimentConfig& config,
                                       std::vector<EpochSummary>* trace = nullptr,
                                       const TrainContext& context = {});

struct RunHooks {
  /// Called after each session with the result, the model and the memory as of that session.
  std::function<void(const SessionResult&, const model::Model&, const memory::ExemplarStore&)> on_session;
};

struct RunOptions {
  std::optional<std::filesystem::path> out_dir;
  std::string config_hash;  // stamped into checkpoint headers
  RunHooks hooks;
};

struct RunOutput {
  std::vector<SessionResult> sessions;
  RunSummary summary;
};

/// Full protocol. With `out_dir` set, writes train_log.jsonl, results.jsonl, summary.json,
/// checkpoints/ and memory/; results.jsonl is rewritten after every session.
RunOutput run_benchmark(const ExperimentConfig& config, const RunOptions& options = {});

std::string session_result_json(const SessionResult& result);
std::string summary_json(const RunSummary& summary);

/// Writes `text` to `path` through a temporary file and rename.
void write_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace civc::harness
