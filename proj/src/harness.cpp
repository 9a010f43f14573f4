#include "civc/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "civc/errors.hpp"

namespace civc::harness {

namespace {

constexpr int kResultSchema = 1;

enum Stream : std::uint64_t { kInit = 1, kExpand = 2, kProjection = 3, kEpoch = 4 };

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(a),
                    static_cast<std::uint32_t>(b)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

struct TrainItem {
  const dataio::Video* video = nullptr;
  const memory::Exemplar* exemplar = nullptr;
};

int predict(const model::Model& model, const dataio::Clip& clip) {
  const auto logits = model::classify(model::global_average(model::extract_features(model.backbone, clip)), model.head);
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

double percent(std::size_t hits, std::size_t total) {
  return total == 0 ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(total);
}

void accumulate(distill::LossBreakdown& sum, const distill::LossBreakdown& b) {
  sum.ce += b.ce;
  sum.fkd += b.fkd;
  sum.sf_kd += b.sf_kd;
  sum.tf_kd += b.tf_kd;
  sum.c_kd += b.c_kd;
  sum.total += b.total;
  sum.correct += b.correct;
}

void scale(distill::LossBreakdown& b, double s) {
  b.ce *= s;
  b.fkd *= s;
  b.sf_kd *= s;
  b.tf_kd *= s;
  b.c_kd *= s;
  b.total *= s;
}

nlohmann::json loss_json(const distill::LossBreakdown& b) {
  return {{"ce", b.ce}, {"fkd", b.fkd}, {"sf_kd", b.sf_kd}, {"tf_kd", b.tf_kd}, {"c_kd", b.c_kd}, {"total", b.total}};
}

/// Mini-batch SGD with momentum, weight decay and gradient-norm clipping over the mixed item list.
void train_loop(model::Model& student, const std::vector<TrainItem>& items, const model::Model* teacher,
                int n_old, distill::TransferMode mode, const distill::DistillConstants& constants,
                const ExperimentConfig& config, const Schedule& schedule, int session_index,
                std::vector<EpochSummary>* trace, const TrainContext& context) {
  require(!items.empty(), "train_loop: no training data");
  const auto& tc = config.training;
  const int segments = config.backbone.segments;
  model::Model grads = model::zeros_like(student);
  model::Model velocity = model::zeros_like(student);
  auto params = model::parameter_views(student);
  auto grad_views = model::parameter_views(grads);
  auto vel_views = model::parameter_views(velocity);

  std::vector<std::size_t> order(items.size());
  std::vector<dataio::Clip> batch;
  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    const double lr = schedule.lr_at(epoch);
    std::mt19937_64 rng(derive_seed(config.seed, kEpoch, static_cast<std::uint64_t>(session_index),
                                    static_cast<std::uint64_t>(epoch)));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    distill::LossBreakdown epoch_sum;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(tc.batch_size));
      batch.clear();
      for (std::size_t i = start; i < end; ++i) {
        const TrainItem& item = items[order[i]];
        if (item.video) {
          batch.push_back(dataio::sample_segments(*item.video, segments, dataio::SampleMode::train, rng()));
        } else {
          batch.push_back(memory::reconstruct_clip(*item.exemplar, segments, dataio::SampleMode::train, &rng));
        }
      }
      for (auto& g : grad_views) std::fill(g.begin(), g.end(), 0.0);
      const auto loss = distill::total_loss(batch, student, teacher, n_old, config.weights, mode, constants, &grads);
      if (!std::isfinite(loss.total))
        throw TrainingDiverged("non-finite loss in session " + std::to_string(session_index) + ", epoch " +
                               std::to_string(epoch) + " (ce " + std::to_string(loss.ce) + ", fkd " +
                               std::to_string(loss.fkd) + ", ckd " + std::to_string(loss.c_kd) + ")");
      double norm2 = 0.0;
      for (const auto& g : grad_views)
        for (double x : g) norm2 += x * x;
      if (!std::isfinite(norm2))
        throw TrainingDiverged("non-finite gradient in session " + std::to_string(session_index) + ", epoch " +
                               std::to_string(epoch));
      const double norm = std::sqrt(norm2);
      const double clip = tc.grad_clip > 0.0 && norm > tc.grad_clip ? tc.grad_clip / norm : 1.0;
      for (std::size_t p = 0; p < params.size(); ++p) {
        auto& w = params[p];
        const auto& g = grad_views[p];
        auto& v = vel_views[p];
        for (std::size_t j = 0; j < w.size(); ++j) {
          v[j] = tc.momentum * v[j] + clip * g[j] + tc.weight_decay * w[j];
          w[j] -= lr * v[j];
        }
      }
      accumulate(epoch_sum, loss);
      ++batches;
    }

    EpochSummary summary;
    summary.epoch = epoch;
    summary.learning_rate = lr;
    summary.train_acc = percent(epoch_sum.correct, items.size());
    summary.loss = epoch_sum;
    scale(summary.loss, 1.0 / static_cast<double>(batches));
    if (trace) trace->push_back(summary);
    if (context.log) {
      nlohmann::json line{{"session", session_index},
                          {"epoch", epoch},
                          {"lr", lr},
                          {"loss", loss_json(summary.loss)},
                          {"train_acc", summary.train_acc}};
      context.log(line.dump());
    }
  }
}

std::uint64_t frame_bytes_of(const std::vector<dataio::Video>& videos, int bytes_per_value) {
  std::uint64_t total = 0;
  for (const auto& v : videos)
    total += static_cast<std::uint64_t>(v.frames.size()) * v.shape.values() * static_cast<std::uint64_t>(bytes_per_value);
  return total;
}

}  // namespace

const char* to_string(Method method) {
  switch (method) {
    case Method::ft: return "ft";
    case Method::joint: return "joint";
    case Method::fused: return "fused";
    case Method::decomposed_pool: return "decomposed-pool";
    case Method::decomposed_traj: return "decomposed-traj";
    case Method::dual_gra: return "dual-gra";
    case Method::full: return "full";
  }
  return "?";
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> methods{Method::ft, Method::joint, Method::fused, Method::decomposed_pool,
                                           Method::decomposed_traj, Method::dual_gra, Method::full};
  return methods;
}

Method parse_method(const std::string& text) {
  for (Method m : all_methods())
    if (text == to_string(m)) return m;
  throw ConfigError("unknown method '" + text +
                    "' (expected ft, joint, fused, decomposed-pool, decomposed-traj, dual-gra or full)");
}

Preset preset_for(Method method) {
  using distill::TransferMode;
  switch (method) {
    case Method::ft: return {TransferMode::none, false, false, false};
    case Method::joint: return {TransferMode::none, false, false, true};
    case Method::fused: return {TransferMode::fused, true, false, false};
    case Method::decomposed_pool: return {TransferMode::pool, true, false, false};
    case Method::decomposed_traj: return {TransferMode::traj, true, false, false};
    case Method::dual_gra: return {TransferMode::fused, true, true, false};
    case Method::full: return {TransferMode::traj, true, true, false};
  }
  throw ConfigError("unknown method");
}

double Schedule::lr_at(int epoch) const {
  double lr = learning_rate;
  for (int m : milestones)
    if (epoch >= m) lr *= factor;
  return lr;
}

void Schedule::validate(const char* name) const {
  const std::string prefix = std::string("harness.") + name;
  if (epochs < 1) throw ConfigError(prefix + "_epochs must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError(prefix + "_lr must be > 0");
  if (!(factor > 0.0)) throw ConfigError(prefix + "_lr_factor must be > 0");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (milestones[i] < 1) throw ConfigError(prefix + "_milestones must be >= 1");
    if (i > 0 && milestones[i] <= milestones[i - 1]) throw ConfigError(prefix + "_milestones must be ascending");
  }
}

void TrainingConfig::validate() const {
  base.validate("base");
  incremental.validate("incremental");
  if (batch_size < 1) throw ConfigError("harness.batch_size must be >= 1");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("harness.momentum must be in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("harness.weight_decay must be >= 0");
  if (!(grad_clip >= 0.0)) throw ConfigError("harness.grad_clip must be >= 0");
}

void ExperimentConfig::validate() const {
  benchmark.validate();
  backbone.validate();
  if (!(backbone.input == benchmark.frame)) throw ConfigError("model input shape must match dataio frame shape");
  weights.validate();
  if (weights.delta_t >= backbone.segments) throw ConfigError("distill.delta_t must be smaller than model.segments");
  if (temporal_dim < 1) throw ConfigError("distill.temporal_dim must be >= 1");
  memory.validate();
  training.validate();
}

EvalResult evaluate(const model::Model& model, const std::vector<std::vector<dataio::Video>>& test_sets) {
  EvalResult out;
  std::size_t hits_all = 0, total_all = 0;
  for (const auto& set : test_sets) {
    std::size_t hits = 0;
    for (const auto& video : set) {
      const auto clip = dataio::sample_segments(video, model.backbone.config.segments, dataio::SampleMode::eval);
      if (predict(model, clip) == video.label) ++hits;
    }
    out.per_set.push_back(percent(hits, set.size()));
    out.per_set_size.push_back(set.size());
    hits_all += hits;
    total_all += set.size();
  }
  out.overall = percent(hits_all, total_all);
  return out;
}

double forgetting_rate(const std::vector<SessionResult>& results) {
  require(!results.empty(), "forgetting_rate: no sessions completed");
  return results.front().acc_on_first - results.back().acc_on_first;
}

model::Model train_base_session(const std::vector<dataio::Video>& train, int num_classes,
                                const ExperimentConfig& config, std::vector<EpochSummary>* trace,
                                const TrainContext& context) {
  if (train.empty()) throw ConfigError("base session has no training data");
  require(num_classes >= 1, "train_base_session: need at least one class");
  model::Model m;
  m.backbone = model::init_backbone(config.backbone, derive_seed(config.seed, kInit, 0));
  m.head = model::init_classifier(config.backbone.feature_channels(), num_classes,
                                  derive_seed(config.seed, kInit, 1));
  std::vector<TrainItem> items;
  for (const auto& v : train) {
    require(v.label >= 0 && v.label < num_classes, "train_base_session: label outside the classifier");
    items.push_back({&v, nullptr});
  }
  const Schedule& schedule = context.schedule ? *context.schedule : config.training.base;
  train_loop(m, items, nullptr, 0, distill::TransferMode::none, {}, config, schedule, context.session_index,
             trace, context);
  return m;
}

model::Model train_incremental_session(const model::Model& previous, const dataio::Session& session,
                                       const memory::ExemplarStore* store, const ExperimentConfig& config,
                                       std::vector<EpochSummary>* trace, const TrainContext& context) {
  const Preset preset = preset_for(config.method);
  if (preset.replay && store == nullptr)
    throw ConfigError(std::string("method ") + to_string(config.method) + " replays exemplars but no memory was given");
  if (session.train.empty()) throw ConfigError("incremental session has no training data");
  const int n_old = previous.head.num_classes();
  const int n_new = static_cast<int>(session.labels.size());
  for (int i = 0; i < n_new; ++i)
    require(session.labels[static_cast<std::size_t>(i)] == n_old + i,
            "train_incremental_session: session labels must extend the label space contiguously");

  model::Model student = previous;
  student.head = model::expand_classifier(previous.head, n_new,
                                          derive_seed(config.seed, kExpand,
                                                      static_cast<std::uint64_t>(context.session_index)));
  std::vector<TrainItem> items;
  for (const auto& v : session.train) items.push_back({&v, nullptr});
  if (preset.replay) {
    for (const auto& [label, list] : store->entries) {
      require(label < n_old, "replayed exemplar does not belong to a previous session");
      for (const auto& ex : list) items.push_back({nullptr, &ex});
    }
  }
  const auto constants = distill::DistillConstants::make(config.weights.delta_t, config.temporal_dim,
                                                         derive_seed(config.seed, kProjection, 0), config.pool);
  const Schedule& schedule = context.schedule ? *context.schedule : config.training.incremental;
  train_loop(student, items, &previous, n_old, preset.transfer, constants, config, schedule,
             context.session_index, trace, context);
  return student;
}

std::string session_result_json(const SessionResult& r) {
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& e : r.loss_trace)
    trace.push_back({{"epoch", e.epoch}, {"lr", e.learning_rate}, {"loss", loss_json(e.loss)}, {"train_acc", e.train_acc}});
  nlohmann::json j{{"schema_version", kResultSchema},
                   {"session_index", r.session_index},
                   {"num_classes", r.num_classes},
                   {"acc_seen", r.acc_seen},
                   {"acc_on_first", r.acc_on_first},
                   {"acc_per_session", r.acc_per_session},
                   {"train_acc", r.train_acc},
                   {"mem_bytes", r.mem_bytes},
                   {"exemplars", r.exemplars},
                   {"loss_trace", trace}};
  return j.dump();
}

std::string summary_json(const RunSummary& s) {
  nlohmann::json j{{"schema_version", kResultSchema},
                   {"method", s.method},
                   {"final_acc", s.final_acc},
                   {"forgetting", s.forgetting},
                   {"mem_bytes", s.mem_bytes},
                   {"acc_curve", s.acc_curve}};
  return j.dump(2) + "\n";
}

void write_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

RunOutput run_benchmark(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  const Preset preset = preset_for(config.method);
  const auto stream = dataio::generate_synthetic_benchmark(config.benchmark, config.seed);
  const auto& out_dir = options.out_dir;

  std::ofstream train_log;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir / "checkpoints");
    train_log.open(*out_dir / "train_log.jsonl", std::ios::trunc);
  }
  TrainContext context;
  if (out_dir) context.log = [&](const std::string& line) { train_log << line << '\n' << std::flush; };

  RunOutput output;
  std::string results_text;
  auto record = [&](SessionResult result, const model::Model& m, const memory::ExemplarStore& store) {
    if (out_dir) {
      model::save_checkpoint(*out_dir / "checkpoints" / ("session_" + std::to_string(result.session_index) + ".ckpt"),
                             m, {options.config_hash, result.session_index, m.head.num_classes()});
      if (preset.replay) memory::save_store(store, *out_dir / "memory" / ("session_" + std::to_string(result.session_index)));
      results_text += session_result_json(result) + "\n";
      write_atomic(*out_dir / "results.jsonl", results_text);
    }
    if (options.hooks.on_session) options.hooks.on_session(result, m, store);
    output.sessions.push_back(std::move(result));
  };

  std::vector<std::vector<dataio::Video>> seen_tests;
  int seen_classes = 0;
  memory::ExemplarStore store;
  memory::MemoryConfig mem_cfg = config.memory;
  mem_cfg.compress = preset.compress;

  if (preset.offline) {
    std::vector<dataio::Video> all_train;
    int total_classes = 0;
    for (const auto& s : stream.sessions) {
      all_train.insert(all_train.end(), s.train.begin(), s.train.end());
      total_classes += static_cast<int>(s.labels.size());
    }
    std::vector<EpochSummary> trace;
    context.session_index = 1;
    const model::Model m = train_base_session(all_train, total_classes, config, &trace, context);
    const double train_acc = evaluate(m, {all_train}).overall;
    const std::uint64_t mem = frame_bytes_of(all_train, config.memory.bytes_per_value);
    for (std::size_t k = 0; k < stream.sessions.size(); ++k) {
      seen_tests.push_back(stream.sessions[k].test);
      seen_classes += static_cast<int>(stream.sessions[k].labels.size());
      const auto eval = evaluate(m, seen_tests);
      SessionResult r;
      r.session_index = static_cast<int>(k) + 1;
      r.num_classes = seen_classes;
      r.acc_seen = eval.overall;
      r.acc_on_first = eval.per_set.front();
      r.acc_per_session = eval.per_set;
      r.train_acc = train_acc;
      r.mem_bytes = mem;
      if (k == 0) r.loss_trace = trace;
      record(std::move(r), m, store);
    }
  } else {
    model::Model current;
    for (std::size_t k = 0; k < stream.sessions.size(); ++k) {
      const auto& session = stream.sessions[k];
      context.session_index = static_cast<int>(k) + 1;
      std::vector<EpochSummary> trace;
      if (k == 0) {
        current = train_base_session(session.train, static_cast<int>(session.labels.size()), config, &trace, context);
      } else {
        const model::Model teacher_copy = current;
        model::Model next = train_incremental_session(current, session, preset.replay ? &store : nullptr, config,
                                                      &trace, context);
        if (!(current == teacher_copy)) throw ContractViolation("teacher parameters changed during training");
        current = std::move(next);
      }
      if (preset.replay) store = memory::update_memory(store, session.train, current.backbone, mem_cfg);
      seen_tests.push_back(session.test);
      seen_classes += static_cast<int>(session.labels.size());
      require(current.head.num_classes() == seen_classes, "classifier width does not match the seen classes");

      const auto eval = evaluate(current, seen_tests);
      SessionResult r;
      r.session_index = static_cast<int>(k) + 1;
      r.num_classes = seen_classes;
      r.acc_seen = eval.overall;
      r.acc_on_first = eval.per_set.front();
      r.acc_per_session = eval.per_set;
      r.train_acc = evaluate(current, {session.train}).overall;
      r.mem_bytes = memory::memory_bytes(store);
      r.exemplars = store.exemplar_count();
      r.loss_trace = std::move(trace);
      record(std::move(r), current, store);
    }
  }

  auto& summary = output.summary;
  summary.method = to_string(config.method);
  summary.final_acc = output.sessions.back().acc_seen;
  summary.forgetting = forgetting_rate(output.sessions);
  summary.mem_bytes = output.sessions.back().mem_bytes;
  for (const auto& r : output.sessions) summary.acc_curve.push_back(r.acc_seen);
  if (out_dir) write_atomic(*out_dir / "summary.json", summary_json(summary));
  return output;
}

}  // namespace civc::harness
