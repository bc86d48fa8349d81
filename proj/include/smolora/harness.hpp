#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "smolora/benchmark.hpp"
#include "smolora/errors.hpp"
#include "smolora/metrics.hpp"
#include "smolora/model.hpp"
#include "smolora/optim.hpp"
#include "smolora/random.hpp"
#include "smolora/routing.hpp"

namespace smolora {

// Desk-scale defaults. On the default stream SeqLoRA and SMoLoRA reach >= 90%
// content accuracy on every diagonal cell (MoLoRA lands around 75-90%), and the
// rate is half of where plain SGD starts to diverge.
struct TrainSettings {
  double learning_rate = 0.1;
  std::size_t batch_size = 8;
  std::size_t epochs = 30;
};

// Optimizer settings of the original full-scale recipe. At this model size
// they leave the zero-initialized adapters almost untouched.
inline TrainSettings reference_train_settings() { return {1e-4, 64, 1}; }

struct RunConfig {
  ModelConfig model;  // visual_dim, embedding_dim and class_count come from the stream
  TrainSettings train;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  int routing_layer = 0;
};

struct StepLog {
  int stage = 0;
  std::size_t step = 0;
  double loss = 0.0;
  double rate = 0.0;
};

namespace detail {

inline std::vector<const TaskInstance*> pointers(const std::vector<TaskInstance>& items,
                                                 std::span<const std::size_t> order) {
  std::vector<const TaskInstance*> out;
  out.reserve(order.size());
  for (std::size_t i : order) out.push_back(&items[i]);
  return out;
}

inline Var batch_loss(Tape& tape, const ToyModel& model, std::span<const TaskInstance* const> batch) {
  std::vector<int> classes;
  std::vector<int> formats;
  for (const TaskInstance* inst : batch) {
    classes.push_back(inst->answer_class);
    formats.push_back(inst->format_id);
  }
  const ModelOutput out = model.forward(tape, batch);
  return softmax_cross_entropy(out.content, classes) + softmax_cross_entropy(out.format, formats);
}

}  // namespace detail

// Mean training loss of `data` under the current parameters.
inline double dataset_loss(const ToyModel& model, const std::vector<TaskInstance>& data) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto ptrs = detail::pointers(data, order);
  Tape tape(false);
  return detail::batch_loss(tape, model, ptrs).value()(0, 0);
}

// Shuffled mini-batch SGD over one task's training split. The cosine schedule
// spans exactly the steps of this call.
inline std::vector<StepLog> train_stage(ToyModel& model, const std::vector<TaskInstance>& train,
                                        const TrainSettings& settings, std::uint64_t shuffle_seed,
                                        int stage = 0) {
  if (train.empty()) throw ArgumentError("train_stage: empty training set");
  if (settings.batch_size == 0) throw ArgumentError("train_stage: batch size must be positive");
  std::vector<StepLog> log;
  const std::size_t per_epoch = (train.size() + settings.batch_size - 1) / settings.batch_size;
  const std::size_t total = per_epoch * settings.epochs;
  if (total == 0) return log;
  CosineSchedule schedule(settings.learning_rate, total);
  auto params = model.trainable_parameters();
  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 0; epoch < settings.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(shuffle_seed, epoch));
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += settings.batch_size) {
      const std::size_t end = std::min(order.size(), start + settings.batch_size);
      const auto batch = detail::pointers(train, std::span<const std::size_t>(order).subspan(start, end - start));
      Tape tape;
      Var loss = detail::batch_loss(tape, model, batch);
      const GradientMap grads = tape.backward(loss);
      const double rate = schedule.rate();
      sgd_step(params, grads, rate);
      log.push_back({stage, schedule.current_step(), loss.value()(0, 0), rate});
      schedule.advance();
    }
  }
  return log;
}

struct InstanceOutcome {
  std::size_t instance_index = 0;
  int predicted_class = 0;
  int predicted_format = 0;
  bool content_correct = false;
  bool format_correct = false;
};

struct TaskEvaluation {
  double content_accuracy = 0.0;  // %
  double format_accuracy = 0.0;   // %
  std::vector<InstanceOutcome> outcomes;
  std::vector<RoutingTrace> traces;  // SMoLoRA only, instance-major
};

inline constexpr std::size_t kEvalChunk = 128;

namespace detail {

inline int argmax_column(const Matrix& m, std::size_t c) {
  std::size_t best = 0;
  for (std::size_t r = 1; r < m.rows(); ++r)
    if (m(r, c) > m(best, c)) best = r;
  return static_cast<int>(best);
}

}  // namespace detail

// Predictions for a test split. Work is split into fixed chunks that threads
// pick up round-robin, and results are stored per chunk, so the output does
// not depend on the thread count.
inline TaskEvaluation evaluate_task(const ToyModel& model, const std::vector<TaskInstance>& test,
                                    std::size_t threads = 1, bool collect_traces = false) {
  if (test.empty()) throw ArgumentError("evaluate_task: empty test set");
  const std::size_t chunks = (test.size() + kEvalChunk - 1) / kEvalChunk;
  std::vector<std::vector<InstanceOutcome>> outcomes(chunks);
  std::vector<std::vector<RoutingTrace>> traces(chunks);
  std::vector<std::exception_ptr> errors(chunks);
  const bool tracing = collect_traces && model.kind() == AdapterKind::kSMoLoRA;

  auto run_chunk = [&](std::size_t c) {
    try {
      const std::size_t start = c * kEvalChunk;
      const std::size_t end = std::min(test.size(), start + kEvalChunk);
      std::vector<std::size_t> order(end - start);
      std::iota(order.begin(), order.end(), start);
      const auto batch = detail::pointers(test, order);
      Tape tape(false);
      const ModelOutput out = model.forward(tape, batch, tracing ? &traces[c] : nullptr);
      for (std::size_t b = 0; b < batch.size(); ++b) {
        InstanceOutcome o;
        o.instance_index = start + b;
        o.predicted_class = detail::argmax_column(out.content.value(), b);
        o.predicted_format = detail::argmax_column(out.format.value(), b);
        o.content_correct = o.predicted_class == batch[b]->answer_class;
        o.format_correct = o.predicted_format == batch[b]->format_id;
        outcomes[c].push_back(o);
      }
    } catch (...) {
      errors[c] = std::current_exception();
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, chunks));
  if (workers == 1) {
    for (std::size_t c = 0; c < chunks; ++c) run_chunk(c);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t c = w; c < chunks; c += workers) run_chunk(c);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  TaskEvaluation ev;
  std::size_t content_hits = 0;
  std::size_t format_hits = 0;
  for (std::size_t c = 0; c < chunks; ++c) {
    for (const auto& o : outcomes[c]) {
      content_hits += o.content_correct ? 1 : 0;
      format_hits += o.format_correct ? 1 : 0;
      ev.outcomes.push_back(o);
    }
    for (auto& t : traces[c]) ev.traces.push_back(std::move(t));
  }
  const double n = static_cast<double>(test.size());
  ev.content_accuracy = 100.0 * static_cast<double>(content_hits) / n;
  ev.format_accuracy = 100.0 * static_cast<double>(format_hits) / n;
  return ev;
}

struct RunResult {
  ToyModel model;
  AccuracyMatrix content;
  AccuracyMatrix format;
  std::vector<EvalRecord> records;
  std::vector<StepLog> steps;
  // Final-stage routing traces of every layer, keyed by 1-based task id.
  std::map<int, std::vector<RoutingTrace>> traces;
  MetricReport report;
  bool base_weights_unchanged = false;
};

// Model configuration with the data-dependent sizes taken from the stream.
inline ModelConfig model_config_for(const RunConfig& cfg, const Stream& stream) {
  ModelConfig m = cfg.model;
  m.visual_dim = stream.config.visual_dim;
  m.embedding_dim = stream.config.embedding_dim;
  m.class_count = stream.config.class_count;
  m.format_count = kFormatCount;
  m.seed = cfg.seed;
  return m;
}

namespace detail {

template <typename Fn>
void with_stage(std::size_t stage, Fn&& fn) {
  const std::string prefix = "stage " + std::to_string(stage) + ": ";
  try {
    fn();
  } catch (const ShapeError& e) {
    throw ShapeError(prefix + e.what());
  } catch (const ArgumentError& e) {
    throw ArgumentError(prefix + e.what());
  } catch (const ContractError& e) {
    throw ContractError(prefix + e.what());
  } catch (const NumericError& e) {
    throw NumericError(prefix + e.what());
  }
}

}  // namespace detail

using StageCallback = std::function<void(std::size_t stage, const RunResult&)>;

// Sequential fine-tuning over the stream: stage k trains on task k only, then
// every seen task is evaluated. Adapter parameters carry over between stages.
inline RunResult run_cvit(const RunConfig& cfg, const Stream& stream, const StageCallback& on_stage = {}) {
  const std::size_t T = stream.tasks.size();
  if (T == 0) throw ArgumentError("run_cvit: stream has no tasks");
  RunResult res{ToyModel(model_config_for(cfg, stream)), AccuracyMatrix(T), AccuracyMatrix(T), {}, {}, {}, {}, false};

  std::vector<Matrix> frozen_before;
  for (const Parameter* p : res.model.parameters())
    if (!p->trainable()) frozen_before.push_back(p->value());

  for (std::size_t k = 1; k <= T; ++k) {
    detail::with_stage(k, [&] {
      const auto& data = stream.tasks[k - 1];
      auto log = train_stage(res.model, data.train, cfg.train, derive_seed(cfg.seed, 0x5354414745ULL + k),
                             static_cast<int>(k));
      res.steps.insert(res.steps.end(), log.begin(), log.end());
      for (std::size_t j = 1; j <= k; ++j) {
        const auto& task = stream.tasks[j - 1];
        TaskEvaluation ev = evaluate_task(res.model, task.test, cfg.threads, k == T);
        res.content.set(k, j, ev.content_accuracy);
        res.format.set(k, j, ev.format_accuracy);
        for (const auto& o : ev.outcomes) {
          res.records.push_back({static_cast<int>(k), task.spec.task_id, o.instance_index, o.content_correct,
                                 o.format_correct});
        }
        if (!ev.traces.empty()) res.traces[task.spec.task_id] = std::move(ev.traces);
      }
    });
    if (on_stage) on_stage(k, res);
  }

  std::size_t i = 0;
  res.base_weights_unchanged = true;
  for (const Parameter* p : res.model.parameters()) {
    if (p->trainable()) continue;
    res.base_weights_unchanged = res.base_weights_unchanged && p->value() == frozen_before[i];
    ++i;
  }
  res.report = compute_report(res.content, &res.records);
  return res;
}

// ---------------------------------------------------------------------------
// Fusion statistics
// ---------------------------------------------------------------------------

struct FusionStats {
  int layer = 0;
  double mean_alpha = 0.0;
  double std_alpha = 0.0;
  double mean_beta = 0.0;
  double std_beta = 0.0;
  std::size_t count = 0;
};

// Per-layer mean and population standard deviation of the per-instance
// average fusion weights.
inline std::vector<FusionStats> fusion_statistics(const std::map<int, std::vector<RoutingTrace>>& traces) {
  std::map<int, std::vector<const RoutingTrace*>> by_layer;
  for (const auto& [task, ts] : traces)
    for (const auto& t : ts) by_layer[t.layer_id].push_back(&t);
  std::vector<FusionStats> out;
  for (const auto& [layer, ts] : by_layer) {
    FusionStats s;
    s.layer = layer;
    s.count = ts.size();
    const double n = static_cast<double>(ts.size());
    for (const auto* t : ts) {
      s.mean_alpha += t->alpha_mean;
      s.mean_beta += t->beta_mean;
    }
    s.mean_alpha /= n;
    s.mean_beta /= n;
    for (const auto* t : ts) {
      s.std_alpha += (t->alpha_mean - s.mean_alpha) * (t->alpha_mean - s.mean_alpha);
      s.std_beta += (t->beta_mean - s.mean_beta) * (t->beta_mean - s.mean_beta);
    }
    s.std_alpha = std::sqrt(s.std_alpha / n);
    s.std_beta = std::sqrt(s.std_beta / n);
    out.push_back(s);
  }
  return out;
}

inline void write_fusion_csv(std::ostream& os, const std::vector<FusionStats>& stats) {
  os << "layer,mean_alpha,std_alpha,mean_beta,std_beta\n";
  for (const auto& s : stats) {
    os << s.layer << ',' << format_real(s.mean_alpha) << ',' << format_real(s.std_alpha) << ','
       << format_real(s.mean_beta) << ',' << format_real(s.std_beta) << '\n';
  }
}

inline void write_steps_csv(std::ostream& os, const std::vector<StepLog>& steps) {
  os << "stage,step,loss,rate\n";
  for (const auto& s : steps)
    os << s.stage << ',' << s.step << ',' << format_real(s.loss) << ',' << format_real(s.rate) << '\n';
}

inline std::vector<FusionStats> read_fusion_csv(std::istream& is) {
  std::vector<FusionStats> out;
  for (const auto& [line, c] : detail::read_csv_table(is, {"layer", "mean_alpha", "std_alpha", "mean_beta", "std_beta"})) {
    FusionStats s;
    s.layer = detail::csv_number<int>(c[0], line, 1);
    s.mean_alpha = detail::csv_number<double>(c[1], line, 2);
    s.std_alpha = detail::csv_number<double>(c[2], line, 3);
    s.mean_beta = detail::csv_number<double>(c[3], line, 4);
    s.std_beta = detail::csv_number<double>(c[4], line, 5);
    out.push_back(s);
  }
  return out;
}

inline std::vector<StepLog> read_steps_csv(std::istream& is) {
  std::vector<StepLog> out;
  for (const auto& [line, c] : detail::read_csv_table(is, {"stage", "step", "loss", "rate"})) {
    out.push_back({detail::csv_number<int>(c[0], line, 1), detail::csv_number<std::size_t>(c[1], line, 2),
                   detail::csv_number<double>(c[2], line, 3), detail::csv_number<double>(c[3], line, 4)});
  }
  return out;
}

// Reads write_histogram_csv output. Rows keep the padded width of the file.
inline RoutingHistogram read_histogram_csv(std::istream& is) {
  std::string text;
  if (!std::getline(is, text)) throw FormatError("line 1: empty file", 1);
  const auto header = detail::split_csv_line(text);
  if (header.size() < 3 || detail::trim(header[0]) != "task" || detail::trim(header[1]) != "bank") {
    detail::csv_error(1, 1, "header must be task,bank,block_0,...");
  }
  for (std::size_t i = 2; i < header.size(); ++i) {
    if (detail::trim(header[i]) != "block_" + std::to_string(i - 2)) {
      detail::csv_error(1, i + 1, "expected column 'block_" + std::to_string(i - 2) + "'");
    }
  }
  RoutingHistogram h;
  std::size_t line = 1;
  while (std::getline(is, text)) {
    ++line;
    if (detail::trim(text).empty()) continue;
    const auto c = detail::split_csv_line(text);
    if (c.size() != header.size()) detail::csv_error(line, 1, "wrong number of fields");
    HistogramRow row;
    row.task = detail::csv_number<int>(c[0], line, 1);
    const std::string bank = detail::trim(c[1]);
    if (bank == "vu") {
      row.bank = Bank::kVisual;
    } else if (bank == "if") {
      row.bank = Bank::kInstruction;
    } else {
      detail::csv_error(line, 2, "bank must be 'vu' or 'if'");
    }
    for (std::size_t i = 2; i < c.size(); ++i) row.frequency.push_back(detail::csv_number<double>(c[i], line, i + 1));
    h.rows.push_back(std::move(row));
  }
  return h;
}

// Routing histogram of one layer from a run's final-stage traces.
inline RoutingHistogram run_histogram(const RunResult& r, int layer) {
  return routing_histogram(r.traces, r.model.config().vu_blocks, r.model.config().if_blocks, layer);
}

}  // namespace smolora
