#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "smolora/cli.hpp"

using namespace smolora;
using nlohmann::json;

namespace {

// Copies a flag into the override object only when it was given.
template <typename T>
void override_if_set(json& j, const CLI::Option* opt, const char* key, const T& value) {
  if (opt->count() > 0) j[key] = value;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Separable mixture-of-LoRA continual instruction tuning on a synthetic task stream"};
  app.require_subcommand(1);

  // generate
  StreamConfig gen;
  std::string gen_out;
  std::string gen_mode = "single";
  auto* generate = app.add_subcommand("generate", "Write a synthetic task stream as JSON Lines");
  generate->add_option("--seed", gen.seed, "Generator seed");
  generate->add_option("--tasks", gen.tasks, "Number of tasks (>= 2)")->check(CLI::Range(2, 1000));
  generate->add_option("--mode", gen_mode, "Instruction templates per task")->check(CLI::IsMember({"single", "multi"}));
  generate->add_option("--out", gen_out, "Output path")->required();
  generate->add_option("--train-per-task", gen.train_per_task)->check(CLI::PositiveNumber);
  generate->add_option("--test-per-task", gen.test_per_task)->check(CLI::PositiveNumber);
  generate->add_option("--visual-dim", gen.visual_dim)->check(CLI::PositiveNumber);
  generate->add_option("--classes", gen.class_count)->check(CLI::Range(2, 1000));
  generate->add_option("--stddev", gen.cluster_stddev)->check(CLI::NonNegativeNumber);
  generate->add_option("--embedding-dim", gen.embedding_dim)->check(CLI::PositiveNumber);

  // train
  cli::TrainOptions train;
  std::uint64_t seed = 0;
  double lr = 0.0;
  std::size_t batch = 0, epochs = 0, hidden = 0, vu = 0, iff = 0, rank = 0, top_k = 0;
  int routing_layer = 0;
  std::optional<std::size_t> threads;
  auto* tr = app.add_subcommand("train", "Train adapters sequentially over a stream and write run outputs");
  tr->add_option("--stream", train.stream_path, "Stream JSONL from 'generate'")->required();
  tr->add_option("--method", train.method, "seqlora | molora | smolora")->required();
  tr->add_option("--out-dir", train.out_dir, "Run output directory")->required();
  auto* config_opt = tr->add_option("--config", "Flat JSON file overriding run settings");
  auto* o_seed = tr->add_option("--seed", seed);
  auto* o_lr = tr->add_option("--lr", lr)->check(CLI::PositiveNumber);
  auto* o_batch = tr->add_option("--batch-size", batch)->check(CLI::PositiveNumber);
  auto* o_epochs = tr->add_option("--epochs", epochs);
  auto* o_hidden = tr->add_option("--hidden", hidden)->check(CLI::Range(2, 100000));
  auto* o_vu = tr->add_option("--vu-blocks", vu)->check(CLI::PositiveNumber);
  auto* o_if = tr->add_option("--if-blocks", iff)->check(CLI::PositiveNumber);
  auto* o_rank = tr->add_option("--rank", rank)->check(CLI::PositiveNumber);
  auto* o_topk = tr->add_option("--top-k", top_k)->check(CLI::PositiveNumber);
  auto* o_layer = tr->add_option("--routing-layer", routing_layer, "Layer whose routing goes to routing.csv")
                      ->check(CLI::NonNegativeNumber);
  auto* o_threads = tr->add_option("--threads", threads, "Evaluation threads (default $SMOLORA_THREADS or 1)")
                        ->check(CLI::PositiveNumber);

  // metrics
  std::string acc_path;
  std::optional<std::string> records_path;
  auto* met = app.add_subcommand("metrics", "Recompute AP/MAP/BWT/MIF from run files");
  met->add_option("--accuracy", acc_path, "Accuracy matrix CSV")->required();
  met->add_option("--records", records_path, "Evaluation records JSONL (enables MIF)");

  // report
  std::vector<std::string> run_dirs;
  std::string report_out;
  auto* rep = app.add_subcommand("report", "Summarize one or more run directories");
  rep->add_option("runs", run_dirs, "Run directories written by 'train'")->required();
  rep->add_option("--out-dir", report_out, "Where to write stage_series.csv and summary.txt (default: first run)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return cli::kUsage;
  }

  try {
    if (generate->parsed()) {
      gen.mode = parse_instruction_mode(gen_mode);
      std::cout << cli::cmd_generate(gen, gen_out).dump() << '\n';
    } else if (tr->parsed()) {
      if (config_opt->count() > 0) train.config_path = config_opt->as<std::string>();
      train.threads = threads ? *threads : cli::threads_from_env();
      json& ov = train.overrides;
      override_if_set(ov, o_seed, "seed", seed);
      override_if_set(ov, o_lr, "learning_rate", lr);
      override_if_set(ov, o_batch, "batch_size", batch);
      override_if_set(ov, o_epochs, "epochs", epochs);
      override_if_set(ov, o_hidden, "hidden", hidden);
      override_if_set(ov, o_vu, "vu_blocks", vu);
      override_if_set(ov, o_if, "if_blocks", iff);
      override_if_set(ov, o_rank, "rank", rank);
      override_if_set(ov, o_topk, "top_k", top_k);
      override_if_set(ov, o_layer, "routing_layer", routing_layer);
      override_if_set(ov, o_threads, "threads", threads.value_or(1));
      const auto summary = cli::cmd_train(train);
      std::cout << report_json(summary.report).dump() << '\n';
    } else if (met->parsed()) {
      std::cout << report_json(cli::cmd_metrics(acc_path, records_path)).dump(2) << '\n';
    } else if (rep->parsed()) {
      std::cout << cli::cmd_report(run_dirs, report_out.empty() ? run_dirs.front() : report_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::exit_code_for(e);
  }
  return cli::kOk;
}
