#include "all4one/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "all4one/errors.hpp"
#include "all4one/evaluation.hpp"
#include "all4one/gradcheck_suite.hpp"
#include "all4one/training.hpp"

namespace all4one {

namespace {

// A dataset spec is either a path to a JSON file or inline JSON.
std::optional<DatasetSpec> dataset_arg(const std::string& value) {
  if (value.empty()) return std::nullopt;
  if (value.front() == '{') return parse_dataset_spec(value);
  return load_dataset_spec(value);
}

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"all4one: neighbour, centroid and redundancy contrast self-supervised learning"};
  app.name("all4one");
  app.require_subcommand(1);

  std::string config_path, out_dir = "run";
  auto* train = app.add_subcommand("train", "Train from a JSON config; writes metrics.csv and checkpoint.bin");
  train->add_option("--config", config_path, "TrainConfig JSON file")->required();
  train->add_option("--out", out_dir, "Output directory")->capture_default_str();
  std::size_t log_every = 100;
  train->add_option("--log-every", log_every, "Progress line interval in steps (0: silent)")
      ->capture_default_str();

  std::string checkpoint_path, dataset_spec, report_path;
  EvalOptions eval_opts;
  auto* eval = app.add_subcommand("eval", "kNN and linear probes of a checkpoint's frozen encoder");
  eval->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  eval->add_option("--dataset", dataset_spec, "Dataset spec: JSON file or inline JSON");
  eval->add_option("--k", eval_opts.k, "Neighbours for the kNN probe")->capture_default_str();
  eval->add_option("--epochs", eval_opts.linear.epochs, "Linear probe epochs")->capture_default_str();
  eval->add_option("--report", report_path, "Report path (default: report.json next to the checkpoint)");
  bool projector_only = false;
  eval->add_flag("--projector-only", projector_only, "Skip the encoder-output probes");

  std::string module;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  gradcheck->add_option("--module", module, "Run one module only");

  std::string export_out, split_name = "train";
  bool encoder_output = false;
  auto* exp = app.add_subcommand("export", "Write frozen embeddings as CSV (id,label,z...)");
  exp->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  exp->add_option("--out", export_out, "CSV output path")->required();
  exp->add_option("--dataset", dataset_spec, "Dataset spec: JSON file or inline JSON");
  exp->add_option("--split", split_name, "train or test")
      ->check(CLI::IsMember({"train", "test"}))
      ->capture_default_str();
  exp->add_flag("--encoder", encoder_output, "Export encoder outputs instead of projections");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    if (argc > 1) err << "error: " << e.what() << "\n\n";
    err << app.help();
    return kExitUsage;
  }

  try {
    if (*train) {
      const TrainConfig cfg = load_config(config_path);
      const auto result = run_training(cfg, out_dir, [&](const StepMetrics& m) {
        if (log_every > 0 && (m.step % log_every == 0 || m.step == cfg.steps)) {
          out << "step " << m.step << " l_total " << fmt(m.l_total) << " nn_top1 "
              << fmt(m.nn_retrieval_top1, "%.3f") << " lr " << fmt(m.lr, "%.4g") << " queue "
              << m.queue_fill << " std " << fmt(m.embedding_std, "%.4f") << '\n';
        }
      });
      out << "metrics: " << result.metrics_csv.string() << '\n'
          << "checkpoint: " << result.checkpoint.string() << '\n';
    } else if (*eval) {
      const Checkpoint ckpt = read_checkpoint(checkpoint_path);
      eval_opts.encoder_probes = !projector_only;
      const ProbeReport report = evaluate_checkpoint(ckpt, dataset_arg(dataset_spec), eval_opts);
      const std::filesystem::path path =
          report_path.empty() ? std::filesystem::path(checkpoint_path).parent_path() / "report.json"
                              : std::filesystem::path(report_path);
      std::ofstream os(path, std::ios::trunc);
      if (!os) throw IoError("cannot open report for writing: " + path.string());
      os << report.to_json() << '\n';
      out << report.to_json() << '\n';
    } else if (*gradcheck) {
      bool ok = true;
      for (const auto& r : run_gradcheck(module)) {
        out << r.module << " max_rel_error " << fmt(r.max_rel_error, "%.3e") << " entries " << r.entries
            << (r.passed() ? " ok" : " FAIL") << '\n';
        ok = ok && r.passed();
      }
      if (!ok) {
        err << "gradcheck: tolerance " << fmt(kGradcheckTolerance, "%.0e") << " exceeded\n";
        return kExitNumeric;
      }
    } else if (*exp) {
      const Checkpoint ckpt = read_checkpoint(checkpoint_path);
      export_embeddings(ckpt, export_out, dataset_arg(dataset_spec),
                        split_name == "test" ? ExportSplit::kTest : ExportSplit::kTrain, encoder_output);
      out << "embeddings: " << export_out << '\n';
    }
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitOk;
}

int cli_main(int argc, const char* const* argv) { return cli_main(argc, argv, std::cout, std::cerr); }

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"all4one"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace all4one
