// SPDX-License-Identifier: Apache-2.0
#include "vitptq/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "vitptq/data.hpp"
#include "vitptq/errors.hpp"
#include "vitptq/model_io.hpp"
#include "vitptq/recon.hpp"
#include "vitptq/report.hpp"
#include "vitptq/rng.hpp"
#include "vitptq/train.hpp"

namespace vitptq {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

/// Bad flag combinations detected after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fixed(double v, int digits = 6) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct TrainToyArgs {
  std::string out;
  std::string data_dir;
  std::string preset = "unit";
  std::uint64_t seed = 42;
  std::size_t epochs = 15;
  std::size_t train_samples = 2000;
  std::size_t test_samples = 1000;
  std::size_t calib_samples = 1024;
  double noise = SynthConfig{}.noise;
};

struct CalibrateArgs {
  std::string model, calib, out;
  int bits_w = 4, bits_a = 4;
};

struct QuantizeArgs {
  std::string config, model, calib, out;
  std::optional<int> bits_w, bits_a;
  std::vector<std::size_t> rank_set;
  std::optional<std::size_t> search_iters, calib_iters, batch_size, refresh_every, fixed_rank, record_every;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda0, drop_path, adapter_lr, interval_lr, arch_lr;
  bool no_lowrank = false, no_dfq = false, no_curriculum = false, quiet = false;
};

struct EvalArgs {
  std::string model, data, fp_model, reference, mode = "auto";
  bool json_out = false;
};

struct ReportArgs {
  std::string run, emit = "json", out_dir;
};

int run_train_toy(const TrainToyArgs& a, std::ostream& out, std::ostream& err) {
  ModelConfig mc = a.preset == "integration" ? ModelConfig::integration_toy() : ModelConfig::unit_toy();
  SynthConfig sc;
  sc.seed = a.seed;
  sc.noise = a.noise;
  sc.num_classes = mc.num_classes;
  sc.image_size = mc.image_size;
  sc.channels = mc.channels;
  const Dataset train = synth_dataset(sc, a.train_samples, "train");
  const Dataset test = synth_dataset(sc, a.test_samples, "test");

  Rng rng = Rng::stream(a.seed, "init/model");
  ModelGraph g = ModelGraph::init(mc, rng);
  TrainOptions opts;
  opts.epochs = a.epochs;
  opts.seed = a.seed;
  opts.log = [&](const std::string& s) { err << s << '\n'; };
  train_classifier(g, train, opts);

  // The stored accuracy is that of the model as written (float32 weights).
  const ModelGraph stored = io::round_trip(g);
  const Accuracy acc = evaluate(stored, test, Mode::fp);
  json meta = {{"training",
                {{"seed", a.seed},
                 {"epochs", a.epochs},
                 {"train_samples", a.train_samples},
                 {"dataset", {{"noise", sc.noise}, {"center_jitter", sc.center_jitter}, {"image_size", sc.image_size}}},
                 {"test_samples", acc.samples},
                 {"test_top1", acc.top1},
                 {"test_top5", acc.top5}}}};
  io::save_model(stored, a.out, meta);
  if (!a.data_dir.empty()) {
    fs::create_directories(a.data_dir);
    io::save_dataset(train, fs::path(a.data_dir) / "train.vpt");
    io::save_dataset(test, fs::path(a.data_dir) / "test.vpt");
    io::save_dataset(synth_dataset(sc, a.calib_samples, "calib"), fs::path(a.data_dir) / "calib.vpt");
  }
  out << "top1 " << fixed(acc.top1) << "\ntop5 " << fixed(acc.top5) << "\n";
  return 0;
}

int run_calibrate(const CalibrateArgs& a, std::ostream& out, std::ostream&) {
  const ModelGraph fp = io::load_model(a.model);
  const Dataset calib = io::load_dataset(a.calib);
  const ModelGraph q = recon::minmax_ptq(fp, calib.images, a.bits_w, a.bits_a);
  json meta = {{"calibration", {{"method", "minmax"}, {"bits_w", a.bits_w}, {"bits_a", a.bits_a},
                                {"samples", calib.size()}}}};
  io::save_model(q, a.out, meta);
  out << "wrote " << a.out << '\n';
  return 0;
}

int run_quantize(const QuantizeArgs& a, std::ostream& out, std::ostream& err) {
  io::RunConfig rc = a.config.empty() ? io::RunConfig{} : io::RunConfig::load(a.config);
  json over = json::object();
  if (!a.model.empty()) over["model"] = a.model;
  if (!a.calib.empty()) over["calib"] = a.calib;
  if (a.bits_w) over["bits_w"] = *a.bits_w;
  if (a.bits_a) over["bits_a"] = *a.bits_a;
  if (!a.rank_set.empty()) over["rank_set"] = a.rank_set;
  if (a.search_iters) over["search_iters"] = *a.search_iters;
  if (a.calib_iters) over["calib_iters"] = *a.calib_iters;
  if (a.batch_size) over["batch_size"] = *a.batch_size;
  if (a.refresh_every) over["hardness_refresh_every"] = *a.refresh_every;
  if (a.record_every) over["record_every"] = *a.record_every;
  if (a.fixed_rank) over["fixed_rank"] = *a.fixed_rank;
  if (a.seed) over["seed"] = *a.seed;
  if (a.lambda0) over["lambda0"] = *a.lambda0;
  if (a.drop_path) over["drop_path_rate"] = *a.drop_path;
  if (a.adapter_lr) over["adapter_lr"] = *a.adapter_lr;
  if (a.interval_lr) over["interval_lr"] = *a.interval_lr;
  if (a.arch_lr) over["arch_lr"] = *a.arch_lr;
  if (a.no_lowrank) over["use_lowrank"] = false;
  if (a.no_dfq) over["use_dfq"] = false;
  if (a.no_curriculum) over["use_curriculum"] = false;
  rc = io::RunConfig::from_json(over, rc);
  if (rc.model_path.empty() || rc.calib_path.empty()) throw UsageError("quantize needs --model and --calib");

  const ModelGraph fp = io::load_model(rc.model_path);
  const Dataset calib = io::load_dataset(rc.calib_path);
  recon::ReconConfig cfg = rc.recon;
  if (!a.quiet) cfg.log = [&](const std::string& s) { err << s << '\n'; };
  const recon::QuantizedModel qm = recon::quantize_model(fp, calib.images, cfg);

  json run = rc.to_json();
  io::save_model(qm.graph, a.out, {{"run", run}});
  const std::string report_path = a.out + ".report.json";
  const std::string text = io::report_to_json(qm.report).dump(2) + "\n";
  io::write_file_atomic(report_path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  for (const auto& b : qm.report.blocks) {
    out << "block " << b.index << " baseline " << fixed(b.baseline_loss) << " final " << fixed(b.final_loss)
        << " reparam " << fixed(b.reparam_loss) << '\n';
  }
  out << "wrote " << a.out << " and " << report_path << '\n';
  return 0;
}

int run_eval(const EvalArgs& a, std::ostream& out, std::ostream&) {
  const io::Container c = io::load_container(a.model);
  const ModelGraph g = io::model_from_container(c);
  Mode mode = io::is_quantized(g) ? Mode::quant : Mode::fp;
  if (a.mode == "fp") mode = Mode::fp;
  if (a.mode == "quant") mode = Mode::quant;

  json result = {{"mode", mode == Mode::fp ? "fp" : "quant"}};
  int status = 0;
  if (!a.data.empty()) {
    const Dataset data = io::load_dataset(a.data);
    if (data.num_classes != g.config.num_classes) {
      throw FormatError("dataset has " + std::to_string(data.num_classes) + " classes, model has " +
                        std::to_string(g.config.num_classes));
    }
    const Accuracy acc = evaluate(g, data, mode);
    result["samples"] = acc.samples;
    result["top1"] = acc.top1;
    result["top5"] = acc.top5;
    if (c.meta.contains("training") && mode == Mode::fp) {
      const json& t = c.meta["training"];
      if (t.contains("test_top1")) result["stored_top1"] = t["test_top1"];
    }
    if (!a.fp_model.empty()) {
      const ModelGraph fp = io::load_model(a.fp_model);
      const std::vector<double> losses = block_losses(fp, g, data.images);
      double mean = 0.0;
      for (double l : losses) mean += l;
      result["block_losses"] = losses;
      result["mean_block_loss"] = losses.empty() ? 0.0 : mean / static_cast<double>(losses.size());
    }
  }
  if (!a.reference.empty()) {
    const io::ReferenceCheck r = io::check_reference(g, a.reference);
    result["reference"] = {{"samples", r.samples}, {"max_abs_diff", r.max_abs_diff}, {"tolerance", r.tolerance},
                           {"passed", r.passed()}};
    if (!r.passed()) status = 1;
  }

  if (a.json_out) {
    out << result.dump(2) << '\n';
  } else {
    out << "mode " << result["mode"].get<std::string>() << '\n';
    if (result.contains("top1")) {
      out << "samples " << result["samples"].get<std::size_t>() << "\ntop1 " << fixed(result["top1"].get<double>())
          << "\ntop5 " << fixed(result["top5"].get<double>()) << '\n';
    }
    if (result.contains("stored_top1")) {
      const bool same = result["stored_top1"].get<double>() == result["top1"].get<double>();
      out << "stored top1 " << fixed(result["stored_top1"].get<double>()) << (same ? " (reproduced)" : " (MISMATCH)")
          << '\n';
    }
    if (result.contains("block_losses")) {
      const auto losses = result["block_losses"].get<std::vector<double>>();
      for (std::size_t i = 0; i < losses.size(); ++i) out << "block " << i << " loss " << fixed(losses[i]) << '\n';
      out << "mean block loss " << fixed(result["mean_block_loss"].get<double>()) << '\n';
    }
    if (result.contains("reference")) {
      const json& r = result["reference"];
      out << "reference max_abs_diff " << r["max_abs_diff"].get<double>() << " over " << r["samples"].get<std::size_t>()
          << " samples: " << (r["passed"].get<bool>() ? "ok" : "FAILED") << '\n';
    }
  }
  return status;
}

int run_report(const ReportArgs& a, std::ostream& out, std::ostream&) {
  fs::path path = a.run;
  if (path.extension() != ".json") path += ".report.json";
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  json report;
  try {
    report = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (a.emit == "json") {
    io::report_csv(report);  // validates the structure
    const std::string text = report.dump(2) + "\n";
    if (a.out_dir.empty()) {
      out << text;
    } else {
      fs::create_directories(a.out_dir);
      io::write_file_atomic(fs::path(a.out_dir) / "report.json",
                            std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    }
    return 0;
  }
  const auto tables = io::report_csv(report);
  if (a.out_dir.empty()) {
    bool first = true;
    for (const auto& [name, body] : tables) {
      out << (first ? "" : "\n") << "# " << name << '\n' << body;
      first = false;
    }
    return 0;
  }
  fs::create_directories(a.out_dir);
  for (const auto& [name, body] : tables) {
    io::write_file_atomic(fs::path(a.out_dir) / name,
                          std::span(reinterpret_cast<const std::uint8_t*>(body.data()), body.size()));
    out << "wrote " << (fs::path(a.out_dir) / name).string() << '\n';
  }
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Post-training quantization of vision transformers", "vitptq"};
  app.require_subcommand(1, 1);

  TrainToyArgs tt;
  auto* train = app.add_subcommand("train-toy", "Train the toy ViT on the synthetic dataset and save it");
  train->add_option("--out", tt.out, "Output model container")->required();
  train->add_option("--data-dir", tt.data_dir, "Also write train.vpt, test.vpt and calib.vpt here");
  train->add_option("--preset", tt.preset, "Model size")->check(CLI::IsMember({"unit", "integration"}));
  train->add_option("--seed", tt.seed);
  train->add_option("--epochs", tt.epochs)->check(CLI::PositiveNumber);
  train->add_option("--train-samples", tt.train_samples)->check(CLI::PositiveNumber);
  train->add_option("--test-samples", tt.test_samples)->check(CLI::PositiveNumber);
  train->add_option("--calib-samples", tt.calib_samples)->check(CLI::PositiveNumber);
  train->add_option("--noise", tt.noise, "Pixel noise of the synthetic images")->check(CLI::NonNegativeNumber);

  CalibrateArgs ca;
  auto* calibrate = app.add_subcommand("calibrate", "Min-max uniform post-training quantization (baseline)");
  calibrate->add_option("--model", ca.model)->required();
  calibrate->add_option("--calib", ca.calib, "Calibration dataset container")->required();
  calibrate->add_option("--bits-w", ca.bits_w)->check(CLI::Range(2, 16));
  calibrate->add_option("--bits-a", ca.bits_a)->check(CLI::Range(2, 16));
  calibrate->add_option("--out", ca.out)->required();

  QuantizeArgs qa;
  auto* quantize = app.add_subcommand("quantize", "Full pipeline: rank search, reconstruction, reparameterization");
  quantize->add_option("--config", qa.config, "Run config JSON; flags override it");
  quantize->add_option("--model", qa.model);
  quantize->add_option("--calib", qa.calib, "Calibration dataset container");
  quantize->add_option("--bits-w", qa.bits_w)->check(CLI::Range(2, 16));
  quantize->add_option("--bits-a", qa.bits_a)->check(CLI::Range(2, 16));
  quantize->add_option("--rank-set", qa.rank_set, "Candidate ranks, comma separated")->delimiter(',');
  quantize->add_option("--search-iters", qa.search_iters);
  quantize->add_option("--calib-iters", qa.calib_iters);
  quantize->add_option("--batch-size", qa.batch_size)->check(CLI::PositiveNumber);
  quantize->add_option("--seed", qa.seed);
  quantize->add_option("--lambda0", qa.lambda0)->check(CLI::Range(0.0, 1.0));
  quantize->add_option("--drop-path", qa.drop_path)->check(CLI::Range(0.0, 1.0));
  quantize->add_option("--adapter-lr", qa.adapter_lr)->check(CLI::NonNegativeNumber);
  quantize->add_option("--interval-lr", qa.interval_lr)->check(CLI::NonNegativeNumber);
  quantize->add_option("--arch-lr", qa.arch_lr)->check(CLI::NonNegativeNumber);
  quantize->add_option("--refresh-every", qa.refresh_every, "Hardness refresh period")->check(CLI::PositiveNumber);
  quantize->add_option("--record-every", qa.record_every, "Trajectory sampling period");
  quantize->add_option("--fixed-rank", qa.fixed_rank, "Skip the search and use this rank")->check(CLI::PositiveNumber);
  quantize->add_flag("--no-lowrank", qa.no_lowrank, "Disable low-rank compensation");
  quantize->add_flag("--no-dfq", qa.no_dfq, "Uniform post-softmax quantizer instead of DFQ");
  quantize->add_flag("--no-curriculum", qa.no_curriculum, "Train on all samples from the start");
  quantize->add_flag("--quiet", qa.quiet, "No progress lines on stderr");
  quantize->add_option("--out", qa.out)->required();

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Accuracy, block losses and reference-logit checks");
  eval->add_option("--model", ea.model)->required();
  eval->add_option("--data", ea.data, "Dataset container");
  eval->add_option("--fp-model", ea.fp_model, "Full-precision model for block losses");
  eval->add_option("--reference", ea.reference, "Reference logits sidecar JSON");
  eval->add_option("--mode", ea.mode)->check(CLI::IsMember({"auto", "fp", "quant"}));
  eval->add_flag("--json", ea.json_out, "Print JSON");

  ReportArgs ra;
  auto* report = app.add_subcommand("report", "Emit trajectories, intervals and ranks of a quantize run");
  report->add_option("--run", ra.run, "Quantized model or its .report.json")->required();
  report->add_option("--emit", ra.emit)->check(CLI::IsMember({"csv", "json"}));
  report->add_option("--out-dir", ra.out_dir, "Write files here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* failed = &app;
    for (const CLI::App* sub : app.get_subcommands()) failed = sub;
    err << failed->help();
    return 2;
  }

  try {
    if (*train) return run_train_toy(tt, out, err);
    if (*calibrate) return run_calibrate(ca, out, err);
    if (*quantize) return run_quantize(qa, out, err);
    if (*eval) return run_eval(ea, out, err);
    if (*report) return run_report(ra, out, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace vitptq
