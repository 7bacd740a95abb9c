#pragma once

// Command-line front end. cli_dispatch takes the arguments after the program
// name and writes machine-readable output to `out`, diagnostics to `err`.
//
// Exit codes: 0 ok, 1 usage error, 2 data error, 3 numerical failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "navseg/bench.hpp"
#include "navseg/costmodel.hpp"
#include "navseg/dataio.hpp"
#include "navseg/parallel.hpp"
#include "navseg/pruner.hpp"
#include "navseg/trainer.hpp"

namespace navseg {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

struct FrameSize {
  std::size_t width = 0;
  std::size_t height = 0;
};

/// Parses "WxH" (width first, as in "512x256").
inline FrameSize parse_frame_size(const std::string& s) {
  const auto x = s.find_first_of("xX");
  auto number = [&](const std::string& part) -> std::size_t {
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos || part.size() > 9) {
      throw CLI::ValidationError("--input", "expected WxH, got '" + s + "'");
    }
    return std::stoul(part);
  };
  if (x == std::string::npos) throw CLI::ValidationError("--input", "expected WxH, got '" + s + "'");
  const FrameSize f{number(s.substr(0, x)), number(s.substr(x + 1))};
  if (f.width == 0 || f.height == 0) throw CLI::ValidationError("--input", "sizes must be positive");
  return f;
}

namespace detail {

struct CliOptions {
  std::string variant = "full";
  std::string input = "512x256";
  std::string model;
  std::string out;
  std::string dataset;
  std::string eval_dataset;
  std::string image;
  std::string config;
  std::string history;
  std::string plan;
  std::uint64_t seed = 0;
  std::size_t steps = 500;
  std::size_t batch = 8;
  double lr = 1e-3;
  std::size_t count = 200;
  std::size_t iterations = 20;
  std::size_t warmup = 3;
  std::size_t threads = 1;
  bool json = false;
  bool table = false;
};

inline Shape input_shape(const std::string& s) {
  const FrameSize f = parse_frame_size(s);
  return {1, 3, f.height, f.width};
}

inline void require(const std::string& value, const char* flag) {
  if (value.empty()) throw CLI::RequiredError(flag);
}

// Outputs are never allowed to overwrite inputs.
inline void distinct(const std::string& in, const std::string& out, const char* flag) {
  if (!out.empty() && std::filesystem::exists(out) && std::filesystem::exists(in) &&
      std::filesystem::equivalent(in, out)) {
    throw CLI::ValidationError(flag, "output would overwrite input " + in);
  }
}

inline TrainConfig train_config(const CliOptions& o) {
  TrainConfig c;
  if (!o.config.empty()) {
    std::ifstream f(o.config);
    if (!f) throw std::runtime_error("cannot open config " + o.config);
    c = parse_train_config(nlohmann::json::parse(f));
  }
  c.steps = o.steps;
  c.batch_size = o.batch;
  c.learning_rate = o.lr;
  c.seed = o.seed;
  c.validate();
  return c;
}

inline nlohmann::json eval_json(const EvalResult& r) {
  return {{"recall", r.metrics.recall},
          {"precision", r.metrics.precision},
          {"accuracy", r.metrics.accuracy},
          {"loss", r.mean_loss},
          {"tp", r.counts.tp},
          {"fp", r.counts.fp},
          {"tn", r.counts.tn},
          {"fn", r.counts.fn}};
}

inline std::string kib(Count bytes) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << static_cast<double>(bytes) / 1024.0;
  return os.str();
}

inline void run_describe(const CliOptions& o, std::ostream& out) {
  const NetworkSpec spec = table_spec(parse_variant(o.variant));
  const CostReport r = network_cost_report(spec, input_shape(o.input));
  if (o.json) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& b : r.per_block) {
      rows.push_back({{"block", b.block}, {"type", to_string(b.kind)}, {"output", size_label(b.output)}, {"params", b.params}});
    }
    out << nlohmann::json{{"variant", o.variant}, {"input", size_label(input_shape(o.input))}, {"blocks", rows},
                          {"params", r.total_params}, {"bytes", r.total_bytes}}
               .dump(2)
        << '\n';
    return;
  }
  out << "variant " << o.variant << ", input " << size_label(input_shape(o.input)) << '\n';
  out << std::left << std::setw(7) << "Block" << std::setw(12) << "Type" << std::setw(16) << "Output size" << std::right
      << std::setw(10) << "Params" << '\n';
  for (const auto& b : r.per_block) {
    out << std::left << std::setw(7) << b.block << std::setw(12) << to_string(b.kind) << std::setw(16)
        << size_label(b.output) << std::right << std::setw(10) << b.params << '\n';
  }
  out << "total params " << r.total_params << ", float32 weights " << r.total_bytes << " bytes (" << kib(r.total_bytes)
      << " KiB)\n";
}

inline void run_cost(const CliOptions& o, std::ostream& out) {
  const CostReport r = network_cost_report(table_spec(parse_variant(o.variant)), input_shape(o.input));
  if (o.table) {
    out << to_table(r);
  } else {
    out << to_json(r).dump(2) << '\n';
  }
}

inline void run_synth(const CliOptions& o, std::ostream& out) {
  require(o.dataset, "--dataset");
  const FrameSize f = parse_frame_size(o.input);
  DataConfig dc;
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw std::runtime_error("cannot open config " + o.config);
    dc = parse_data_config(nlohmann::json::parse(in));
  }
  const auto samples = synth_dataset(o.count, o.seed, f.height, f.width, dc.synth);
  save_dataset(o.dataset, samples);
  std::uint64_t positive = 0;
  for (const auto& s : samples)
    for (auto v : s.label.data) positive += v;
  out << nlohmann::json{{"samples", samples.size()}, {"width", f.width}, {"height", f.height}, {"seed", o.seed},
                        {"navigable_fraction",
                         static_cast<double>(positive) / static_cast<double>(samples.size() * f.width * f.height)}}
             .dump()
      << '\n';
}

inline void write_history(const CliOptions& o, const TrainResult& t, std::ostream& out) {
  if (!o.history.empty()) {
    std::ofstream f(o.history);
    if (!f) throw std::runtime_error("cannot write " + o.history);
    write_history_csv(f, t.history);
  } else if (!o.json) {
    write_history_csv(out, t.history);
  }
}

inline void run_train(const CliOptions& o, std::ostream& out) {
  require(o.dataset, "--dataset");
  require(o.out, "--out");
  const TrainConfig c = train_config(o);
  const auto data = load_dataset(o.dataset);
  auto net = build_network<float>(parse_variant(o.variant), o.seed);
  const TrainResult t = train(net, data, c);
  save_model(net, o.out);
  write_history(o, t, out);
  if (o.json) out << nlohmann::json{{"steps", c.steps}, {"final_loss", t.final_loss}, {"model", o.out}}.dump() << '\n';
}

inline void run_prune(const CliOptions& o, std::ostream& out) {
  require(o.model, "--model");
  require(o.out, "--out");
  distinct(o.model, o.out, "--out");
  const auto net = load_model(o.model);
  const PrunePlan plan = select_prune_set(net);
  const auto pruned = apply_prune(net, plan);
  save_model(pruned, o.out);
  if (!o.plan.empty()) {
    std::ofstream f(o.plan);
    if (!f) throw std::runtime_error("cannot write " + o.plan);
    f << plan.to_json().dump(2) << '\n';
  }
  out << nlohmann::json{{"policy", plan.policy},
                        {"params_before", count_params(net)},
                        {"params_after", count_params(pruned)},
                        {"file_bytes_before", std::filesystem::file_size(o.model)},
                        {"file_bytes_after", std::filesystem::file_size(o.out)}}
             .dump()
      << '\n';
}

inline void run_finetune(const CliOptions& o, std::ostream& out) {
  require(o.model, "--model");
  require(o.dataset, "--dataset");
  require(o.out, "--out");
  distinct(o.model, o.out, "--out");
  const TrainConfig c = train_config(o);
  const auto net = load_model(o.model);
  const auto train_set = load_dataset(o.dataset);
  const auto eval_set = o.eval_dataset.empty() ? train_set : load_dataset(o.eval_dataset);
  const FineTuneResult r = fine_tune(net, train_set, eval_set, c);
  save_model(r.net, o.out);
  if (!o.history.empty()) write_history(o, r.training, out);
  out << nlohmann::json{{"before", eval_json(r.before)}, {"after", eval_json(r.after)}, {"steps", c.steps}}.dump() << '\n';
}

inline void run_infer(const CliOptions& o, std::ostream& out) {
  require(o.model, "--model");
  require(o.image, "--image");
  require(o.out, "--out");
  distinct(o.image, o.out, "--out");
  const auto net = load_model(o.model);
  const Tensor<float> image = load_image(o.image);
  const auto logits = net.forward(image);
  Mask mask{image.shape().h, image.shape().w, argmax_mask(logits)};
  save_mask(o.out, mask);
  if (o.json) {
    std::uint64_t positive = 0;
    for (auto v : mask.data) positive += v;
    out << nlohmann::json{{"mask", o.out},
                          {"navigable_fraction", static_cast<double>(positive) / static_cast<double>(mask.data.size())}}
               .dump()
        << '\n';
  }
}

inline void run_eval(const CliOptions& o, std::ostream& out) {
  require(o.model, "--model");
  require(o.dataset, "--dataset");
  const auto net = load_model(o.model);
  const EvalResult r = evaluate(net, load_dataset(o.dataset));
  out << eval_json(r).dump() << '\n';
}

inline void run_bench(const CliOptions& o, std::ostream& out) {
  const auto net = o.model.empty() ? build_network<float>(parse_variant(o.variant), o.seed) : load_model(o.model);
  const BenchResult r = bench(net, input_shape(o.input), o.iterations, o.warmup, o.seed);
  if (o.json) {
    out << nlohmann::json{{"iterations", r.iterations}, {"warmup", r.warmup}, {"mean_ms", r.mean_ms},
                          {"p50_ms", r.p50_ms},         {"p95_ms", r.p95_ms}, {"max_fps", r.max_fps},
                          {"threads", num_threads()}}
               .dump()
        << '\n';
    return;
  }
  out << std::fixed << std::setprecision(2) << "input " << size_label(input_shape(o.input)) << ", " << r.iterations
      << " iterations after " << r.warmup << " warmup, " << num_threads() << " thread(s)\n"
      << "mean " << r.mean_ms << " ms, p50 " << r.p50_ms << " ms, p95 " << r.p95_ms << " ms\n"
      << "max input frame rate " << format_fps(r.max_fps) << " fps\n";
}

}  // namespace detail

inline int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  detail::CliOptions o;
  CLI::App app{"navseg: navigable-space segmentation toolkit", "navseg"};
  app.require_subcommand(1, 1);
  app.add_option("--threads", o.threads, "worker threads (capped by NAVSEG_THREADS)")->check(CLI::PositiveNumber);

  auto variant = [&](CLI::App* s) {
    s->add_option("--variant", o.variant, "full or pruned")->check(CLI::IsMember({"full", "pruned"}));
  };
  auto input = [&](CLI::App* s, const char* what) { s->add_option("--input", o.input, what); };
  auto training = [&](CLI::App* s) {
    s->add_option("--steps", o.steps, "Adam steps");
    s->add_option("--batch", o.batch, "minibatch size")->check(CLI::PositiveNumber);
    s->add_option("--lr", o.lr, "learning rate");
    s->add_option("--seed", o.seed, "seed for weights and batch order");
    s->add_option("--config", o.config, "JSON training config");
    s->add_option("--history", o.history, "write step,loss,accuracy CSV here");
  };

  auto* describe = app.add_subcommand("describe", "list blocks with output sizes and parameter counts");
  variant(describe);
  input(describe, "frame size WxH");
  describe->add_flag("--json", o.json, "JSON output");

  auto* cost = app.add_subcommand("cost", "per-block MACs and parameters as JSON");
  variant(cost);
  input(cost, "frame size WxH");
  cost->add_flag("--json", o.json, "JSON output (default)");
  cost->add_flag("--table", o.table, "plain-text table instead of JSON");

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
  synth->add_option("--dataset", o.dataset, "output root")->required();
  synth->add_option("--count", o.count, "number of samples")->check(CLI::PositiveNumber);
  synth->add_option("--seed", o.seed, "dataset seed");
  synth->add_option("--config", o.config, "JSON data config");
  input(synth, "image size WxH");
  synth->add_flag("--json", o.json, "JSON output (default)");

  auto* train_cmd = app.add_subcommand("train", "train a network from scratch");
  variant(train_cmd);
  train_cmd->add_option("--dataset", o.dataset, "dataset root")->required();
  train_cmd->add_option("--out", o.out, "model file to write")->required();
  training(train_cmd);
  train_cmd->add_flag("--json", o.json, "JSON summary instead of history CSV");

  auto* prune = app.add_subcommand("prune", "halve the 128-wide layers by filter L1 norm");
  prune->add_option("--model", o.model, "input model")->required();
  prune->add_option("--out", o.out, "pruned model to write")->required();
  prune->add_option("--plan", o.plan, "write the prune plan JSON here");
  prune->add_flag("--json", o.json, "JSON output (default)");

  auto* finetune = app.add_subcommand("finetune", "continue training a pruned model");
  finetune->add_option("--model", o.model, "input model")->required();
  finetune->add_option("--dataset", o.dataset, "training dataset root")->required();
  finetune->add_option("--eval-dataset", o.eval_dataset, "held-out dataset root");
  finetune->add_option("--out", o.out, "model file to write")->required();
  training(finetune);
  finetune->add_flag("--json", o.json, "JSON output (default)");

  auto* infer = app.add_subcommand("infer", "segment one PPM image into a PGM mask");
  infer->add_option("--model", o.model, "model file")->required();
  infer->add_option("--image", o.image, "input PPM")->required();
  infer->add_option("--out", o.out, "output PGM mask")->required();
  infer->add_flag("--json", o.json, "print a JSON summary");

  auto* eval = app.add_subcommand("eval", "pixel recall, precision and accuracy on a dataset");
  eval->add_option("--model", o.model, "model file")->required();
  eval->add_option("--dataset", o.dataset, "dataset root")->required();
  eval->add_flag("--json", o.json, "JSON output (default)");

  auto* bench_cmd = app.add_subcommand("bench", "time inference forward passes");
  variant(bench_cmd);
  input(bench_cmd, "frame size WxH");
  bench_cmd->add_option("--model", o.model, "model file (default: freshly built --variant)");
  bench_cmd->add_option("--iterations", o.iterations, "timed iterations")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--warmup", o.warmup, "untimed iterations");
  bench_cmd->add_option("--seed", o.seed, "input and weight seed");
  bench_cmd->add_flag("--json", o.json, "JSON output");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  set_num_threads(o.threads);
  try {
    if (*describe) detail::run_describe(o, out);
    else if (*cost) detail::run_cost(o, out);
    else if (*synth) detail::run_synth(o, out);
    else if (*train_cmd) detail::run_train(o, out);
    else if (*prune) detail::run_prune(o, out);
    else if (*finetune) detail::run_finetune(o, out);
    else if (*infer) detail::run_infer(o, out);
    else if (*eval) detail::run_eval(o, out);
    else if (*bench_cmd) detail::run_bench(o, out);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const nlohmann::json::exception& e) {
    err << "error: bad JSON: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitOk;
}

}  // namespace navseg
