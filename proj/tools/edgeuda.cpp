// edgeuda command-line tool: gen, train, eval, infer, bench.

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "edgeuda/edgeuda.hpp"

#ifndef EDGEUDA_VERSION
#define EDGEUDA_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using namespace edgeuda;

namespace {

constexpr int kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumerical = 3;

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

/// manifest.txt: one per output directory.
class RunManifest {
 public:
  RunManifest(std::string command, std::vector<std::string> argv) : command_(std::move(command)), argv_(std::move(argv)) {
    start_ = timestamp();
  }
  void set(const std::string& k, const std::string& v) { fields_.emplace_back(k, v); }
  void output(const fs::path& p) { outputs_.push_back(p.filename().string()); }
  void config(const TrainConfig& c) { config_ = config_text(c); }

  void write(const fs::path& dir) const {
    std::ofstream os(dir / "manifest.txt");
    if (!os) throw DataError("cannot write " + (dir / "manifest.txt").string());
    os << "version = " << EDGEUDA_VERSION << '\n' << "command = " << command_ << '\n' << "argv =";
    for (const auto& a : argv_) os << ' ' << a;
    os << '\n' << "start = " << start_ << '\n' << "end = " << timestamp() << '\n';
    for (const auto& [k, v] : fields_) os << k << " = " << v << '\n';
    for (const auto& o : outputs_) os << "output = " << o << '\n';
    if (!config_.empty()) os << "\n[config]\n" << config_;
  }

 private:
  std::string command_, start_, config_;
  std::vector<std::string> argv_;
  std::vector<std::pair<std::string, std::string>> fields_;
  std::vector<std::string> outputs_;
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory " + dir.string());
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p);
  if (!os) throw DataError("cannot write " + p.string());
  return os;
}

std::size_t thread_cap() {
  if (const char* env = std::getenv("EDGEUDA_THREADS")) {
    const long v = std::atol(env);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string out;
  std::size_t n = 16, size = 64;
  std::uint64_t seed = 1;
  std::string domain = "source";
  bool unlabelled = false;
};

int cmd_gen(const GenArgs& a, const std::vector<std::string>& argv) {
  SyntheticConfig cfg;
  cfg.image_size = a.size;
  if (a.domain != "source" && a.domain != "target") throw ConfigError("--domain must be source or target");
  const bool target = a.domain == "target";
  const Split split = target ? (a.unlabelled ? Split::train_target : Split::eval_target)
                             : Split::eval_source;
  const auto samples = make_split(cfg, split, a.n, a.seed);
  const fs::path dir = a.out;
  ensure_dir(dir);
  export_dataset(dir, samples);
  RunManifest m("gen", argv);
  m.set("seed", std::to_string(a.seed));
  m.set("n", std::to_string(a.n));
  m.set("size", std::to_string(a.size));
  m.set("domain", a.domain);
  m.set("labelled", a.unlabelled && target ? "false" : "true");
  m.output("dataset.lst");
  m.write(dir);
  std::cout << "wrote " << samples.size() << " " << a.domain << " samples to " << dir.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, out, arm, from;
  bool print_config = false;
};

int cmd_train(const TrainArgs& a, const std::vector<std::string>& argv) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_config(a.config);
  if (!a.arm.empty()) cfg = apply_arm(cfg, parse_arm(a.arm));
  cfg.validate();
  if (a.print_config) {
    std::cout << config_text(cfg);
    return kExitOk;
  }
  if (a.config.empty()) throw ConfigError("train: --config is required");
  if (a.out.empty()) throw ConfigError("train: --out is required");
  const fs::path dir = a.out;
  ensure_dir(dir);

  std::optional<ModelBundle> start;
  if (!a.from.empty()) {
    start = ModelBundle::load(a.from);
    if (start->step() >= cfg.steps)
      throw ConfigError("--from checkpoint is at step " + std::to_string(start->step()) + ", nothing left to train");
  }
  const bool resumed = start.has_value();
  // A resumed run appends to the logs of the run it continues.
  auto open_log = [&](const char* name, const char* header) {
    const fs::path p = dir / name;
    const bool append = resumed && fs::exists(p);
    std::ofstream os(p, append ? std::ios::app : std::ios::trunc);
    if (!os) throw DataError("cannot write " + p.string());
    if (!append) os << header << '\n';
    return os;
  };
  auto losses = open_log("losses.csv", kLossCsvHeader);
  auto msrc = open_log("metrics_source.csv", kMetricsCsvHeader);
  auto mtgt = open_log("metrics_target.csv", kMetricsCsvHeader);

  RunManifest m("train", argv);
  m.config(cfg);
  m.set("seed", std::to_string(cfg.seed));
  if (!a.arm.empty()) m.set("arm", a.arm);
  if (resumed) m.set("from", a.from + " (step " + std::to_string(start->step()) + ")");

  const ExperimentData data(cfg);
  auto on_step = [&](std::uint64_t step, const StepLosses& l) {
    write_loss_row(losses, step, l);
    if (step % 50 == 0 || step == cfg.steps)
      std::cerr << "step " << step << " seg_ce " << fmt_num(l.seg_ce) << " entropy " << fmt_num(l.entropy) << '\n';
  };
  auto on_eval = [&](const ModelBundle& b, const EvalRecord& e) {
    write_metrics_row(msrc, e.step, e.source);
    write_metrics_row(mtgt, e.step, e.target);
    msrc.flush(), mtgt.flush(), losses.flush();
    if (e.step < cfg.steps) {
      std::ostringstream name;
      name << "step_" << std::setw(6) << std::setfill('0') << e.step << ".ckpt";
      b.save((dir / name.str()).string());
      m.output(dir / name.str());
    }
  };
  ExperimentResult res = run_experiment(cfg, std::move(start), &data, on_step, on_eval);
  res.bundle.save((dir / "final.ckpt").string());
  for (const char* f : {"losses.csv", "metrics_source.csv", "metrics_target.csv", "final.ckpt"}) m.output(dir / f);
  m.write(dir);
  const auto& last = res.evals.back();
  std::cout << "final step " << last.step << ": source whole dice " << fmt_num(last.source.dice[3])
            << ", target whole dice " << fmt_num(last.target.dice[3]) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, data, out;
  bool no_edge = false;
  double hd_percentile = 100.0;
};

int cmd_eval(const EvalArgs& a, const std::vector<std::string>& argv) {
  const ModelBundle b = ModelBundle::load(a.checkpoint);
  const auto all = load_pgm_dataset(a.data, static_cast<int>(b.arch().classes));
  std::vector<Sample> labelled;
  for (const auto& s : all)
    if (s.label) labelled.push_back(s);
  if (labelled.empty()) throw DataError("eval: no labelled samples in " + a.data);
  const MetricsReport r = evaluate(b, labelled, !a.no_edge, a.hd_percentile);
  const fs::path out = a.out;
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  auto os = open_out(out);
  os << kMetricsCsvHeader << '\n';
  write_metrics_row(os, b.step(), r);
  RunManifest m("eval", argv);
  m.set("checkpoint", a.checkpoint);
  m.set("data", a.data);
  m.set("samples", std::to_string(r.samples));
  m.output(out);
  m.write(out.has_parent_path() ? out.parent_path() : fs::path("."));
  std::cout << "whole dice " << fmt_num(r.dice[3]) << ", whole hd " << fmt_num(r.hausdorff[3]) << " over "
            << r.samples << " samples\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct InferArgs {
  std::string checkpoint, image, prefix;
  bool no_edge = false;
};

int cmd_infer(const InferArgs& a, const std::vector<std::string>& argv) {
  const ModelBundle b = ModelBundle::load(a.checkpoint);
  const PgmImage pgm = read_pgm(a.image);
  FloatMap raw(pgm.pixels.height, pgm.pixels.width);
  for (std::size_t i = 0; i < raw.size(); ++i) raw.values[i] = pgm.pixels.values[i];
  const FloatMap img = normalize_intensity(raw);
  if (img.height % 8 || img.width % 8)
    throw DataError("infer: image dims " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                    " must be divisible by 8");
  const InferResult r = infer(b, stack_maps<double>({&img}), !a.no_edge);

  const std::size_t C = b.arch().classes;
  PgmImage seg{Grid<std::uint16_t>(img.height, img.width), static_cast<std::uint32_t>(C - 1)};
  for (std::size_t i = 0; i < seg.pixels.size(); ++i) seg.pixels.values[i] = r.classes[0].values[i];
  FloatMap edge(img.height, img.width);
  std::copy(r.edge_prob.data().begin(), r.edge_prob.data().end(), edge.values.begin());
  FloatMap ent = entropy_maps(r.softmax)[0];
  for (double& v : ent.values) v /= std::log(static_cast<double>(C));

  const fs::path prefix = a.prefix;
  if (prefix.has_parent_path()) ensure_dir(prefix.parent_path());
  const std::string p = prefix.string();
  write_pgm(p + "_seg.pgm", seg);
  write_pgm(p + "_edge.pgm", unit_to_pgm(edge));
  write_pgm(p + "_entropy.pgm", unit_to_pgm(ent));
  RunManifest m("infer", argv);
  m.set("checkpoint", a.checkpoint);
  m.set("image", a.image);
  for (const char* s : {"_seg.pgm", "_edge.pgm", "_entropy.pgm"}) m.output(p + s);
  m.write(prefix.has_parent_path() ? prefix.parent_path() : fs::path("."));
  return kExitOk;
}

// ---------------------------------------------------------------------------

constexpr const char* kBenchCsvHeader = "arm,seed,domain,class,dice,hd,n_undefined_hd,mean_entropy";

struct BenchArgs {
  std::size_t seeds = 3;
  std::string out, config, arms = "no-uda,feat,edge,full";
  std::uint64_t first_seed = 1;
};

int cmd_bench(const BenchArgs& a, const std::vector<std::string>& argv) {
  if (a.out.empty()) throw ConfigError("bench: --out is required");
  if (a.seeds < 1) throw ConfigError("bench: --seeds must be >= 1");
  const TrainConfig base = a.config.empty() ? TrainConfig{} : load_config(a.config);
  std::vector<Arm> arms;
  std::istringstream is(a.arms);
  for (std::string tok; std::getline(is, tok, ',');) arms.push_back(parse_arm(tok));
  if (arms.empty()) throw ConfigError("bench: no arms given");
  const fs::path dir = a.out;
  ensure_dir(dir);

  struct Job {
    Arm arm;
    std::uint64_t seed;
    std::optional<EvalRecord> result;
    std::string error;
    int code = kExitOk;
  };
  std::vector<Job> jobs;
  for (Arm arm : arms)
    for (std::size_t s = 0; s < a.seeds; ++s) jobs.push_back({arm, a.first_seed + s, std::nullopt, {}, kExitOk});

  std::atomic<std::size_t> next{0};
  std::mutex log_mu;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < jobs.size();) {
      Job& j = jobs[i];
      TrainConfig cfg = apply_arm(base, j.arm);
      cfg.seed = j.seed;
      cfg.eval_every = 0;
      try {
        const auto res = run_experiment(cfg);
        j.result = res.evals.back();
        std::lock_guard lk(log_mu);
        std::cerr << arm_name(j.arm) << " seed " << j.seed << ": target whole dice "
                  << fmt_num(j.result->target.dice[3]) << '\n';
      } catch (const NumericalError& e) {
        j.error = e.what(), j.code = kExitNumerical;
      } catch (const Error& e) {
        j.error = e.what(), j.code = kExitData;
      }
    }
  };
  const std::size_t n_threads = std::min(thread_cap(), jobs.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  auto os = open_out(dir / "bench.csv");
  os << kBenchCsvHeader << '\n';
  int code = kExitOk;
  for (const auto& j : jobs) {
    if (!j.result) {
      std::cerr << "error: " << arm_name(j.arm) << " seed " << j.seed << ": " << j.error << '\n';
      code = std::max(code, j.code);
      continue;
    }
    for (const auto& [domain, rep] : {std::pair{"source", &j.result->source}, std::pair{"target", &j.result->target}})
      for (std::size_t k = 0; k < kReportSlots; ++k)
        os << arm_name(j.arm) << ',' << j.seed << ',' << domain << ',' << kSlotNames[k] << ',' << fmt_num(rep->dice[k])
           << ',' << fmt_num(rep->hausdorff[k]) << ',' << rep->undefined_hd[k] << ',' << fmt_num(rep->mean_entropy)
           << '\n';
  }
  os.close();

  std::cout << std::left << std::setw(8) << "arm" << "  mean target whole dice  mean target entropy\n";
  for (Arm arm : arms) {
    double d = 0, e = 0;
    int n = 0;
    for (const auto& j : jobs)
      if (j.arm == arm && j.result) d += j.result->target.dice[3], e += j.result->target.mean_entropy, ++n;
    if (n) std::cout << std::setw(8) << arm_name(arm) << "  " << std::setw(22) << fmt_num(d / n) << "  " << fmt_num(e / n) << '\n';
  }

  RunManifest m("bench", argv);
  m.config(base);
  m.set("seeds", std::to_string(a.seeds));
  m.set("first_seed", std::to_string(a.first_seed));
  m.set("arms", a.arms);
  m.set("threads", std::to_string(n_threads));
  m.output(dir / "bench.csv");
  m.write(dir);
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Edge-guided multi-task domain adaptation for segmentation"};
  app.set_version_flag("--version", EDGEUDA_VERSION);
  app.require_subcommand(1);
  std::vector<std::string> args(argv, argv + argc);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic PGM dataset");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--n", gen.n, "Number of samples")->check(CLI::PositiveNumber);
  g->add_option("--size", gen.size, "Image side length (>= 32, multiple of 8)");
  g->add_option("--seed", gen.seed, "Seed");
  g->add_option("--domain", gen.domain, "source or target appearance")->check(CLI::IsMember({"source", "target"}));
  g->add_flag("--unlabelled", gen.unlabelled, "Omit labels (target domain only)");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train all networks from a config file");
  t->add_option("--config", train.config, "key = value config file");
  t->add_option("--out", train.out, "Output directory");
  t->add_option("--arm", train.arm, "Ablation preset")->check(CLI::IsMember({"no-uda", "feat", "edge", "full"}));
  t->add_option("--from", train.from, "Resume from a checkpoint");
  t->add_flag("--print-config", train.print_config, "Print the effective config and exit");
  t->footer(config_help() +
            "\nOutputs: losses.csv (" + std::string(kLossCsvHeader) + "),\n"
            "metrics_source.csv / metrics_target.csv (" + kMetricsCsvHeader + "),\n"
            "final.ckpt, manifest.txt.");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a labelled PGM dataset");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--out", ev.out, "Metrics CSV path")->required();
  e->add_flag("--no-edge-conditioning", ev.no_edge, "Replace the edge channel with zeros");
  e->add_option("--hd-percentile", ev.hd_percentile, "Hausdorff percentile (100 or e.g. 95)")->check(CLI::Range(1e-9, 100.0));
  e->footer(std::string("CSV columns: ") + kMetricsCsvHeader + " (epoch = checkpoint step)");

  InferArgs inf;
  auto* i = app.add_subcommand("infer", "Segment one PGM image");
  i->add_option("--checkpoint", inf.checkpoint, "Checkpoint file")->required();
  i->add_option("--image", inf.image, "Input PGM")->required();
  i->add_option("--out-prefix", inf.prefix, "Writes PREFIX_seg.pgm, PREFIX_edge.pgm, PREFIX_entropy.pgm")->required();
  i->add_flag("--no-edge-conditioning", inf.no_edge, "Replace the edge channel with zeros");

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Run the ablation arms over several seeds");
  b->add_option("--seeds", bench.seeds, "Seeds per arm");
  b->add_option("--first-seed", bench.first_seed, "First seed");
  b->add_option("--out", bench.out, "Output directory")->required();
  b->add_option("--config", bench.config, "Base config file (defaults otherwise)");
  b->add_option("--arms", bench.arms, "Comma-separated arms");
  b->footer(std::string("bench.csv columns: ") + kBenchCsvHeader +
            "\n  one row per (arm, seed, domain, class); class is c1, c2, c3 or whole.\n"
            "EDGEUDA_THREADS caps the number of runs in parallel.");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*g) return cmd_gen(gen, args);
    if (*t) return cmd_train(train, args);
    if (*e) return cmd_eval(ev, args);
    if (*i) return cmd_infer(inf, args);
    if (*b) return cmd_bench(bench, args);
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitUsage;
  } catch (const NumericalError& err) {
    std::cerr << "numerical error: " << err.what() << '\n';
    return kExitNumerical;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitData;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
