// Command-line front end: ingest | train | eval | sweep | bench.
// Exit codes: 0 success, 2 I/O, 3 config, 4 format, 5 numerical divergence.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "menglan/checkpoint.hpp"
#include "menglan/data.hpp"
#include "menglan/model.hpp"
#include "menglan/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace menglan;

namespace {

constexpr const char* kBuildId = "menglan-cli 1.0";

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  AdamState adam;
  std::string model_kind = "menglan";
  std::string lr_decay_mode = "weight";  // weight | epoch (per-epoch lr decay)
};

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  RunConfig rc;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
    std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "lr") rc.adam.lr = std::stod(value);
    else if (key == "weight_decay") rc.adam.weight_decay = std::stod(value);
    else if (key == "decay_mode") rc.lr_decay_mode = value;
    else if (key == "batch_size") rc.train.batch_size = std::stoul(value);
    else if (key == "max_epochs") rc.train.max_epochs = std::stoul(value);
    else if (key == "patience_epochs") rc.train.patience = std::stoul(value);
    else if (key == "model") rc.model_kind = value;
    else rc.model.set_field(key, value);  // throws ConfigError on unknown keys
  }
  rc.train.seed = rc.model.seed;
  if (rc.lr_decay_mode != "weight" && rc.lr_decay_mode != "epoch")
    throw ConfigError("decay_mode must be 'weight' or 'epoch'");
  if (rc.lr_decay_mode == "epoch") rc.adam.weight_decay = 0.0;
  return rc;
}

std::string timestamp_now() {
  auto now = std::chrono::system_clock::now();
  std::time_t tt = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&tt));
  return buf;
}

void write_manifest(const fs::path& out_dir, const RunConfig& rc, const std::string& archive,
                    std::uint64_t archive_digest) {
  json m;
  for (const auto& [k, v] : rc.model.fields()) m["config"][k] = v;
  m["config"]["model"] = rc.model_kind;
  m["config"]["lr"] = rc.adam.lr;
  m["config"]["weight_decay"] = rc.adam.weight_decay;
  m["config"]["batch_size"] = rc.train.batch_size;
  m["config"]["max_epochs"] = rc.train.max_epochs;
  m["config"]["patience_epochs"] = rc.train.patience;
  m["dataset"] = {{"archive", archive}, {"digest", archive_digest}};
  m["seed"] = rc.model.seed;
  m["build"] = kBuildId;
  m["outputs"] = {{"checkpoint", (out_dir / "checkpoint.bin").string()},
                  {"epochs_csv", (out_dir / "epochs.csv").string()},
                  {"metrics_csv", (out_dir / "metrics.csv").string()},
                  {"split_index", (out_dir / "split_index.txt").string()}};
  m["timestamp"] = timestamp_now();
  std::ofstream out(out_dir / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + out_dir.string());
  out << m.dump(2) << "\n";
}

void write_metrics_row(std::ostream& out, const std::string& model, const std::string& target,
                       std::size_t params, const MetricsReport& r) {
  out << model << "," << target << "," << params << "," << r.rmse << "," << r.mse << ","
      << r.mae << ",";
  if (r.r2_defined) out << r.r2;
  else out << "nan";
  out << "," << r.total_seconds << "," << r.per_sample_seconds << "\n";
}

constexpr const char* kMetricsHeader = "model,target,params,rmse,mse,mae,r2,total_s,avg_s\n";

MetricsReport eval_split(RegressionModel& model, const std::vector<SampleWindow>& samples,
                         const std::vector<std::size_t>& ids, const StandardizationStats& stats) {
  auto t0 = std::chrono::steady_clock::now();
  std::vector<double> preds = eval_predictions(model, samples, ids, stats);
  auto t1 = std::chrono::steady_clock::now();
  std::vector<double> y(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i)
    y[i] = samples[ids[i]].target(model.config().target);
  return metrics(y, preds, std::chrono::duration<double>(t1 - t0).count());
}

int cmd_ingest(const std::string& raw_path, const std::string& out_archive, std::size_t width,
               std::size_t stride, std::size_t cap) {
  auto records = parse_raw_file(raw_path);
  auto levels = detect_levels(records);
  SampleArchive archive;
  archive.window_width = width;
  archive.source_digest = fnv1a_file(raw_path);
  WindowConfig wc{width, stride, cap};
  archive.samples = make_windows(records, levels, wc, &std::cerr);
  write_archive(archive, out_archive);

  std::cout << "records: " << records.size() << "\n";
  std::cout << "levels (contiguous spans): " << levels.size() << "\n";
  std::cout << "distinct concentration pairs: " << distinct_level_pairs(levels) << "\n";
  std::cout << "samples: " << archive.samples.size() << " (W=" << width << ", stride=" << stride
            << ", cap=" << cap << ")\n";
  auto [_, stats] = standardize(records);
  std::cout << "per-channel raw stats (mean/std):\n";
  for (std::size_t c = 0; c < kSensorCount; ++c)
    std::cout << "  s" << c + 1 << ": " << stats.mean[c] << " / " << stats.stddev[c] << "\n";
  return 0;
}

struct TrainedRun {
  TrainResult result;
  StandardizationStats stats;
  SplitIndex split_idx;
  std::unique_ptr<RegressionModel> model;
};

TrainedRun run_training(const RunConfig& rc, const SampleArchive& archive) {
  if (archive.window_width != rc.model.window_width)
    throw ConfigError("config window_width " + std::to_string(rc.model.window_width) +
                      " does not match archive width " + std::to_string(archive.window_width));
  TrainedRun tr;
  tr.split_idx = split(archive.samples.size(), rc.model.seed);
  tr.stats = window_stats(archive.samples, tr.split_idx.train);
  tr.model = build_any_model(rc.model_kind, rc.model, Rng(rc.model.seed));
  AdamState adam = rc.adam;
  tr.result = train(*tr.model, archive.samples, tr.split_idx, rc.train, adam, tr.stats);
  return tr;
}

void write_epoch_csv(const std::string& path, const std::vector<EpochRow>& rows,
                     bool zero_timing) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(17);
  out << "epoch,train_mse,val_mse,seconds\n";
  for (const auto& r : rows)
    out << r.epoch << "," << r.train_mse << "," << r.val_mse << ","
        << (zero_timing ? 0.0 : r.seconds) << "\n";
}

int cmd_train(const std::string& config_path, const std::string& archive_path,
              const std::string& out_dir_s, const std::string& ablate, bool zero_timing) {
  RunConfig rc = load_run_config(config_path);
  std::string label = rc.model_kind;
  if (!ablate.empty()) {
    std::istringstream as(ablate);
    std::string flag;
    while (std::getline(as, flag, ',')) {
      if (flag == "no-frm") rc.model.use_frm = false;
      else if (flag == "no-hmha") rc.model.use_hmha = false;
      else throw ConfigError("unknown ablation flag '" + flag + "'");
    }
    if (!rc.model.use_frm && !rc.model.use_hmha) label += " w/o FRM & HMHA";
    else if (!rc.model.use_frm) label += " w/o FRM";
    else label += " w/o HMHA";
  }
  SampleArchive archive = read_archive(archive_path);
  fs::path out_dir(out_dir_s);
  fs::create_directories(out_dir);
  write_manifest(out_dir, rc, archive_path, fnv1a_file(archive_path));

  TrainedRun tr = run_training(rc, archive);
  write_split_index(tr.split_idx, (out_dir / "split_index.txt").string());
  write_epoch_csv((out_dir / "epochs.csv").string(), tr.result.epochs, zero_timing);
  save_checkpoint(*tr.model, tr.stats, (out_dir / "checkpoint.bin").string());

  MetricsReport val = eval_split(*tr.model, archive.samples, tr.split_idx.val, tr.stats);
  std::ofstream mcsv(out_dir / "metrics.csv");
  mcsv.precision(17);
  mcsv << kMetricsHeader;
  write_metrics_row(mcsv, label, rc.model.target, count_params(*tr.model).count, val);

  if (tr.result.diverged) {
    std::cerr << "training diverged; best finite checkpoint retained\n";
    return 5;
  }
  std::cout << "best epoch " << tr.result.best_epoch << ", val mse " << tr.result.best_val_mse
            << ", epochs run " << tr.result.epochs.size() << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& archive_path,
             const std::string& split_name, const std::string& out_csv) {
  LoadedCheckpoint lc = load_checkpoint(ckpt_path);
  SampleArchive archive = read_archive(archive_path);
  if (archive.window_width != lc.model->config().window_width) {
    ModelConfig geom = lc.model->config();
    ModelConfig arch_geom = geom;
    arch_geom.window_width = archive.window_width;
    throw FormatError("checkpoint/archive geometry mismatch: checkpoint hash " +
                      std::to_string(geom.hash()) + " (W=" + std::to_string(geom.window_width) +
                      ") vs archive-implied hash " + std::to_string(arch_geom.hash()) +
                      " (W=" + std::to_string(archive.window_width) + ")");
  }
  SplitIndex idx = split(archive.samples.size(), lc.model->config().seed);
  const std::vector<std::size_t>* ids = nullptr;
  if (split_name == "train") ids = &idx.train;
  else if (split_name == "val") ids = &idx.val;
  else if (split_name == "test") ids = &idx.test;
  else throw ConfigError("split must be train|val|test");

  MetricsReport r = eval_split(*lc.model, archive.samples, *ids, lc.stats);
  std::cout << kMetricsHeader;
  write_metrics_row(std::cout, lc.model->kind(), lc.model->config().target,
                    count_params(*lc.model).count, r);
  if (!out_csv.empty()) {
    std::ofstream out(out_csv);
    out.precision(17);
    out << kMetricsHeader;
    write_metrics_row(out, lc.model->kind(), lc.model->config().target,
                      count_params(*lc.model).count, r);
  }
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& archive_path,
              const std::string& out_dir_s) {
  RunConfig rc = load_run_config(config_path);
  SampleArchive archive = read_archive(archive_path);
  fs::path out_dir(out_dir_s);
  fs::create_directories(out_dir);
  write_manifest(out_dir, rc, archive_path, fnv1a_file(archive_path));

  std::ofstream csv(out_dir / "sweep.csv");
  csv.precision(17);
  csv << "activation," << kMetricsHeader;
  for (const std::string act : {"relu", "tanh", "sigmoid", "softsign"}) {
    RunConfig run = rc;
    run.model.activation = act;
    TrainedRun tr = run_training(run, archive);
    MetricsReport val = eval_split(*tr.model, archive.samples, tr.split_idx.val, tr.stats);
    csv << act << ",";
    write_metrics_row(csv, run.model_kind, run.model.target, count_params(*tr.model).count, val);
    std::cout << act << ": val rmse " << val.rmse << ", r2 "
              << (val.r2_defined ? std::to_string(val.r2) : "nan") << "\n";
  }
  return 0;
}

int cmd_bench(const std::string& ckpt_path, const std::string& archive_path, std::size_t repeats,
              const std::string& out_csv) {
  LoadedCheckpoint lc = load_checkpoint(ckpt_path);
  SampleArchive archive = read_archive(archive_path);
  if (archive.window_width != lc.model->config().window_width)
    throw FormatError("checkpoint/archive geometry mismatch (W=" +
                      std::to_string(lc.model->config().window_width) + " vs " +
                      std::to_string(archive.window_width) + ")");
  BenchResult br = bench_inference(*lc.model, archive.samples, lc.stats, repeats);
  ParamCount pc = count_params(*lc.model);

  std::vector<double> sorted = br.run_totals;
  std::sort(sorted.begin(), sorted.end());
  std::cout << "samples: " << br.report.count << ", params: " << pc.count << " (" << pc.bytes
            << " bytes)\n";
  std::cout << "total median: " << br.report.total_seconds << " s, per-sample: "
            << br.report.per_sample_seconds << " s\n";
  std::cout << "run totals (sorted):";
  for (double v : sorted) std::cout << " " << v;
  std::cout << "\n";
  if (!out_csv.empty()) {
    std::ofstream out(out_csv);
    out.precision(17);
    out << "model,params,bytes,samples,total_median_s,per_sample_s,total_min_s,total_max_s\n";
    out << lc.model->kind() << "," << pc.count << "," << pc.bytes << "," << br.report.count << ","
        << br.report.total_seconds << "," << br.report.per_sample_seconds << ","
        << sorted.front() << "," << sorted.back() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MENGLAN gas-concentration regression toolkit"};
  app.require_subcommand(1);

  std::string raw_path, archive_path, config_path, out_dir, ckpt_path, split_name = "test";
  std::string ablate, out_csv;
  std::size_t width = 64, stride = 64, cap = 0, repeats = 3;
  bool zero_timing = false;

  auto* ingest = app.add_subcommand("ingest", "parse a raw file into a sample archive");
  ingest->add_option("raw", raw_path, "raw whitespace text file")->required();
  ingest->add_option("archive", archive_path, "output archive path")->required();
  ingest->add_option("--width", width, "window width W");
  ingest->add_option("--stride", stride, "window stride");
  ingest->add_option("--cap", cap, "max windows per level span (0 = unlimited)");

  auto* train_cmd = app.add_subcommand("train", "train a model from a config file");
  train_cmd->add_option("config", config_path, "flat key=value config file")->required();
  train_cmd->add_option("archive", archive_path)->required();
  train_cmd->add_option("outdir", out_dir)->required();
  train_cmd->add_option("--ablate", ablate, "comma list: no-frm,no-hmha");
  train_cmd->add_flag("--zero-timing", zero_timing,
                      "write 0 for the seconds column (byte-reproducible CSVs)");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  eval_cmd->add_option("checkpoint", ckpt_path)->required();
  eval_cmd->add_option("archive", archive_path)->required();
  eval_cmd->add_option("--split", split_name, "train|val|test");
  eval_cmd->add_option("--csv", out_csv, "also write the row to this file");

  auto* sweep_cmd = app.add_subcommand("sweep", "train all four activations, shared seed");
  sweep_cmd->add_option("config", config_path)->required();
  sweep_cmd->add_option("archive", archive_path)->required();
  sweep_cmd->add_option("outdir", out_dir)->required();

  auto* bench_cmd = app.add_subcommand("bench", "batch-1 inference latency");
  bench_cmd->add_option("checkpoint", ckpt_path)->required();
  bench_cmd->add_option("archive", archive_path)->required();
  bench_cmd->add_option("--repeats", repeats);
  bench_cmd->add_option("--csv", out_csv);

  CLI11_PARSE(app, argc, argv);

  try {
    if (ingest->parsed()) return cmd_ingest(raw_path, archive_path, width, stride, cap);
    if (train_cmd->parsed())
      return cmd_train(config_path, archive_path, out_dir, ablate, zero_timing);
    if (eval_cmd->parsed()) return cmd_eval(ckpt_path, archive_path, split_name, out_csv);
    if (sweep_cmd->parsed()) return cmd_sweep(config_path, archive_path, out_dir);
    if (bench_cmd->parsed()) return cmd_bench(ckpt_path, archive_path, repeats, out_csv);
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 4;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 5;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
