// End-to-end checks of the command-line front end: exit codes, artifacts,
// determinism. Shells out to the built binaries.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "menglan/checkpoint.hpp"
#include "menglan/data.hpp"
#include "menglan/synth.hpp"

using namespace menglan;
namespace fs = std::filesystem;

namespace {

int run(const std::string& cmd) {
  int rc = std::system((cmd + " > /dev/null 2>&1").c_str());
  return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

struct Workspace {
  fs::path dir;
  Workspace() {
    dir = fs::temp_directory_path() / ("menglan_cli_test_" + std::to_string(::getpid()));
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string p(const std::string& name) const { return (dir / name).string(); }
};

const std::string cli = MENGLAN_CLI_BIN;

void write_tiny_config(const std::string& path, std::size_t w, std::uint64_t seed) {
  std::ofstream out(path);
  out << "window_width=" << w << "\n"
      << "width_multiplier=0.1\n"
      << "heads=2\n"
      << "stream_depth=2\n"
      << "dropout_rate=0.0\n"
      << "seed=" << seed << "\n"
      << "lr=0.005\n"
      << "weight_decay=0.0\n"
      << "batch_size=16\n"
      << "max_epochs=4\n"
      << "patience_epochs=3\n";
}

void make_raw(const Workspace& ws, const std::string& name, std::size_t levels,
              std::size_t span) {
  SynthConfig sc;
  sc.levels = levels;
  sc.span_length = span;
  write_raw_file(generate_raw_records(sc), ws.p(name));
}

}  // namespace

TEST_CASE("ingest: cap=1 over a 3-level file reports 3 samples") {
  Workspace ws;
  make_raw(ws, "raw.txt", 3, 40);
  CHECK(run(cli + " ingest " + ws.p("raw.txt") + " " + ws.p("a.bin") +
            " --width 16 --stride 16 --cap 1") == 0);
  SampleArchive a = read_archive(ws.p("a.bin"));
  CHECK(a.samples.size() == 3);
}

TEST_CASE("ingest: missing file exits 2") {
  Workspace ws;
  CHECK(run(cli + " ingest " + ws.p("nope.txt") + " " + ws.p("a.bin")) == 2);
}

TEST_CASE("ingest: level count matches detect_levels on the same file") {
  Workspace ws;
  make_raw(ws, "raw.txt", 7, 30);
  auto records = parse_raw_file(ws.p("raw.txt"));
  auto levels = detect_levels(records);
  // the CLI prints the span count; cross-check by re-running the pipeline
  CHECK(run(cli + " ingest " + ws.p("raw.txt") + " " + ws.p("a.bin") +
            " --width 16 --stride 16") == 0);
  SampleArchive a = read_archive(ws.p("a.bin"));
  std::size_t max_level = 0;
  for (const auto& s : a.samples) max_level = std::max<std::size_t>(max_level, s.level_id);
  CHECK(max_level + 1 == levels.size());
}

TEST_CASE("train: writes all artifacts; identical reruns are byte-identical") {
  Workspace ws;
  make_raw(ws, "raw.txt", 8, 80);
  REQUIRE(run(cli + " ingest " + ws.p("raw.txt") + " " + ws.p("a.bin") +
              " --width 16 --stride 8") == 0);
  write_tiny_config(ws.p("cfg.txt"), 16, 11);

  REQUIRE(run(cli + " train " + ws.p("cfg.txt") + " " + ws.p("a.bin") + " " + ws.p("out1") +
              " --zero-timing") == 0);
  for (const char* f : {"checkpoint.bin", "epochs.csv", "metrics.csv", "manifest.json",
                        "split_index.txt"})
    CHECK(fs::exists(ws.dir / "out1" / f));

  REQUIRE(run(cli + " train " + ws.p("cfg.txt") + " " + ws.p("a.bin") + " " + ws.p("out2") +
              " --zero-timing") == 0);
  CHECK(slurp(ws.dir / "out1" / "epochs.csv") == slurp(ws.dir / "out2" / "epochs.csv"));
  CHECK(slurp(ws.dir / "out1" / "checkpoint.bin") == slurp(ws.dir / "out2" / "checkpoint.bin"));
}

TEST_CASE("train: ablation flags label the metrics row") {
  Workspace ws;
  make_raw(ws, "raw.txt", 8, 80);
  REQUIRE(run(cli + " ingest " + ws.p("raw.txt") + " " + ws.p("a.bin") +
              " --width 16 --stride 8") == 0);
  write_tiny_config(ws.p("cfg.txt"), 16, 11);
  REQUIRE(run(cli + " train " + ws.p("cfg.txt") + " " + ws.p("a.bin") + " " + ws.p("out") +
              " --ablate no-frm,no-hmha") == 0);
  std::string csv = slurp(ws.dir / "out" / "metrics.csv");
  CHECK(csv.find("w/o FRM & HMHA") != std::string::npos);
}

TEST_CASE("train: unknown config key exits 3") {
  Workspace ws;
  make_raw(ws, "raw.txt", 6, 60);
  REQUIRE(run(cli + " ingest " + ws.p("raw.txt") + " " + ws.p("a.bin") +
              " --width 16 --stride 16") == 0);
  {
    std::ofstream out(ws.p("bad.txt"));
    out << "window_width=16\nlearning_rate_typo=1\n";
  }
  CHECK(run(cli + " train " + ws.p("bad.txt") + " " + ws.p("a.bin") + " " + ws.p("out")) == 3);
}

TEST_CASE("eval: repeated evaluation is identical; corrupted magic exits 4") {
  Workspace ws;
  make_raw(ws, "raw.txt", 8, 80);
  REQUIRE(run(cli + " ingest " + ws.p("raw.txt") + " " + ws.p("a.bin") +
              " --width 16 --stride 8") == 0);
  write_tiny_config(ws.p("cfg.txt"), 16, 11);
  REQUIRE(run(cli + " train " + ws.p("cfg.txt") + " " + ws.p("a.bin") + " " + ws.p("out")) == 0);
  std::string ck = (ws.dir / "out" / "checkpoint.bin").string();

  REQUIRE(run(cli + " eval " + ck + " " + ws.p("a.bin") + " --split val --csv " +
              ws.p("r1.csv")) == 0);
  REQUIRE(run(cli + " eval " + ck + " " + ws.p("a.bin") + " --split val --csv " +
              ws.p("r2.csv")) == 0);
  auto strip_timing = [](std::string csv) {
    // timing columns vary run to run; compare the metric columns only
    std::istringstream is(csv);
    std::string line, out;
    while (std::getline(is, line)) {
      auto pos = line.rfind(',');
      pos = line.rfind(',', pos - 1);
      out += line.substr(0, pos) + "\n";
    }
    return out;
  };
  CHECK(strip_timing(slurp(ws.dir / "r1.csv")) == strip_timing(slurp(ws.dir / "r2.csv")));

  {
    std::fstream f(ck, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  CHECK(run(cli + " eval " + ck + " " + ws.p("a.bin") + " --split val") == 4);
}

TEST_CASE("bench: emits a csv with params and latency") {
  Workspace ws;
  make_raw(ws, "raw.txt", 6, 80);
  REQUIRE(run(cli + " ingest " + ws.p("raw.txt") + " " + ws.p("a.bin") +
              " --width 16 --stride 16") == 0);
  write_tiny_config(ws.p("cfg.txt"), 16, 11);
  REQUIRE(run(cli + " train " + ws.p("cfg.txt") + " " + ws.p("a.bin") + " " + ws.p("out")) == 0);
  REQUIRE(run(cli + " bench " + (ws.dir / "out" / "checkpoint.bin").string() + " " +
              ws.p("a.bin") + " --repeats 2 --csv " + ws.p("bench.csv")) == 0);
  std::string csv = slurp(ws.dir / "bench.csv");
  CHECK(csv.find("per_sample_s") != std::string::npos);
}
