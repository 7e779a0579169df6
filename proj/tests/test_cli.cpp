// Copyright 2026 The ternvit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>

using std::filesystem::path;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string out;
};

std::string bin() {
  const char* dir = std::getenv("TERNVIT_BIN_DIR");
  return ((dir ? path(dir) : path("build")) / "ternvit").string();
}

std::string src_dir() {
  const char* dir = std::getenv("TERNVIT_SRC_DIR");
  return dir ? dir : ".";
}

CliResult run_cli(const std::string& args, bool keep_stderr = false) {
  const std::string cmd = bin() + " " + args + (keep_stderr ? " 2>&1" : " 2>/dev/null");
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CliResult res;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof(buf), pipe)) res.out.append(buf, n);
  const int status = pclose(pipe);
  res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return res;
}

std::string tmp_file(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("ternvit_cli_" + name)).string();
}

std::string read_text(const std::string& p) {
  std::ifstream f(p);
  REQUIRE(bool(f));
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

// Tiny synthetic run so end-to-end commands finish in well under a second.
std::string quick_config() {
  const std::string p = tmp_file("quick.cfg");
  std::ofstream f(p);
  f << "[model]\nimage_size = 16\npatch_size = 8\nin_channels = 1\nembed_dim = 16\n"
       "depth = 2\nnum_heads = 2\nnum_classes = 2\n"
       "[schedule]\nphase_a_epochs = 1\nphase_b_epochs = 2\nbatch_size = 32\n"
       "[data]\nkind = synthetic\nsamples = 64\nclasses = 2\nseed = 7\n"
       "eval_samples = 32\neval_seed = 8\n";
  return p;
}

// Split one CSV line into fields.
std::vector<std::string> fields(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string f;
  while (std::getline(is, f, ',')) out.push_back(f);
  return out;
}

std::string second_line(const std::string& text) {
  const auto nl = text.find('\n');
  REQUIRE(nl != std::string::npos);
  const auto end = text.find('\n', nl + 1);
  return text.substr(nl + 1, end - nl - 1);
}

}  // namespace

TEST_CASE("every command documents itself and exits zero on --help") {
  CHECK(run_cli("--help").exit_code == 0);
  for (const char* cmd : {"train", "progressive", "ablate", "eval", "quantize", "size",
                          "diagnose", "landscape", "bench"}) {
    const auto res = run_cli(std::string(cmd) + " --help");
    CHECK(res.exit_code == 0);
    CHECK(res.out.find("--") != std::string::npos);
  }
}

TEST_CASE("bad invocations exit with the validation code") {
  CHECK(run_cli("frobnicate").exit_code == 1);
  CHECK(run_cli("size").exit_code == 1);  // missing required --config
  CHECK(run_cli("size --config x.cfg --bogus").exit_code == 1);
  const std::string cfg = quick_config();
  CHECK(run_cli("train --config " + cfg + " --mode int4").exit_code == 1);
  CHECK(run_cli("eval --ckpt " + tmp_file("absent.ckpt")).exit_code == 2);
}

TEST_CASE("size command reproduces the published smallest-model numbers") {
  const auto res = run_cli("size --config " + src_dir() + "/configs/deit_t.cfg");
  REQUIRE(res.exit_code == 0);
  const auto row = fields(second_line(res.out));
  REQUIRE(row.size() == 4);
  CHECK(row[0] == "ternary");
  CHECK(std::stod(row[1]) == doctest::Approx(22.7).epsilon(0.02));
  CHECK(std::abs(std::stod(row[2]) - 1.6) <= 0.15);
  CHECK(std::abs(std::stod(row[3]) - 13.35) <= 0.5);
}

TEST_CASE("train then eval beats the smoke accuracy bar on the toy task") {
  const std::string ckpt = tmp_file("real32.ckpt");
  const std::string trace = tmp_file("real32_trace.csv");
  const auto train = run_cli("train --config " + src_dir() + "/configs/toy.cfg" +
                             " --mode real32 --out " + ckpt + " --trace " + trace);
  REQUIRE(train.exit_code == 0);
  CHECK(read_text(trace).rfind("phase,epoch,train_loss,train_acc,eval_acc\n", 0) == 0);

  const auto ev = run_cli("eval --ckpt " + ckpt + " --split train");
  REQUIRE(ev.exit_code == 0);
  const auto row = fields(second_line(ev.out));
  REQUIRE(row.size() == 4);
  CHECK(row[0] == "train");
  CHECK(std::stod(row[1]) == 200);
  CHECK(std::stod(row[2]) > 0.9);
}

TEST_CASE("progressive runs are byte deterministic and feed quantize") {
  const std::string cfg = quick_config();
  const std::string ckpt = tmp_file("prog.ckpt");
  const std::string t1 = tmp_file("prog1.csv");
  const std::string t2 = tmp_file("prog2.csv");
  REQUIRE(run_cli("progressive --config " + cfg + " --out " + ckpt + " --trace " + t1)
              .exit_code == 0);
  REQUIRE(run_cli("progressive --config " + cfg + " --trace " + t2).exit_code == 0);
  CHECK(read_text(t1) == read_text(t2));

  const std::string deployed = tmp_file("prog_deployed.ckpt");
  REQUIRE(run_cli("quantize --ckpt " + ckpt + " --policy ternary --out " + deployed)
              .exit_code == 0);
  CHECK(std::filesystem::file_size(deployed) < std::filesystem::file_size(ckpt));
  CHECK(run_cli("eval --ckpt " + deployed).exit_code == 0);
}

TEST_CASE("diagnose and landscape read checkpoints back") {
  const std::string cfg = quick_config();
  const std::string ckpt = tmp_file("diag.ckpt");
  REQUIRE(run_cli("train --config " + cfg + " --mode ternary --out " + ckpt + " --trace " +
                  tmp_file("diag_trace.csv"))
              .exit_code == 0);

  const auto diag = run_cli("diagnose --ckpt " + ckpt);
  REQUIRE(diag.exit_code == 0);
  CHECK(diag.out.rfind("layer,channels,sdam,dead_count,reference_min_cam\n", 0) == 0);
  CHECK(diag.out.find("patch_embed") != std::string::npos);

  const auto land = run_cli("landscape --ckpt " + ckpt + " --resolution 3 --span 0.2");
  REQUIRE(land.exit_code == 0);
  CHECK(land.out.rfind(",-0.2,0,0.2\n", 0) == 0);

  CHECK(run_cli("landscape --ckpt " + ckpt + " --resolution 4").exit_code == 1);  // even grid
}

TEST_CASE("bench prints one row per shape") {
  const auto res = run_cli("bench --shapes 8:16:16,16:16:8 --iters 1");
  REQUIRE(res.exit_code == 0);
  std::istringstream is(res.out);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  REQUIRE(lines.size() == 3);
  CHECK(lines[0] == "m,k,n,dense_ms,ternary_f32_ms,ternary_i8_ms");
  CHECK(lines[1].rfind("8,16,16,", 0) == 0);
  CHECK(run_cli("bench --shapes nonsense").exit_code == 1);
}
