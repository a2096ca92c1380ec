#include <sys/wait.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <string>

#include "doctest.h"
#include "gacn/datagen.hpp"
#include "gacn/stack.hpp"
#include "gacn/trainer.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

// Runs the CLI with `args`, capturing stdout and stderr.
Run gacn_cli(const std::string& args) {
  const std::string cmd = std::string(GACN_CLI) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 512> buf;
  while (std::fgets(buf.data(), buf.size(), pipe)) r.out += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

// Scratch directory with a small synthetic corpus, its samples and a one-epoch model.
struct Workspace {
  fs::path root;
  Workspace() : root(fs::temp_directory_path() / "gacn_cli") {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Workspace() { fs::remove_all(root); }
  std::string at(const std::string& rel) const { return (root / rel).string(); }
};

Workspace& shared() {
  static Workspace ws = [] {
    Workspace w;
    gacn::write_synth_corpus(w.root / "corpus", 4, 48, 3);
    gacn::generate_dataset(w.root / "corpus/images", w.root / "corpus/masks", w.root / "data", {}, 2);
    return w;
  }();
  return ws;
}

std::string trained_weights() {
  static const std::string path = [] {
    auto& w = shared();
    const Run r = gacn_cli("train --manifest " + w.at("data/manifest.tsv") + " --out " + w.at("model") +
                           " --epochs 1 --seed 4");
    REQUIRE(r.code == 0);
    return w.at("model/best.gacn");
  }();
  return path;
}

}  // namespace

TEST_CASE("usage errors") {
  CHECK(gacn_cli("").code == 1);
  CHECK(gacn_cli("frobnicate").code == 1);
  CHECK(gacn_cli("fuse --a x.png").code == 1);
  auto& w = shared();
  CHECK(gacn_cli("train --manifest " + w.at("data/manifest.tsv") + " --out " + w.at("p") + " --preset huge").code == 1);
  CHECK(gacn_cli("--help").code == 0);
}

TEST_CASE("gen-data") {
  auto& w = shared();
  SUBCASE("an empty mask directory is an error") {
    fs::create_directories(w.root / "empty_masks");
    const Run r = gacn_cli("gen-data --images " + w.at("corpus/images") + " --masks " + w.at("empty_masks") +
                           " --out " + w.at("gd0"));
    CHECK(r.code == 2);
  }
  SUBCASE("three images give at most three entries, identically for one seed") {
    fs::create_directories(w.root / "three/images");
    fs::create_directories(w.root / "three/masks");
    for (int i = 0; i < 3; ++i) {
      const std::string name = "s000" + std::to_string(i) + ".png";
      fs::copy_file(w.root / "corpus/images" / name, w.root / "three/images" / name);
      fs::copy_file(w.root / "corpus/masks" / name, w.root / "three/masks" / name);
    }
    const std::string base = "gen-data --images " + w.at("three/images") + " --masks " + w.at("three/masks");
    REQUIRE(gacn_cli(base + " --out " + w.at("gd1") + " --seed 9").code == 0);
    REQUIRE(gacn_cli(base + " --out " + w.at("gd2") + " --seed 9").code == 0);
    const auto entries = gacn::read_manifest(w.root / "gd1/manifest.tsv");
    CHECK(entries.size() <= 3);
    CHECK_FALSE(entries.empty());
    CHECK(slurp(w.root / "gd1/manifest.tsv") == slurp(w.root / "gd2/manifest.tsv"));
    REQUIRE(gacn_cli(base + " --out " + w.at("gd3") + " --seed 10").code == 0);
    CHECK(slurp(w.root / "gd1/manifest.tsv") != slurp(w.root / "gd3/manifest.tsv"));
  }
}

TEST_CASE("train") {
  auto& w = shared();
  const std::string base = "train --manifest " + w.at("data/manifest.tsv") + " --seed 4";
  SUBCASE("smoke run writes a checkpoint and metrics") {
    const std::string weights = trained_weights();
    CHECK(fs::exists(weights));
    CHECK(fs::exists(w.root / "model/last.ckpt"));
    CHECK(fs::exists(w.root / "model/metrics.csv"));
  }
  SUBCASE("a missing manifest is an error") {
    CHECK(gacn_cli("train --manifest " + w.at("nope.tsv") + " --out " + w.at("t0")).code != 0);
  }
  SUBCASE("identical seeds give byte-identical checkpoints; resuming reproduces the metrics") {
    REQUIRE(gacn_cli(base + " --epochs 2 --out " + w.at("t1")).code == 0);
    REQUIRE(gacn_cli(base + " --epochs 2 --out " + w.at("t2")).code == 0);
    CHECK(slurp(w.root / "t1/last.ckpt") == slurp(w.root / "t2/last.ckpt"));
    REQUIRE(gacn_cli(base + " --epochs 1 --out " + w.at("t3")).code == 0);
    REQUIRE(gacn_cli(base + " --epochs 2 --out " + w.at("t4") + " --resume " + w.at("t3/last.ckpt")).code == 0);
    CHECK(slurp(w.root / "t4/metrics.csv") == slurp(w.root / "t1/metrics.csv"));
    CHECK(slurp(w.root / "t4/last.ckpt") == slurp(w.root / "t1/last.ckpt"));
  }
}

TEST_CASE("fuse") {
  auto& w = shared();
  const std::string weights = trained_weights();
  SUBCASE("identical inputs reproduce the input") {
    const std::string src = w.at("data/s0000_near.png");
    REQUIRE(gacn_cli("fuse --a " + src + " --b " + src + " --weights " + weights + " --out " + w.at("same.png")).code == 0);
    const auto in = gacn::load_image(src), out = gacn::load_image(w.root / "same.png");
    for (std::size_t i = 0; i < in.data.size(); ++i) CHECK(std::abs(in.data[i] - out.data[i]) <= 1.0 / 255 + 1e-12);
  }
  SUBCASE("colour inputs keep their channels; --emit-dm adds two maps") {
    auto [img, mask] = gacn::synth_scene(40, 40, 77, 3);
    const auto s = gacn::generate_pair(img, mask, 2.0);
    gacn::save_image(s.near_focused, w.root / "rgb_a.png");
    gacn::save_image(s.far_focused, w.root / "rgb_b.png");
    REQUIRE(gacn_cli("fuse --a " + w.at("rgb_a.png") + " --b " + w.at("rgb_b.png") + " --weights " + weights +
                     " --out " + w.at("rgb.png") + " --emit-dm")
                .code == 0);
    CHECK(gacn::load_image(w.root / "rgb.png").channels == 3);
    CHECK(fs::exists(w.root / "rgb_dm_initial.png"));
    CHECK(fs::exists(w.root / "rgb_dm_final.png"));
  }
  SUBCASE("size mismatch is a data error") {
    gacn::save_image(gacn::Image(30, 20), w.root / "small.png");
    const Run r = gacn_cli("fuse --a " + w.at("data/s0000_near.png") + " --b " + w.at("small.png") + " --weights " +
                           weights + " --out " + w.at("x.png"));
    CHECK(r.code == 2);
  }
  SUBCASE("a corrupted weight file is a clear data error") {
    std::string bytes = slurp(weights);
    std::ofstream(w.root / "bad.gacn", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    const Run r = gacn_cli("fuse --a " + w.at("data/s0000_near.png") + " --b " + w.at("data/s0000_far.png") +
                           " --weights " + w.at("bad.gacn") + " --out " + w.at("x.png"));
    CHECK(r.code == 2);
    CHECK(r.out.find("unexpected end") != std::string::npos);
  }
  SUBCASE("non-finite output is a numerical failure") {
    const gacn::NetworkConfig cfg;
    auto store = gacn::load_weights(weights, gacn::weight_layout(cfg));
    store.at("decide.3.conv_b")[0] = std::nan("");
    gacn::save_weights(store, w.root / "nan.gacn");
    const Run r = gacn_cli("fuse --a " + w.at("data/s0000_near.png") + " --b " + w.at("data/s0000_far.png") +
                           " --weights " + w.at("nan.gacn") + " --out " + w.at("x.png"));
    CHECK(r.code == 3);
  }
}

TEST_CASE("fuse-stack") {
  auto& w = shared();
  const std::string weights = trained_weights();
  fs::create_directories(w.root / "pair");
  fs::copy_file(w.root / "data/s0001_near.png", w.root / "pair/0.png", fs::copy_options::overwrite_existing);
  fs::copy_file(w.root / "data/s0001_far.png", w.root / "pair/1.png", fs::copy_options::overwrite_existing);
  SUBCASE("two calibrated images equal the binarized pair result") {
    const Run r = gacn_cli("fuse-stack --dir " + w.at("pair") + " --weights " + weights + " --out " +
                           w.at("pair.png") + " --strategy calibrated");
    REQUIRE(r.code == 0);
    const gacn::NetworkConfig cfg;
    const gacn::GacnModel model(cfg, gacn::load_weights(weights, gacn::weight_layout(cfg)));
    const auto a = gacn::load_image(w.root / "pair/0.png"), b = gacn::load_image(w.root / "pair/1.png");
    const auto pair = gacn::fuse_images(model, a, b);
    const auto out = gacn::load_image(w.root / "pair.png");
    for (std::size_t i = 0; i < out.data.size(); ++i) {
      CHECK(out.data[i] == (pair.dm_final.data[i] >= 0.5 ? a.data[i] : b.data[i]));
    }
  }
  SUBCASE("printed counters follow the strategy") {
    fs::create_directories(w.root / "stack4");
    for (int i = 0; i < 4; ++i) {
      fs::copy_file(w.root / ("data/s000" + std::to_string(i) + "_near.png"),
                    w.root / ("stack4/" + std::to_string(i) + ".png"), fs::copy_options::overwrite_existing);
    }
    const std::string base = "fuse-stack --dir " + w.at("stack4") + " --weights " + weights + " --out " + w.at("s4.png");
    const Run serial = gacn_cli(base + " --strategy serial");
    CHECK(serial.out.find("extraction=6 decision=3") != std::string::npos);
    const Run cal = gacn_cli(base + " --strategy calibrated --bench 1 --bench-csv " + w.at("b.csv"));
    CHECK(cal.out.find("calibrated N=4 extraction=4 decision=3") != std::string::npos);
    const std::string csv = slurp(w.root / "b.csv");
    CHECK(csv.find("serial,4,6,3,") != std::string::npos);
    CHECK(csv.find("calibrated,4,4,3,") != std::string::npos);
  }
  SUBCASE("a single image is an error") {
    fs::create_directories(w.root / "single");
    fs::copy_file(w.root / "pair/0.png", w.root / "single/0.png", fs::copy_options::overwrite_existing);
    CHECK(gacn_cli("fuse-stack --dir " + w.at("single") + " --weights " + weights + " --out " + w.at("s.png")).code == 2);
  }
}

TEST_CASE("eval and selfcheck") {
  auto& w = shared();
  const std::string weights = trained_weights();
  REQUIRE(gacn_cli("eval --pairs-dir " + w.at("data") + " --weights " + weights + " --out " + w.at("rep.csv")).code == 0);
  std::ifstream is(w.root / "rep.csv");
  std::string line;
  std::size_t gacn_rows = 0;
  while (std::getline(is, line)) gacn_rows += line.find(",gacn,") != std::string::npos;
  CHECK(gacn_rows == gacn::read_manifest(w.root / "data/manifest.tsv").size());
  const Run r = gacn_cli("selfcheck");
  CHECK(r.code == 0);
  CHECK(r.out.find("FAIL") == std::string::npos);
}
