#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "gacn/trainer.hpp"
#include "oracles.hpp"

using gacn::Rng;
using gacn::Tensor;
using gacn::TrainConfig;
namespace fs = std::filesystem;

namespace {

TrainConfig toy_config() {
  TrainConfig c;
  c.resize = 32;
  c.augment.crop = 24;
  c.batch_size = 2;
  c.epochs = 3;
  c.seed = 5;
  return c;
}

std::vector<gacn::TrainingSample> toy_samples(std::size_t n, std::uint64_t seed0 = 50) {
  std::vector<gacn::TrainingSample> out;
  Rng rng(seed0);
  for (std::size_t i = 0; i < n; ++i) {
    auto [img, mask] = gacn::synth_scene(40, 40, seed0 + i);
    auto s = gacn::generate_pair(img, mask, rng.uniform(1.5, 3.5));
    s.id = "t" + std::to_string(i);
    out.push_back(std::move(s));
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("gacn_trainer_" + name);
  fs::remove_all(d);
  return d;
}

bool same_weights(const gacn::WeightStore& a, const gacn::WeightStore& b) {
  for (const auto& [name, t] : a) {
    const Tensor& u = b.at(name);
    for (std::size_t i = 0; i < t.numel(); ++i)
      if (t[i] != u[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("adam") {
  gacn::WeightStore w;
  w.add("p", Tensor({4}, std::vector<double>{0.0, 0.5, -0.25, 1.0}, true));
  SUBCASE("zero gradient leaves parameters unchanged") {
    auto st = gacn::AdamState::for_params(w);
    w.at("p").grad();  // zero buffer
    gacn::adam_step(w, st, 1e-3);
    CHECK(w.at("p")[1] == 0.5);
    CHECK(w.at("p")[3] == 1.0);
    CHECK(st.step == 1);
  }
  SUBCASE("first step moves by lr against the gradient sign") {
    auto st = gacn::AdamState::for_params(w);
    const std::vector<double> g{0.3, -2.0, 1e-3, -0.7};
    const std::vector<double> before{0.0, 0.5, -0.25, 1.0};
    for (std::size_t i = 0; i < 4; ++i) w.at("p").grad()[i] = g[i];
    const double lr = 1e-3;
    gacn::adam_step(w, st, lr);
    for (std::size_t i = 0; i < 4; ++i) {
      const double expected = before[i] - lr * (g[i] > 0 ? 1.0 : -1.0);
      CHECK(std::abs(w.at("p")[i] - expected) < 1e-7);
    }
    for (double v : w.at("p").grad()) CHECK(v == 0.0);
  }
  SUBCASE("mismatched state is rejected") {
    gacn::AdamState st;
    CHECK_THROWS_AS(gacn::adam_step(w, st, 1e-3), gacn::ShapeError);
  }
}

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  CHECK(gacn::lr_at(0, c) == 1e-4);
  CHECK(gacn::lr_at(1, c) == 1e-4);
  CHECK(gacn::lr_at(2, c) == doctest::Approx(8e-5).epsilon(1e-14));
  CHECK(gacn::lr_at(4, c) == doctest::Approx(6.4e-5).epsilon(1e-14));
  CHECK(gacn::lr_at(5, c) == doctest::Approx(6.4e-5).epsilon(1e-14));
}

TEST_CASE("presets and validation") {
  const auto desk = TrainConfig::desk(), paper = TrainConfig::paper();
  CHECK(desk.augment.crop == 128);
  CHECK(desk.batch_size == 8);
  CHECK(desk.epochs == 20);
  CHECK(paper.resize == 256);
  CHECK(paper.augment.crop == 156);
  CHECK(paper.batch_size == 16);
  CHECK(paper.epochs == 50);
  CHECK(desk.loss.lambda == 1.0);
  TrainConfig bad;
  bad.lr0 = 0.0;
  CHECK_THROWS(bad.validate());
  bad = {};
  bad.decay = 1.5;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("dataset split") {
  auto samples = toy_samples(10);
  const auto d = gacn::split_dataset(samples, 0.3, 1);
  CHECK(d.train.size() == 7);
  CHECK(d.val.size() == 3);
  const auto again = gacn::split_dataset(samples, 0.3, 1);
  for (std::size_t i = 0; i < 3; ++i) CHECK(again.val[i].id == d.val[i].id);
  const auto one = gacn::split_dataset(toy_samples(1), 0.3, 1);
  CHECK(one.train.size() == 1);
  CHECK(one.val.size() == 1);
}

TEST_CASE("gradient reaches every parameter") {
  const auto cfg = toy_config();
  gacn::GacnModel model(cfg.network, gacn::init_weights(cfg.network, 3));
  const auto s = gacn::prepare_eval(toy_samples(1)[0], cfg);
  gacn::accumulate_gradients(model, s, cfg.loss, 1);
  for (const auto& [name, t] : model.weights()) {
    double norm = 0.0;
    for (double g : std::as_const(t).grad()) norm += g * g;
    CHECK_MESSAGE(norm > 0.0, name);
  }
}

TEST_CASE("loss decreases on a fixed batch") {
  auto cfg = toy_config();
  gacn::GacnModel model(cfg.network, gacn::init_weights(cfg.network, 4));
  auto st = gacn::AdamState::for_params(model.weights());
  const auto batch = toy_samples(2);
  std::vector<gacn::TrainingSample> prepared;
  for (const auto& s : batch) prepared.push_back(gacn::prepare_eval(s, cfg));
  double prev = 1e300;
  for (int step = 0; step < 6; ++step) {
    double total = 0.0;
    for (const auto& s : prepared) total += gacn::accumulate_gradients(model, s, cfg.loss, 2).total;
    if (step > 0) CHECK(total < prev);
    prev = total;
    gacn::adam_step(model.weights(), st, cfg.lr0);
  }
}

TEST_CASE("non-finite losses abort") {
  const auto cfg = toy_config();
  gacn::GacnModel model(cfg.network, gacn::init_weights(cfg.network, 3));
  auto s = gacn::prepare_eval(toy_samples(1)[0], cfg);
  s.near_focused.data[5] = std::nan("");
  CHECK_THROWS_AS(gacn::accumulate_gradients(model, s, cfg.loss, 1), gacn::NumericalError);
}

TEST_CASE("checkpoints") {
  const auto cfg = toy_config();
  const fs::path dir = scratch_dir("ckpt");
  gacn::TrainOptions opt;
  opt.out_dir = dir;
  opt.stop_after = 1;
  const auto data = gacn::split_dataset(toy_samples(4), 0.3, cfg.seed);
  const auto r = gacn::train(data, cfg, opt);
  const auto layout = gacn::weight_layout(cfg.network);

  SUBCASE("save, load, save is byte-identical") {
    const auto st = gacn::load_checkpoint(dir / "last.ckpt", layout);
    CHECK(st.epochs_done == 1);
    CHECK(st.adam.step == r.state.adam.step);
    CHECK(st.log == r.state.log);
    gacn::save_checkpoint(st, dir / "again.ckpt");
    CHECK(slurp(dir / "again.ckpt") == slurp(dir / "last.ckpt"));
  }
  SUBCASE("a mismatched architecture is rejected") {
    gacn::NetworkConfig narrow;
    narrow.extraction.channels_per_layer = 8;
    CHECK_THROWS_AS(gacn::load_checkpoint(dir / "last.ckpt", gacn::weight_layout(narrow)), gacn::DataError);
  }
  SUBCASE("truncated checkpoints are rejected") {
    const std::string bytes = slurp(dir / "last.ckpt");
    std::istringstream is(bytes.substr(0, bytes.size() - 10));
    CHECK_THROWS_AS(gacn::read_checkpoint(is, layout), gacn::DataError);
  }
  SUBCASE("reloaded weights reproduce validation metrics exactly") {
    gacn::GacnModel model(cfg.network, gacn::load_weights(dir / "best.gacn", layout));
    double dice = 0.0, qg = 0.0;
    for (const auto& s : data.val) {
      const auto p = gacn::evaluate_sample(model, gacn::prepare_eval(s, cfg));
      dice += p.dice;
      qg += p.qg;
    }
    const double n = static_cast<double>(data.val.size());
    CHECK(dice / n == r.state.log[0].val_dice);
    CHECK(qg / n == r.state.log[0].val_qg);
  }
  fs::remove_all(dir);
}

TEST_CASE("training runs") {
  SUBCASE("one sample, one epoch") {
    auto cfg = toy_config();
    cfg.epochs = 1;
    std::vector<gacn::EpochLog> seen;
    gacn::TrainOptions opt;
    opt.on_epoch = [&](const gacn::EpochLog& row) { seen.push_back(row); };
    const auto r = gacn::train(gacn::split_dataset(toy_samples(1), 0.3, 1), cfg, opt);
    CHECK(r.state.log.size() == 1);
    CHECK(seen.size() == 1);
    CHECK(std::isfinite(r.state.log[0].val_dice));
  }
  SUBCASE("empty training set is rejected") {
    CHECK_THROWS_AS(gacn::train({}, toy_config()), gacn::DataError);
  }
  SUBCASE("identical seeds give identical weights; resuming matches an uninterrupted run") {
    const auto cfg = toy_config();
    const auto data = gacn::split_dataset(toy_samples(5), 0.3, cfg.seed);
    const auto full = gacn::train(data, cfg);
    const auto twin = gacn::train(data, cfg);
    CHECK(same_weights(full.state.weights, twin.state.weights));
    CHECK(full.state.log == twin.state.log);

    const fs::path dir = scratch_dir("resume");
    gacn::TrainOptions first;
    first.out_dir = dir;
    first.stop_after = 1;
    gacn::train(data, cfg, first);
    gacn::TrainOptions rest;
    rest.resume_from = dir / "last.ckpt";
    const auto resumed = gacn::train(data, cfg, rest);
    CHECK(resumed.state.log == full.state.log);
    CHECK(same_weights(resumed.state.weights, full.state.weights));
    CHECK(same_weights(resumed.best, full.best));
    CHECK(resumed.state.adam.step == full.state.adam.step);
    CHECK(resumed.state.adam.m == full.state.adam.m);
    CHECK(resumed.state.adam.v == full.state.adam.v);

    auto other = cfg;
    other.seed = 6;
    CHECK_FALSE(same_weights(gacn::train(data, other).state.weights, full.state.weights));
    fs::remove_all(dir);
  }
  SUBCASE("metrics csv") {
    const fs::path dir = scratch_dir("csv");
    fs::create_directories(dir);
    gacn::write_metrics_csv({{0, 1e-4, 0.5, 0.4, 0.8, 0.6}}, dir / "m.csv");
    std::ifstream is(dir / "m.csv");
    std::string header, row;
    std::getline(is, header);
    std::getline(is, row);
    CHECK(header == "epoch,lr,train_dice,train_qg,val_dice,val_qg");
    CHECK(row.rfind("0,0.0001", 0) == 0);
    fs::remove_all(dir);
  }
}
