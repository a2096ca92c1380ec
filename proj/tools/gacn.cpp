#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <stdexcept>
#include <string>

#include "CLI11.hpp"
#include "gacn/datagen.hpp"
#include "gacn/metrics.hpp"
#include "gacn/selfcheck.hpp"
#include "gacn/stack.hpp"
#include "gacn/trainer.hpp"

namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

gacn::TrainConfig preset_config(const std::string& preset) {
  if (preset == "desk") return gacn::TrainConfig::desk();
  if (preset == "paper") return gacn::TrainConfig::paper();
  throw std::invalid_argument("unknown preset '" + preset + "' (desk|paper)");
}

gacn::GacnModel load_model(const fs::path& path) {
  const gacn::NetworkConfig cfg;
  return gacn::GacnModel(cfg, gacn::load_weights(path, gacn::weight_layout(cfg)));
}

void require_finite(const gacn::Image& img, const char* what) {
  for (double v : img.data) {
    if (!std::isfinite(v)) throw gacn::NumericalError(std::string(what) + " contains non-finite values");
  }
}

fs::path sibling(const fs::path& out, const std::string& suffix) {
  return out.parent_path() / (out.stem().string() + suffix + ".png");
}

// Pairs in a directory: <id>_near / <id>_far (as written by gen-data) or <id>_a / <id>_b.
std::map<std::string, std::pair<fs::path, fs::path>> find_pairs(const fs::path& dir) {
  std::map<std::string, std::pair<fs::path, fs::path>> pairs;
  for (const auto& f : gacn::list_images(dir)) {
    const std::string stem = f.stem().string();
    for (const auto& [first, second] : {std::pair{"_near", "_far"}, std::pair{"_a", "_b"}}) {
      const std::string s1 = first, s2 = second;
      if (stem.size() > s1.size() && stem.ends_with(s1)) pairs[stem.substr(0, stem.size() - s1.size())].first = f;
      if (stem.size() > s2.size() && stem.ends_with(s2)) pairs[stem.substr(0, stem.size() - s2.size())].second = f;
    }
  }
  std::erase_if(pairs, [](const auto& kv) { return kv.second.first.empty() || kv.second.second.empty(); });
  if (pairs.empty()) throw gacn::DataError("no image pairs in " + dir.string());
  return pairs;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GACN multi-focus image fusion"};
  app.require_subcommand(1);

  std::string images, masks, out, preset = "desk", manifest, resume, a_path, b_path, weights, dir,
                                 strategy = "calibrated", bench_csv, pairs_dir, orientation = "abs";
  std::uint64_t seed = 1;
  std::size_t count = 200, side = 160, channels = 1, bench = 0, epochs = 0, threads = 0;
  double lambda = 1.0;
  bool emit_dm = false;

  auto* gen = app.add_subcommand("gen-data", "Build training pairs from images and masks");
  gen->add_option("--images", images, "Directory of all-in-focus images")->required()->check(CLI::ExistingDirectory);
  gen->add_option("--masks", masks, "Directory of binary masks, same file names")->required()->check(CLI::ExistingDirectory);
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--seed", seed, "Random seed");
  gen->add_option("--preset", preset, "desk or paper");

  auto* synth = app.add_subcommand("synth-corpus", "Write synthetic images and masks");
  synth->add_option("--out", out, "Output directory")->required();
  synth->add_option("--count", count, "Number of scenes");
  synth->add_option("--size", side, "Square side in pixels");
  synth->add_option("--channels", channels, "1 or 3")->check(CLI::IsMember({1, 3}));
  synth->add_option("--seed", seed, "Random seed");

  auto* train = app.add_subcommand("train", "Train on a manifest");
  train->add_option("--manifest", manifest, "Manifest written by gen-data")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out, "Output directory")->required();
  train->add_option("--preset", preset, "desk or paper");
  train->add_option("--seed", seed, "Random seed");
  train->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  train->add_option("--epochs", epochs, "Override the preset epoch count");
  train->add_option("--lambda", lambda, "Weight of the Q_g loss");
  train->add_option("--orientation", orientation, "abs or smooth")->check(CLI::IsMember({"abs", "smooth"}));

  auto* fuse = app.add_subcommand("fuse", "Fuse two images");
  fuse->add_option("--a", a_path, "First source")->required()->check(CLI::ExistingFile);
  fuse->add_option("--b", b_path, "Second source")->required()->check(CLI::ExistingFile);
  fuse->add_option("--weights", weights, "Trained weights")->required()->check(CLI::ExistingFile);
  fuse->add_option("--out", out, "Fused image")->required();
  fuse->add_flag("--emit-dm", emit_dm, "Also write <out>_dm_initial.png and <out>_dm_final.png");

  auto* stack = app.add_subcommand("fuse-stack", "Fuse a focal stack");
  stack->add_option("--dir", dir, "Directory of stack images, fused in name order")->required()->check(CLI::ExistingDirectory);
  stack->add_option("--weights", weights, "Trained weights")->required()->check(CLI::ExistingFile);
  stack->add_option("--out", out, "Fused image")->required();
  stack->add_option("--strategy", strategy, "serial or calibrated")
      ->check(CLI::IsMember({"serial", "calibrated"}));
  stack->add_option("--bench", bench, "Time both strategies over N repetitions");
  stack->add_option("--bench-csv", bench_csv, "Bench CSV path (default <out>_bench.csv)");
  stack->add_option("--threads", threads, "Workers for calibrated fusion (default GACN_THREADS)");

  auto* eval = app.add_subcommand("eval", "Q_g report over a directory of pairs");
  eval->add_option("--pairs-dir", pairs_dir, "Pairs named <id>_near/<id>_far or <id>_a/<id>_b")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--weights", weights, "Trained weights")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", out, "Report CSV")->required();

  auto* selfcheck = app.add_subcommand("selfcheck", "Numerical self-test");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) {
      preset_config(preset);
      const auto s = gacn::generate_dataset(images, masks, out, gacn::GenConfig{}, seed);
      std::printf("accepted %zu, rejected %zu, manifest %s\n", s.accepted, s.rejected,
                  (fs::path(out) / "manifest.tsv").c_str());
    } else if (*synth) {
      gacn::write_synth_corpus(out, count, side, seed, channels);
      std::printf("wrote %zu scenes to %s\n", count, out.c_str());
    } else if (*train) {
      gacn::TrainConfig cfg = preset_config(preset);
      cfg.seed = seed;
      if (epochs > 0) cfg.epochs = epochs;
      cfg.loss.lambda = lambda;
      cfg.loss.qg.orientation = orientation == "smooth" ? gacn::OrientationMode::smooth : gacn::OrientationMode::abs;
      cfg.validate();
      gacn::TrainOptions opt;
      opt.out_dir = out;
      if (!resume.empty()) opt.resume_from = resume;
      opt.on_epoch = [](const gacn::EpochLog& r) {
        std::printf("epoch %zu lr %.3g train dice %.4f qg %.4f | val dice %.4f qg %.4f\n", r.epoch, r.lr,
                    r.train_dice, r.train_qg, r.val_dice, r.val_qg);
        std::fflush(stdout);
      };
      gacn::train(gacn::load_dataset(manifest, cfg), cfg, opt);
    } else if (*fuse) {
      const auto model = load_model(weights);
      const auto r = gacn::fuse_images(model, gacn::load_image(a_path), gacn::load_image(b_path));
      require_finite(r.fused, "fused image");
      gacn::save_image(r.fused, out);
      if (emit_dm) {
        gacn::save_image(r.dm_initial, sibling(out, "_dm_initial"));
        gacn::save_image(r.dm_final, sibling(out, "_dm_final"));
      }
    } else if (*stack) {
      const auto model = load_model(weights);
      const auto s = gacn::load_stack(dir);
      const std::size_t workers = threads ? threads : gacn::default_threads();
      model.counters().reset();
      const auto img = strategy == "serial" ? gacn::serial_fuse(s, model)
                                            : gacn::calibrated_fuse(s, model, workers).fused;
      require_finite(img, "fused image");
      gacn::save_image(img, out);
      std::printf("%s N=%zu extraction=%zu decision=%zu\n", strategy.c_str(), s.size(),
                  model.counters().extraction.load(), model.counters().decision.load());
      if (bench > 0) {
        const auto rows = gacn::bench_stack(s, model, bench, workers);
        const fs::path csv = bench_csv.empty() ? sibling(out, "_bench").replace_extension(".csv") : fs::path(bench_csv);
        gacn::write_bench_csv(rows, csv);
        for (const auto& r : rows) {
          std::printf("%s: %.1f ms per image, extraction=%zu decision=%zu\n", r.strategy.c_str(),
                      r.wall_ms_per_image, r.extraction_count, r.decision_count);
        }
        std::printf("saving %.1f%%\n", 100.0 * gacn::bench_saving(rows));
      }
    } else if (*eval) {
      const auto model = load_model(weights);
      gacn::MetricReport report;
      using Clock = std::chrono::steady_clock;
      for (const auto& [id, files] : find_pairs(pairs_dir)) {
        const auto a = gacn::load_image(files.first), b = gacn::load_image(files.second);
        auto t0 = Clock::now();
        const auto r = gacn::fuse_images(model, a, b);
        const double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
        require_finite(r.fused, ("fused image of pair " + id).c_str());
        report.rows.push_back({id, "gacn", gacn::qg_eval(a, b, r.fused), ms});
        t0 = Clock::now();
        gacn::Image avg = a;
        for (std::size_t i = 0; i < avg.data.size(); ++i) avg.data[i] = 0.5 * (a.data[i] + b.data[i]);
        const double avg_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
        report.rows.push_back({id, "average", gacn::qg_eval(a, b, avg), avg_ms});
      }
      gacn::write_report_csv(report, out);
      std::printf("%zu pairs, mean Q_g gacn %.4f average %.4f\n", report.rows.size() / 2,
                  report.mean_qg("gacn"), report.mean_qg("average"));
    } else if (*selfcheck) {
      bool ok = true;
      for (const auto& c : gacn::run_selfcheck()) {
        std::printf("%s %s (%s)\n", c.passed ? "PASS" : "FAIL", c.name.c_str(), c.detail.c_str());
        ok = ok && c.passed;
      }
      return ok ? kOk : kNumerical;
    }
  } catch (const gacn::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const gacn::ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kOk;
}
