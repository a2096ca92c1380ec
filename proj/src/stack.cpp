#include "gacn/stack.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

namespace gacn {
namespace {

template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  threads = std::min(std::max<std::size_t>(threads, 1), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

double clamp_eps(double p) { return std::clamp(p, kVolumeEps, 1.0 - kVolumeEps); }

}  // namespace

void FocalStack::validate() const {
  if (images.size() < 2) {
    throw DataError("focal stack needs at least 2 images, got " + std::to_string(images.size()));
  }
  for (std::size_t j = 1; j < images.size(); ++j) {
    if (!images[j].same_size(images[0]) || images[j].channels != images[0].channels) {
      throw DataError("focal stack image " + std::to_string(j) + " differs in size or channels from image 0");
    }
  }
}

FocalStack load_stack(const std::filesystem::path& dir) {
  FocalStack stack;
  for (const auto& f : list_images(dir)) {
    stack.images.push_back(load_image(f));
    stack.ids.push_back(f.stem().string());
  }
  stack.validate();
  return stack;
}

DecisionVolume build_volume(const std::vector<std::vector<double>>& pair_dms, std::size_t width,
                            std::size_t height) {
  const std::size_t n = width * height;
  if (pair_dms.empty()) throw ShapeError("build_volume: no pair decision maps");
  for (const auto& dm : pair_dms) {
    if (dm.size() != n) throw ShapeError("build_volume: decision map size mismatch");
  }
  DecisionVolume dv{width, height, pair_dms.size() + 1, std::vector<double>((pair_dms.size() + 1) * n)};
  for (std::size_t i = 0; i < n; ++i) {
    const double p = clamp_eps(pair_dms[0][i]);
    dv.values[i] = p;
    dv.values[n + i] = 1.0 - p;
    for (std::size_t j = 1; j < pair_dms.size(); ++j) {
      const double q = clamp_eps(pair_dms[j][i]);
      dv.values[(j + 1) * n + i] = p * (1.0 - q) / q;
    }
  }
  return dv;
}

std::vector<std::size_t> select_sources(const DecisionVolume& dv) {
  const std::size_t n = dv.width * dv.height;
  std::vector<std::size_t> sel(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    double best = dv.at(0, i);
    for (std::size_t j = 1; j < dv.count; ++j) {
      if (dv.at(j, i) > best) {
        best = dv.at(j, i);
        sel[i] = j;
      }
    }
  }
  return sel;
}

Image serial_fuse(const FocalStack& stack, const GacnModel& model) {
  stack.validate();
  Image acc = stack.images[0];
  for (std::size_t j = 1; j < stack.size(); ++j) acc = fuse_images(model, acc, stack.images[j]).fused;
  return acc;
}

CalibratedResult calibrated_fuse(const FocalStack& stack, const GacnModel& model, std::size_t threads) {
  stack.validate();
  if (threads == 0) threads = default_threads();
  const std::size_t N = stack.size();
  std::vector<Tensor> gray(N);
  std::vector<std::vector<Tensor>> sf(N);
  parallel_for(N, threads, [&](std::size_t j) {
    gray[j] = to_tensor(to_gray(stack.images[j]));
    sf[j] = model.activity_maps(nullptr, gray[j]);
  });
  std::vector<std::vector<double>> pair_dms(N - 1);
  parallel_for(N - 1, threads, [&](std::size_t k) {
    const std::size_t j = k + 1;
    const PairOutput out = model.finish(nullptr, model.initial_dm(nullptr, sf[0], sf[j]), gray[0], gray[j]);
    const auto p = out.dm_final.values();
    pair_dms[k].assign(p.begin(), p.end());
  });

  const Image& first = stack.images[0];
  CalibratedResult r;
  r.volume = build_volume(pair_dms, first.width, first.height);
  r.selection = select_sources(r.volume);
  r.fused = Image(first.width, first.height, first.channels);
  const std::size_t plane = first.plane_size();
  for (std::size_t c = 0; c < first.channels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      r.fused.data[c * plane + i] = stack.images[r.selection[i]].data[c * plane + i];
    }
  }
  return r;
}

std::size_t default_threads() {
  if (const char* env = std::getenv("GACN_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<BenchRow> bench_stack(const FocalStack& stack, const GacnModel& model,
                                  std::size_t repetitions, std::size_t threads) {
  stack.validate();
  repetitions = std::max<std::size_t>(repetitions, 1);
  if (threads == 0) threads = default_threads();
  using Clock = std::chrono::steady_clock;
  auto run = [&](const std::string& name, auto fn) {
    BenchRow row{name, stack.size()};
    const auto t0 = Clock::now();
    for (std::size_t r = 0; r < repetitions; ++r) {
      model.counters().reset();
      fn();
    }
    row.wall_ms_total = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    row.wall_ms_per_image = row.wall_ms_total / static_cast<double>(repetitions);
    row.extraction_count = model.counters().extraction;
    row.decision_count = model.counters().decision;
    return row;
  };
  std::vector<BenchRow> rows;
  rows.push_back(run("serial", [&] { serial_fuse(stack, model); }));
  rows.push_back(run("calibrated", [&] { calibrated_fuse(stack, model, threads); }));
  return rows;
}

double bench_saving(const std::vector<BenchRow>& rows) {
  double serial = 0.0, calibrated = 0.0;
  for (const auto& r : rows) {
    if (r.strategy == "serial") serial = r.wall_ms_per_image;
    if (r.strategy == "calibrated") calibrated = r.wall_ms_per_image;
  }
  return serial > 0.0 ? 1.0 - calibrated / serial : 0.0;
}

void write_bench_csv(const std::vector<BenchRow>& rows, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << "strategy,N,extraction_count,decision_count,wall_ms_total,wall_ms_per_image\n";
  for (const auto& r : rows) {
    os << r.strategy << ',' << r.n << ',' << r.extraction_count << ',' << r.decision_count << ','
       << r.wall_ms_total << ',' << r.wall_ms_per_image << '\n';
  }
}

}  // namespace gacn
