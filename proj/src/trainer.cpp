#include "gacn/trainer.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "gacn/metrics.hpp"
#include "gacn/ops.hpp"
#include "gacn/random.hpp"

namespace gacn {
namespace {

constexpr char kAdamMagic[4] = {'A', 'D', 'A', 'M'};
constexpr std::uint32_t kCheckpointVersion = 1;

// Stream ids for Rng::derive, so that init, ordering and augmentation never share draws.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kOrderStream = 2;
constexpr std::uint64_t kAugmentStream = 3;
constexpr std::uint64_t kSplitStream = 4;

std::uint64_t augment_seed(std::uint64_t seed, std::size_t epoch, std::size_t sample) {
  Rng r = Rng::derive(seed, kAugmentStream);
  return Rng::derive(r.next() ^ (static_cast<std::uint64_t>(epoch) << 32), sample).next();
}

TrainingSample prepare_base(const TrainingSample& s, const TrainConfig& cfg) {
  TrainingSample g = to_gray(s);
  return cfg.resize ? resize_sample(g, cfg.resize) : g;
}

bool finite(double v) { return std::isfinite(v); }

}  // namespace

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.batch_size = 16;
  c.epochs = 50;
  c.resize = 256;
  c.augment.crop = 156;
  return c;
}

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw std::invalid_argument("lr0 must be positive");
  if (!(decay > 0.0 && decay <= 1.0)) throw std::invalid_argument("decay must be in (0, 1]");
  if (decay_every == 0 || batch_size == 0) {
    throw std::invalid_argument("decay interval and batch size must be positive");
  }
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
    throw std::invalid_argument("validation fraction must be in [0, 1)");
  }
  if (resize && augment.enabled && augment.crop > resize) {
    throw std::invalid_argument("crop size exceeds the resized frame");
  }
  loss.validate();
  network.validate();
}

AdamState AdamState::for_params(const WeightStore& w) {
  AdamState s;
  for (const auto& [name, t] : w) {
    s.m.emplace_back(t.numel(), 0.0);
    s.v.emplace_back(t.numel(), 0.0);
  }
  return s;
}

void adam_step(WeightStore& params, AdamState& st, double lr) {
  if (st.m.size() != params.size() || st.v.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state has " + std::to_string(st.m.size()) +
                     " buffers for " + std::to_string(params.size()) + " parameters");
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  std::size_t i = 0;
  for (auto& [name, t] : params) {
    auto& m = st.m[i];
    auto& v = st.v[i];
    ++i;
    if (m.size() != t.numel() || v.size() != t.numel()) {
      throw ShapeError("adam_step: moment size mismatch for " + name);
    }
    const bool has = t.has_grad();
    auto x = t.values();
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double g = has ? std::as_const(t).grad()[j] : 0.0;
      m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g;
      v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g * g;
      const double mhat = m[j] / bc1, vhat = v[j] / bc2;
      x[j] -= lr * mhat / (std::sqrt(vhat) + st.eps);
      if (!finite(x[j])) throw NumericalError("parameter " + name + " became non-finite");
    }
  }
  round_to_float(params);
  params.zero_grad();
}

double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  return cfg.lr0 * std::pow(cfg.decay, static_cast<double>(epoch / cfg.decay_every));
}

void write_checkpoint(std::ostream& os, const TrainState& st) {
  write_weights(os, st.weights);
  os.write(kAdamMagic, 4);
  binio::put_u32(os, kCheckpointVersion);
  binio::put_u64(os, st.adam.step);
  binio::put_f64(os, st.adam.beta1);
  binio::put_f64(os, st.adam.beta2);
  binio::put_f64(os, st.adam.eps);
  binio::put_u64(os, st.adam.m.size());
  for (std::size_t i = 0; i < st.adam.m.size(); ++i) {
    binio::put_u64(os, st.adam.m[i].size());
    for (double x : st.adam.m[i]) binio::put_f64(os, x);
    for (double x : st.adam.v[i]) binio::put_f64(os, x);
  }
  binio::put_u64(os, st.epochs_done);
  binio::put_f64(os, st.best_val);
  binio::put_u64(os, st.log.size());
  for (const auto& r : st.log) {
    binio::put_u64(os, r.epoch);
    for (double x : {r.lr, r.train_dice, r.train_qg, r.val_dice, r.val_qg}) binio::put_f64(os, x);
  }
}

TrainState read_checkpoint(std::istream& is, const WeightStore& layout) {
  TrainState st;
  st.weights = read_weights(is, layout);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kAdamMagic, 4) != 0) {
    throw DataError("checkpoint has no optimizer section");
  }
  const std::uint32_t version = binio::get_u32(is);
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  st.adam.step = binio::get_u64(is);
  st.adam.beta1 = binio::get_f64(is);
  st.adam.beta2 = binio::get_f64(is);
  st.adam.eps = binio::get_f64(is);
  const std::uint64_t n = binio::get_u64(is);
  if (n != layout.size()) throw DataError("optimizer state does not match the architecture");
  auto it = layout.begin();
  for (std::uint64_t i = 0; i < n; ++i, ++it) {
    const std::uint64_t len = binio::get_u64(is);
    if (len != it->second.numel()) throw DataError("optimizer moment size mismatch for " + it->first);
    std::vector<double> m(len), v(len);
    for (double& x : m) x = binio::get_f64(is);
    for (double& x : v) x = binio::get_f64(is);
    st.adam.m.push_back(std::move(m));
    st.adam.v.push_back(std::move(v));
  }
  st.epochs_done = binio::get_u64(is);
  st.best_val = binio::get_f64(is);
  const std::uint64_t rows = binio::get_u64(is);
  if (rows > 1'000'000) throw DataError("implausible metrics log length");
  for (std::uint64_t i = 0; i < rows; ++i) {
    EpochLog r;
    r.epoch = binio::get_u64(is);
    r.lr = binio::get_f64(is);
    r.train_dice = binio::get_f64(is);
    r.train_qg = binio::get_f64(is);
    r.val_dice = binio::get_f64(is);
    r.val_qg = binio::get_f64(is);
    st.log.push_back(r);
  }
  return st;
}

void save_checkpoint(const TrainState& st, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  write_checkpoint(os, st);
  if (!os) throw DataError("write failed for " + path.string());
}

TrainState load_checkpoint(const std::filesystem::path& path, const WeightStore& layout) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  return read_checkpoint(is, layout);
}

Dataset split_dataset(std::vector<TrainingSample> samples, double val_fraction, std::uint64_t seed) {
  Dataset d;
  if (samples.empty()) return d;
  if (samples.size() == 1) {
    d.train = samples;
    d.val = samples;
    return d;
  }
  Rng rng = Rng::derive(seed, kSplitStream);
  rng.shuffle(samples.begin(), samples.end());
  auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(samples.size())));
  n_val = std::min(n_val, samples.size() - 1);
  const std::size_t n_train = samples.size() - n_val;
  d.train.assign(samples.begin(), samples.begin() + static_cast<long>(n_train));
  d.val.assign(samples.begin() + static_cast<long>(n_train), samples.end());
  if (d.val.empty()) d.val = d.train;
  return d;
}

Dataset load_dataset(const std::filesystem::path& manifest, const TrainConfig& cfg) {
  const std::vector<ManifestEntry> entries = read_manifest(manifest);
  if (entries.empty()) throw DataError("manifest " + manifest.string() + " lists no samples");
  std::vector<TrainingSample> samples;
  samples.reserve(entries.size());
  for (const auto& e : entries) samples.push_back(to_gray(load_sample(e, manifest)));
  return split_dataset(std::move(samples), cfg.val_fraction, cfg.seed);
}

StepLosses accumulate_gradients(const GacnModel& model, const TrainingSample& s,
                                const LossConfig& loss, std::size_t batch_size) {
  Tape tape;
  const Tensor a = to_tensor(s.near_focused), b = to_tensor(s.far_focused);
  const Tensor mask = to_tensor(s.mask);
  const PairOutput out = model.forward(&tape, a, b);
  const Tensor dice = dice_loss(&tape, out.dm_initial, mask);
  // With lambda = 0 the Q_g term is only logged, so keep it off the tape.
  Tape* qg_tape = loss.lambda > 0.0 ? &tape : nullptr;
  const Tensor qg = qg_loss(qg_tape, a, b, out.fused, loss.qg);
  Tensor total = total_loss(&tape, dice, qg, loss.lambda);
  StepLosses r{dice.item(), qg.item(), total.item()};
  if (!finite(r.total)) throw NumericalError("loss is not finite for sample " + s.id);
  Tensor scaled = ops::scale(&tape, total, 1.0 / static_cast<double>(batch_size));
  tape.backward(scaled);
  return r;
}

PairScores evaluate_sample(const GacnModel& model, const TrainingSample& s) {
  const Tensor a = to_tensor(s.near_focused), b = to_tensor(s.far_focused);
  const PairOutput out = model.forward(nullptr, a, b);
  std::size_t inter = 0, pred = 0, truth = 0;
  for (std::size_t i = 0; i < out.dm_final.numel(); ++i) {
    const bool p = out.dm_final[i] > 0.5, g = s.mask.data[i] >= 0.5;
    inter += p && g;
    pred += p;
    truth += g;
  }
  PairScores r;
  r.dice = pred + truth == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(pred + truth);
  r.qg = qg_eval(s.near_focused, s.far_focused, from_tensor(out.fused));
  return r;
}

TrainingSample prepare_eval(const TrainingSample& sample, const TrainConfig& cfg) {
  TrainingSample s = prepare_base(sample, cfg);
  const std::size_t side = cfg.augment.enabled && cfg.augment.crop ? cfg.augment.crop : 0;
  if (side && side <= s.fused.width && side <= s.fused.height) {
    s = crop_sample(s, (s.fused.width - side) / 2, (s.fused.height - side) / 2, side);
  }
  return s;
}

void write_metrics_csv(const std::vector<EpochLog>& log, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << "epoch,lr,train_dice,train_qg,val_dice,val_qg\n";
  os.precision(17);
  for (const auto& r : log) {
    os << r.epoch << ',' << r.lr << ',' << r.train_dice << ',' << r.train_qg << ',' << r.val_dice
       << ',' << r.val_qg << '\n';
  }
}

TrainResult train(const Dataset& data, const TrainConfig& cfg, const TrainOptions& opt) {
  cfg.validate();
  if (data.train.empty()) throw DataError("training set is empty");

  std::vector<TrainingSample> base;
  base.reserve(data.train.size());
  for (const auto& s : data.train) base.push_back(prepare_base(s, cfg));
  std::vector<TrainingSample> val;
  val.reserve(data.val.size());
  for (const auto& s : data.val) val.push_back(prepare_eval(s, cfg));

  const WeightStore layout = weight_layout(cfg.network);
  TrainResult result;
  TrainState& st = result.state;
  if (!opt.resume_from.empty()) {
    st = load_checkpoint(opt.resume_from, layout);
    const auto best_path = opt.resume_from.parent_path() / "best.gacn";
    result.best = std::filesystem::exists(best_path) ? load_weights(best_path, layout)
                                                     : st.weights.clone();
  } else {
    st.weights = init_weights(cfg.network, Rng::derive(cfg.seed, kInitStream).next());
    st.adam = AdamState::for_params(st.weights);
    result.best = st.weights.clone();
  }
  GacnModel model(cfg.network, st.weights);  // shares tensors with st.weights

  for (std::size_t epoch = st.epochs_done; epoch < cfg.epochs; ++epoch) {
    if (opt.stop_after && epoch >= opt.stop_after) break;
    const double lr = lr_at(epoch, cfg);
    std::vector<std::size_t> order(base.size());
    std::iota(order.begin(), order.end(), 0);
    Rng::derive(cfg.seed ^ static_cast<std::uint64_t>(epoch), kOrderStream).shuffle(order.begin(), order.end());

    double dice_sum = 0.0, qg_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t idx = order[k];
        const TrainingSample s = augment(base[idx], cfg.augment, augment_seed(cfg.seed, epoch, idx));
        const StepLosses l = accumulate_gradients(model, s, cfg.loss, end - start);
        dice_sum += l.dice;
        qg_sum += l.qg;
      }
      adam_step(st.weights, st.adam, lr);
    }

    EpochLog row;
    row.epoch = epoch;
    row.lr = lr;
    row.train_dice = dice_sum / static_cast<double>(base.size());
    row.train_qg = qg_sum / static_cast<double>(base.size());
    for (const auto& s : val) {
      const PairScores p = evaluate_sample(model, s);
      row.val_dice += p.dice;
      row.val_qg += p.qg;
    }
    if (!val.empty()) {
      row.val_dice /= static_cast<double>(val.size());
      row.val_qg /= static_cast<double>(val.size());
    }
    if (!finite(row.val_dice) || !finite(row.val_qg)) throw NumericalError("validation metric is not finite");
    st.log.push_back(row);
    st.epochs_done = epoch + 1;
    if (row.val_dice > st.best_val) {
      st.best_val = row.val_dice;
      result.best = st.weights.clone();
    }
    if (!opt.out_dir.empty()) {
      std::filesystem::create_directories(opt.out_dir);
      save_checkpoint(st, opt.out_dir / "last.ckpt");
      save_weights(result.best, opt.out_dir / "best.gacn");
      write_metrics_csv(st.log, opt.out_dir / "metrics.csv");
    }
    if (opt.on_epoch) opt.on_epoch(row);
  }
  return result;
}

}  // namespace gacn
