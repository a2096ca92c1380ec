#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "gacn/datagen.hpp"
#include "gacn/losses.hpp"
#include "gacn/network.hpp"

namespace gacn {

/// A loss or parameter became NaN/Inf.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double lr0 = 1e-4;
  double decay = 0.8;
  std::size_t decay_every = 2;
  std::size_t batch_size = 8;
  std::size_t epochs = 20;
  std::size_t resize = 160;  // grayscale sources are resized to resize x resize
  double val_fraction = 0.3;
  std::uint64_t seed = 1;
  LossConfig loss;
  NetworkConfig network;
  AugmentConfig augment;

  static TrainConfig desk();
  static TrainConfig paper();
  void validate() const;
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static AdamState for_params(const WeightStore& w);
};

/// Bias-corrected Adam over every parameter's gradient buffer. Parameters are
/// rounded to float32 afterwards so checkpoints reproduce them exactly.
void adam_step(WeightStore& params, AdamState& state, double lr);

/// lr0 * decay^floor(epoch / decay_every).
double lr_at(std::size_t epoch, const TrainConfig& cfg);

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_dice = 0.0;  // mean Dice loss
  double train_qg = 0.0;    // mean Q_g loss
  double val_dice = 0.0;    // Dice coefficient of the binarized final DM
  double val_qg = 0.0;      // exact Q_g of the fused validation images

  bool operator==(const EpochLog&) const = default;
};

struct TrainState {
  WeightStore weights;
  AdamState adam;
  std::size_t epochs_done = 0;
  double best_val = -1.0;
  std::vector<EpochLog> log;
};

void write_checkpoint(std::ostream& os, const TrainState& state);
TrainState read_checkpoint(std::istream& is, const WeightStore& layout);
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path, const WeightStore& layout);

struct Dataset {
  std::vector<TrainingSample> train;
  std::vector<TrainingSample> val;
};

/// Seeded shuffle, then the first (1 - val_fraction) go to training. A single
/// sample is used for both.
Dataset split_dataset(std::vector<TrainingSample> samples, double val_fraction, std::uint64_t seed);
/// Loads every manifest entry (grayscale) and splits it.
Dataset load_dataset(const std::filesystem::path& manifest, const TrainConfig& cfg);

struct StepLosses {
  double dice = 0.0;
  double qg = 0.0;
  double total = 0.0;
};

/// Forward + backward for one prepared (grayscale, cropped) sample; the
/// gradient of total/batch_size accumulates into the model's weights.
StepLosses accumulate_gradients(const GacnModel& model, const TrainingSample& sample,
                                const LossConfig& loss, std::size_t batch_size);

struct PairScores {
  double dice = 0.0;  // binarized final DM vs mask
  double qg = 0.0;
};
PairScores evaluate_sample(const GacnModel& model, const TrainingSample& sample);

/// Validation view of a sample: grayscale, resized, centre crop of the training crop size.
TrainingSample prepare_eval(const TrainingSample& sample, const TrainConfig& cfg);

struct TrainOptions {
  std::filesystem::path out_dir;       // empty: nothing written
  std::filesystem::path resume_from;   // empty: fresh start
  std::size_t stop_after = 0;          // stop once this many epochs are done (0: run all)
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  TrainState state;
  WeightStore best;
};

/// Writes last.ckpt, best.gacn and metrics.csv into out_dir after every epoch.
TrainResult train(const Dataset& data, const TrainConfig& cfg, const TrainOptions& opt = {});

void write_metrics_csv(const std::vector<EpochLog>& log, const std::filesystem::path& path);

}  // namespace gacn
