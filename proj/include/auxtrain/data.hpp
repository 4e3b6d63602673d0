// Dataset handling: CIFAR-10 binary ingestion, train/val split,
// standardization from original-train statistics, crop/flip augmentation,
// deterministic batch loaders, and a synthetic grating dataset for tests
// and CI-speed smoke runs.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "auxtrain/common.hpp"
#include "auxtrain/tensor.hpp"

namespace auxtrain {

inline constexpr int kImageSide = 32;
inline constexpr int kImageChannels = 3;
inline constexpr int kImagePixels = kImageChannels * kImageSide * kImageSide;  // 3072
inline constexpr int kCifarRecordBytes = 1 + kImagePixels;                     // 3073
inline constexpr int kNumClasses = 10;

// One labeled image. Pixels are channel-planar R,G,B row-major; they hold
// raw byte values (0..255) at ingest and standardized floats afterwards.
struct ImageRecord {
  int label = 0;
  std::vector<float> pixels;  // length kImagePixels
};

struct DatasetSplit {
  std::vector<ImageRecord> train, val, test;
  std::array<double, 3> channel_mean{0, 0, 0};
  std::array<double, 3> channel_std{1, 1, 1};
};

// --- CIFAR-10 binary format: 3073-byte records, 1 label byte + 1024 R +
// 1024 G + 1024 B bytes, row-major within channel. ---
inline std::vector<ImageRecord> parse_cifar10_binary(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() % kCifarRecordBytes != 0)
    throw FormatError("truncated CIFAR-10 stream: " + std::to_string(bytes.size()) +
                      " bytes leaves a partial record at offset " +
                      std::to_string(bytes.size() - bytes.size() % kCifarRecordBytes));
  const std::size_t count = bytes.size() / kCifarRecordBytes;
  std::vector<ImageRecord> records(count);
  for (std::size_t r = 0; r < count; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9)
      throw FormatError("label byte " + std::to_string(int(rec[0])) + " > 9 at record " +
                        std::to_string(r) + " (offset " + std::to_string(r * kCifarRecordBytes) + ")");
    records[r].label = rec[0];
    records[r].pixels.resize(kImagePixels);
    for (int i = 0; i < kImagePixels; ++i) records[r].pixels[i] = float(rec[1 + i]);
  }
  return records;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

inline std::vector<std::string> cifar10_train_files() {
  return {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin",
          "data_batch_5.bin"};
}

// Loads the six standard batch files; throws IoError naming every expected
// file when any is missing.
inline std::pair<std::vector<ImageRecord>, std::vector<ImageRecord>> load_cifar10(
    const std::string& data_dir) {
  namespace fs = std::filesystem;
  std::vector<std::string> expected = cifar10_train_files();
  expected.push_back("test_batch.bin");
  std::string missing;
  for (const auto& f : expected)
    if (!fs::exists(fs::path(data_dir) / f)) missing += (missing.empty() ? "" : ", ") + f;
  if (!missing.empty()) {
    std::string all;
    for (const auto& f : expected) all += (all.empty() ? "" : ", ") + f;
    throw IoError("CIFAR-10 data not found in '" + data_dir + "': missing " + missing +
                  " (expected files: " + all + ")");
  }
  std::vector<ImageRecord> train;
  for (const auto& f : cifar10_train_files()) {
    auto part = parse_cifar10_binary(read_file_bytes((fs::path(data_dir) / f).string()));
    train.insert(train.end(), std::make_move_iterator(part.begin()),
                 std::make_move_iterator(part.end()));
  }
  auto test = parse_cifar10_binary(read_file_bytes((fs::path(data_dir) / "test_batch.bin").string()));
  return {std::move(train), std::move(test)};
}

// Keeps only the listed classes and remaps labels to 0..k-1 in list order.
inline std::vector<ImageRecord> filter_classes(const std::vector<ImageRecord>& records,
                                               const std::vector<int>& classes) {
  std::vector<ImageRecord> out;
  for (const auto& r : records) {
    auto it = std::find(classes.begin(), classes.end(), r.label);
    if (it == classes.end()) continue;
    out.push_back(r);
    out.back().label = int(it - classes.begin());
  }
  return out;
}

// First n records of each class, in stream order.
inline std::vector<ImageRecord> limit_per_class(const std::vector<ImageRecord>& records, int n) {
  std::array<int, kNumClasses> seen{};
  std::vector<ImageRecord> out;
  for (const auto& r : records)
    if (seen[r.label]++ < n) out.push_back(r);
  return out;
}

// --- split / statistics / standardization ---

// Seeded shuffle then partition; |val| = floor(fraction * n). The test part
// of the returned split is left empty; attach it via prepare_dataset.
inline DatasetSplit split_train_val(const std::vector<ImageRecord>& records, double fraction,
                                    std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw ContractError("split fraction must lie in (0,1), got " + std::to_string(fraction));
  std::vector<std::size_t> idx(records.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(mix64(seed, 0x5914bULL));
  rng.shuffle(idx);
  const std::size_t n_val = static_cast<std::size_t>(fraction * double(records.size()));
  DatasetSplit split;
  split.val.reserve(n_val);
  split.train.reserve(records.size() - n_val);
  for (std::size_t i = 0; i < idx.size(); ++i)
    (i < n_val ? split.val : split.train).push_back(records[idx[i]]);
  return split;
}

// Per-channel mean/std of raw records scaled to [0,1]. A zero std (constant
// channel) is clamped to 1 so standardization stays defined.
inline std::pair<std::array<double, 3>, std::array<double, 3>> compute_stats(
    const std::vector<ImageRecord>& records) {
  if (records.empty()) throw ContractError("compute_stats on empty record list");
  const std::size_t plane = std::size_t(kImageSide) * kImageSide;
  std::array<double, 3> mean{}, stddev{};
  for (int c = 0; c < 3; ++c) {
    double s = 0, s2 = 0;
    for (const auto& r : records) {
      const float* p = r.pixels.data() + c * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = p[i] / 255.0;
        s += v;
        s2 += v * v;
      }
    }
    const double n = double(records.size()) * double(plane);
    mean[c] = s / n;
    const double var = std::max(0.0, s2 / n - mean[c] * mean[c]);
    stddev[c] = std::sqrt(var);
    if (stddev[c] == 0.0) stddev[c] = 1.0;
  }
  return {mean, stddev};
}

// (pixel/255 - mean[c]) / std[c]
inline ImageRecord standardize(const ImageRecord& record, const std::array<double, 3>& mean,
                               const std::array<double, 3>& stddev) {
  ImageRecord out;
  out.label = record.label;
  out.pixels.resize(record.pixels.size());
  const std::size_t plane = std::size_t(kImageSide) * kImageSide;
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t k = c * plane + i;
      out.pixels[k] = float((double(record.pixels[k]) / 255.0 - mean[c]) / stddev[c]);
    }
  return out;
}

// Full protocol: statistics from the original (pre-split) train pool, then
// 95:5 split, then standardization of every part. Test records pass through
// untouched by the split itself.
inline DatasetSplit prepare_dataset(const std::vector<ImageRecord>& train_pool,
                                    const std::vector<ImageRecord>& test, double fraction,
                                    std::uint64_t seed) {
  auto [mean, stddev] = compute_stats(train_pool);
  DatasetSplit split = split_train_val(train_pool, fraction, seed);
  split.channel_mean = mean;
  split.channel_std = stddev;
  for (auto& r : split.train) r = standardize(r, mean, stddev);
  for (auto& r : split.val) r = standardize(r, mean, stddev);
  split.test.reserve(test.size());
  for (const auto& r : test) split.test.push_back(standardize(r, mean, stddev));
  return split;
}

// --- augmentation: reflect-pad by `pad` then crop at (dy,dx), optional
// horizontal flip. (pad, pad) with no flip is the identity. ---
inline ImageRecord augment_with(const ImageRecord& record, int dy, int dx, bool flip,
                                int pad = 4) {
  const int H = kImageSide, W = kImageSide;
  auto reflect = [](int i, int n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return i;
  };
  ImageRecord out;
  out.label = record.label;
  out.pixels.resize(record.pixels.size());
  const std::size_t plane = std::size_t(H) * W;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const int sy = reflect(y + dy - pad, H);
        int xx = flip ? (W - 1 - x) : x;
        const int sx = reflect(xx + dx - pad, W);
        out.pixels[c * plane + std::size_t(y) * W + x] =
            record.pixels[c * plane + std::size_t(sy) * W + sx];
      }
  return out;
}

inline ImageRecord augment(const ImageRecord& record, Rng& rng, int pad = 4,
                           double flip_prob = 0.5) {
  const int dy = int(rng.uniform_int(2 * pad + 1));
  const int dx = int(rng.uniform_int(2 * pad + 1));
  const bool flip = rng.bernoulli(flip_prob);
  return augment_with(record, dy, dx, flip, pad);
}

// --- batch loader ---

enum class Order { random, sequential };

template <typename S = float>
struct Batch {
  Tensor<S> images;         // [n,3,32,32]
  std::vector<int> labels;  // n
};

// Iterates a record list in batches. Random order reshuffles per epoch from
// (seed, epoch); sequential order is stable. The final partial batch is
// kept. Augmentation, when enabled, draws from the same per-epoch stream,
// so a repeated begin_epoch(e) replays the identical batch sequence.
template <typename S = float>
class Loader {
 public:
  Loader(const std::vector<ImageRecord>* records, int batch_size, Order order,
         std::uint64_t seed, bool do_augment = false)
      : records_(records), batch_size_(batch_size), order_(order), seed_(seed),
        augment_(do_augment), rng_(0) {
    if (batch_size < 1) throw ContractError("batch size must be >= 1");
    begin_epoch(0);
  }

  void begin_epoch(int epoch) {
    cursor_ = 0;
    perm_.resize(records_->size());
    std::iota(perm_.begin(), perm_.end(), std::size_t(0));
    rng_ = Rng(mix64(seed_, std::uint64_t(epoch)));
    if (order_ == Order::random) rng_.shuffle(perm_);
  }

  int num_batches() const {
    return int((records_->size() + std::size_t(batch_size_) - 1) / std::size_t(batch_size_));
  }

  std::size_t size() const { return records_->size(); }

  std::optional<Batch<S>> next() {
    if (cursor_ >= perm_.size()) return std::nullopt;
    const std::size_t n = std::min(std::size_t(batch_size_), perm_.size() - cursor_);
    Batch<S> batch;
    batch.images = Tensor<S>({int(n), kImageChannels, kImageSide, kImageSide});
    batch.labels.resize(n);
    S* dst = batch.images.ptr();
    for (std::size_t i = 0; i < n; ++i) {
      const ImageRecord& rec = (*records_)[perm_[cursor_ + i]];
      batch.labels[i] = rec.label;
      if (augment_) {
        ImageRecord aug = augment(rec, rng_);
        for (int k = 0; k < kImagePixels; ++k) dst[i * kImagePixels + k] = S(aug.pixels[k]);
      } else {
        for (int k = 0; k < kImagePixels; ++k) dst[i * kImagePixels + k] = S(rec.pixels[k]);
      }
    }
    cursor_ += n;
    return batch;
  }

 private:
  const std::vector<ImageRecord>* records_;
  int batch_size_;
  Order order_;
  std::uint64_t seed_;
  bool augment_;
  Rng rng_;
  std::vector<std::size_t> perm_;
  std::size_t cursor_ = 0;
};

// --- synthetic dataset: class-conditional oriented gratings + noise.
// Class k gets orientation k*pi/n_classes; a linear probe separates the
// classes, a micro CNN separates them comfortably. ---
inline std::vector<ImageRecord> synth_dataset(int n_per_class, int n_classes, std::uint64_t seed) {
  if (n_classes < 1 || n_classes > kNumClasses)
    throw ContractError("synth_dataset supports 1..10 classes, got " + std::to_string(n_classes));
  Rng rng(mix64(seed, 0x53594e54ULL));
  std::vector<ImageRecord> out;
  out.reserve(std::size_t(n_per_class) * n_classes);
  const double pi = 3.14159265358979323846;
  const double cycles = 4.0;
  for (int k = 0; k < n_classes; ++k) {
    const double theta = pi * k / n_classes;
    const double cx = std::cos(theta), sx = std::sin(theta);
    for (int i = 0; i < n_per_class; ++i) {
      ImageRecord rec;
      rec.label = k;
      rec.pixels.resize(kImagePixels);
      const double amp = rng.uniform(60.0, 100.0);
      const double phase = rng.uniform(-0.5, 0.5);
      const std::size_t plane = std::size_t(kImageSide) * kImageSide;
      for (int y = 0; y < kImageSide; ++y)
        for (int x = 0; x < kImageSide; ++x) {
          const double t = 2.0 * pi * cycles * (x * cx + y * sx) / kImageSide + phase;
          const double base = 127.5 + amp * std::sin(t);
          for (int c = 0; c < 3; ++c) {
            double v = base + rng.normal(0.0, 15.0);
            v = std::clamp(v, 0.0, 255.0);
            rec.pixels[c * plane + std::size_t(y) * kImageSide + x] = float(std::round(v));
          }
        }
      out.push_back(std::move(rec));
    }
  }
  return out;
}

}  // namespace auxtrain
