// Acceptance suite: one test per criterion, each printing a summary line
// with the measured quantities. Criteria 6-10 train small models on the
// synthetic dataset; criterion 7 runs only when CIFAR10_DATA_DIR points at
// the binary dataset files.
#include <gtest/gtest.h>

#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "auxtrain/auxtrain.hpp"
#include "testing/oracles.hpp"

using namespace auxtrain;
using auxtrain::testing::grad_check_max_rel_err;
using auxtrain::testing::random_tensor;
using D = double;
namespace fs = std::filesystem;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// pid-qualified so concurrently running test processes never share a path
fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() /
               ("auxtrain_acceptance_" + name + "_" + std::to_string(getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Shared smoke models for criteria 8-10: one clean-trained and one
// adversarially trained twin, identical budget, plain-cnn on the 2-class
// synthetic set.
struct SmokeRuns {
  ExperimentConfig cfg;
  RunReport clean, adv;
};

const SmokeRuns& smoke_runs() {
  static SmokeRuns runs = [] {
    SmokeRuns r;
    r.cfg.synthetic = true;
    r.cfg.synth_classes = 2;
    r.cfg.synth_per_class = 500;
    r.cfg.synth_test_per_class = 150;
    r.cfg.width = 8;
    r.cfg.train.batch_size = 64;
    r.cfg.train.initial_lr = 0.05;
    r.cfg.train.max_epochs = 12;
    r.cfg.train.seed = 20240817;
    r.cfg.out_dir = scratch_dir("smoke").string();
    r.clean = run_experiment<float>({Backbone::plain_cnn, AuxTask::None, TrainMode::clean}, r.cfg);
    r.adv = run_experiment<float>({Backbone::plain_cnn, AuxTask::None, TrainMode::adversarial}, r.cfg);
    return r;
  }();
  return runs;
}

}  // namespace

// ---------------------------------------------------------------------------
// 1. Gradient correctness: every differentiable op vs central finite
//    differences, rel err < 1e-3, double precision, >= 20 random cases each.
// ---------------------------------------------------------------------------
TEST(Criterion01, GradientCorrectnessAllOps) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng shapes(0xACC1);
  double worst = 0;
  auto track = [&](double err) { worst = std::max(worst, err); EXPECT_LT(err, 1e-3); };

  for (int i = 0; i < 20; ++i) {  // conv2d
    Rng r(mix64(1, i));
    const int C = 1 + int(r.uniform_int(3)), O = 1 + int(r.uniform_int(3));
    const int H = 4 + int(r.uniform_int(3)), k = 1 + int(r.uniform_int(3));
    const int s = 1 + int(r.uniform_int(2)), p = int(r.uniform_int(2));
    if (k > H + 2 * p) continue;
    std::vector<Tensor<D>> in = {random_tensor({1 + int(r.uniform_int(2)), C, H, H}, r),
                                 random_tensor({O, C, k, k}, r), random_tensor({O}, r)};
    track(grad_check_max_rel_err(
        [s, p](Tape<D>* t, std::vector<Tensor<D>>& v) { return conv2d(t, v[0], v[1], v[2], s, p); },
        in, {true, true, true}, mix64(11, i)));
  }
  for (int i = 0; i < 20; ++i) {  // conv_transpose2d
    Rng r(mix64(2, i));
    const int Ci = 1 + int(r.uniform_int(3)), Co = 1 + int(r.uniform_int(3));
    const int H = 3 + int(r.uniform_int(3)), k = 1 + int(r.uniform_int(3));
    const int s = 1 + int(r.uniform_int(2)), p = int(r.uniform_int(2));
    if ((H - 1) * s - 2 * p + k < 1) continue;
    std::vector<Tensor<D>> in = {random_tensor({1 + int(r.uniform_int(2)), Ci, H, H}, r),
                                 random_tensor({Ci, Co, k, k}, r), random_tensor({Co}, r)};
    track(grad_check_max_rel_err(
        [s, p](Tape<D>* t, std::vector<Tensor<D>>& v) {
          return conv_transpose2d(t, v[0], v[1], v[2], s, p);
        },
        in, {true, true, true}, mix64(12, i)));
  }
  for (int i = 0; i < 20; ++i) {  // relu (shifted off zero so fd is clean)
    Rng r(mix64(3, i));
    std::vector<Tensor<D>> in = {random_tensor({2, 3 + int(r.uniform_int(4))}, r)};
    for (auto& v : in[0].data())
      if (std::abs(v) < 1e-3) v += 0.1;
    track(grad_check_max_rel_err(
        [](Tape<D>* t, std::vector<Tensor<D>>& v) { return relu(t, v[0]); }, in, {true},
        mix64(13, i)));
  }
  for (int i = 0; i < 20; ++i) {  // max_pool2d
    Rng r(mix64(4, i));
    const int H = 4 + int(r.uniform_int(4)), k = 2 + int(r.uniform_int(2));
    const int s = 1 + int(r.uniform_int(2));
    std::vector<Tensor<D>> in = {random_tensor({1, 2, H, H}, r)};
    track(grad_check_max_rel_err(
        [k, s](Tape<D>* t, std::vector<Tensor<D>>& v) { return max_pool2d(t, v[0], k, s); }, in,
        {true}, mix64(14, i)));
  }
  for (int i = 0; i < 20; ++i) {  // linear
    Rng r(mix64(5, i));
    const int N = 1 + int(r.uniform_int(4)), F = 1 + int(r.uniform_int(5)),
              K = 1 + int(r.uniform_int(5));
    std::vector<Tensor<D>> in = {random_tensor({N, F}, r), random_tensor({F, K}, r),
                                 random_tensor({K}, r)};
    track(grad_check_max_rel_err(
        [](Tape<D>* t, std::vector<Tensor<D>>& v) { return linear(t, v[0], v[1], v[2]); }, in,
        {true, true, true}, mix64(15, i)));
  }
  for (int i = 0; i < 20; ++i) {  // batch_norm2d, train and eval modes
    Rng r(mix64(6, i));
    const int C = 1 + int(r.uniform_int(3));
    const bool training = i % 2 == 0;
    std::vector<Tensor<D>> in = {random_tensor({2, C, 3, 3}, r), random_tensor({C}, r, 0.5, 1.5),
                                 random_tensor({C}, r)};
    track(grad_check_max_rel_err(
        [training, C](Tape<D>* t, std::vector<Tensor<D>>& v) {
          Tensor<D> rm({C});
          Tensor<D> rv = Tensor<D>::full({C}, 1.0);
          return batch_norm2d(t, v[0], v[1], v[2], rm, rv, training);
        },
        in, {true, true, true}, mix64(16, i)));
  }
  for (int i = 0; i < 20; ++i) {  // softmax_cross_entropy
    Rng r(mix64(7, i));
    const int N = 1 + int(r.uniform_int(4)), K = 2 + int(r.uniform_int(8));
    std::vector<int> labels(N);
    for (auto& l : labels) l = int(r.uniform_int(K));
    std::vector<Tensor<D>> in = {random_tensor({N, K}, r, -3, 3)};
    track(grad_check_max_rel_err(
        [labels](Tape<D>* t, std::vector<Tensor<D>>& v) {
          return softmax_cross_entropy(t, v[0], labels);
        },
        in, {true}, mix64(17, i)));
  }
  for (int i = 0; i < 20; ++i) {  // mse
    Rng r(mix64(8, i));
    const int n = 2 + int(r.uniform_int(6));
    std::vector<Tensor<D>> in = {random_tensor({n, 3}, r), random_tensor({n, 3}, r)};
    track(grad_check_max_rel_err(
        [](Tape<D>* t, std::vector<Tensor<D>>& v) { return mse(t, v[0], v[1]); }, in, {true, true},
        mix64(18, i)));
  }
  for (int i = 0; i < 20; ++i) {  // add, scale, sum, global_avg_pool2d
    Rng r(mix64(9, i));
    std::vector<Tensor<D>> in = {random_tensor({2, 2, 3, 3}, r), random_tensor({2, 2, 3, 3}, r)};
    const double factor = r.uniform(-2, 2);
    track(grad_check_max_rel_err(
        [factor](Tape<D>* t, std::vector<Tensor<D>>& v) {
          auto h = add(t, v[0], scale(t, v[1], factor));
          return sum(t, global_avg_pool2d(t, h));
        },
        in, {true, true}, mix64(19, i)));
  }

  const double elapsed = seconds_since(t0);
  EXPECT_LT(elapsed, 120.0);
  std::cout << "[CRITERION 1] gradient checks: max rel err " << worst << ", " << elapsed
            << "s\n";
}

// ---------------------------------------------------------------------------
// 2. FFT oracle equivalence on 100 random 32x32 grids, plus Parseval and
//    conjugate symmetry.
// ---------------------------------------------------------------------------
TEST(Criterion02, FftOracleEquivalence) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(0xACC2);
  double worst_f = 0, worst_d = 0, worst_parseval = 0, worst_conj = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor<float> gf({32, 32});
    for (auto& v : gf.data()) v = float(rng.uniform(-1, 1));
    auto fast_f = fft2(gf);
    auto naive_f = dft2_naive(gf);
    for (std::size_t i = 0; i < fast_f.re.size(); ++i) {
      worst_f = std::max(worst_f, std::abs(double(fast_f.re[i]) - double(naive_f.re[i])));
      worst_f = std::max(worst_f, std::abs(double(fast_f.im[i]) - double(naive_f.im[i])));
    }

    Tensor<double> gd({32, 32});
    for (auto& v : gd.data()) v = rng.uniform(-1, 1);
    auto fast_d = fft2(gd);
    auto naive_d = dft2_naive(gd);
    for (std::size_t i = 0; i < fast_d.re.size(); ++i) {
      worst_d = std::max(worst_d, std::abs(fast_d.re[i] - naive_d.re[i]));
      worst_d = std::max(worst_d, std::abs(fast_d.im[i] - naive_d.im[i]));
    }

    // Parseval: sum |x|^2 == (1/1024) sum |F|^2
    double spatial = 0, freq = 0;
    for (double v : gd.data()) spatial += v * v;
    for (std::size_t i = 0; i < fast_d.re.size(); ++i)
      freq += fast_d.re[i] * fast_d.re[i] + fast_d.im[i] * fast_d.im[i];
    worst_parseval = std::max(worst_parseval, std::abs(spatial - freq / 1024.0) / spatial);

    // conjugate symmetry of a real-input transform
    for (int u = 0; u < 32; ++u)
      for (int v = 0; v < 32; ++v) {
        const int mu = (32 - u) % 32, mv = (32 - v) % 32;
        worst_conj = std::max(worst_conj,
                              std::abs(fast_d.real_at(u, v) - fast_d.real_at(mu, mv)));
        worst_conj = std::max(worst_conj,
                              std::abs(fast_d.imag_at(u, v) + fast_d.imag_at(mu, mv)));
      }
  }
  EXPECT_LT(worst_f, 1e-6);
  EXPECT_LT(worst_d, 1e-10);
  EXPECT_LT(worst_parseval, 1e-9);
  EXPECT_LT(worst_conj, 1e-9);
  const double elapsed = seconds_since(t0);
  EXPECT_LT(elapsed, 60.0);
  std::cout << "[CRITERION 2] fft2 vs naive: single " << worst_f << ", double " << worst_d
            << ", parseval " << worst_parseval << ", conj " << worst_conj << ", " << elapsed
            << "s\n";
}

// ---------------------------------------------------------------------------
// 3. Adjointness of conv2d / conv_transpose2d across the geometry matrix.
// ---------------------------------------------------------------------------
TEST(Criterion03, ConvAdjointnessGeometryMatrix) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(0xACC3);
  double worst_f = 0, worst_d = 0;
  for (int k = 1; k <= 4; ++k)
    for (int stride = 1; stride <= 2; ++stride)
      for (int pad = 0; pad <= 1; ++pad)
        for (int m = 2; m <= 3; ++m) {
          const int hx = k + stride * m - 2 * pad;
          if (hx < k || hx < 1) continue;
          const int hy = (hx + 2 * pad - k) / stride + 1;
          const int N = 2, C = 2, O = 3;
          {  // double
            auto x = random_tensor({N, C, hx, hx}, rng);
            auto w = random_tensor({O, C, k, k}, rng);
            auto y = random_tensor({N, O, hy, hy}, rng);
            double lhs = 0, rhs = 0;
            auto cx = conv2d<D>(nullptr, x, w, Tensor<D>({O}), stride, pad);
            for (std::size_t i = 0; i < cx.numel(); ++i) lhs += cx.data()[i] * y.data()[i];
            auto ty = conv_transpose2d<D>(nullptr, y, w, Tensor<D>({C}), stride, pad);
            for (std::size_t i = 0; i < ty.numel(); ++i) rhs += ty.data()[i] * x.data()[i];
            worst_d = std::max(worst_d,
                               std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1e-12}));
          }
          {  // single
            Tensor<float> x({N, C, hx, hx}), w({O, C, k, k}), y({N, O, hy, hy});
            for (auto& v : x.data()) v = float(rng.uniform(-1, 1));
            for (auto& v : w.data()) v = float(rng.uniform(-1, 1));
            for (auto& v : y.data()) v = float(rng.uniform(-1, 1));
            double lhs = 0, rhs = 0;
            auto cx = conv2d<float>(nullptr, x, w, Tensor<float>({O}), stride, pad);
            for (std::size_t i = 0; i < cx.numel(); ++i)
              lhs += double(cx.data()[i]) * y.data()[i];
            auto ty = conv_transpose2d<float>(nullptr, y, w, Tensor<float>({C}), stride, pad);
            for (std::size_t i = 0; i < ty.numel(); ++i)
              rhs += double(ty.data()[i]) * x.data()[i];
            worst_f = std::max(worst_f,
                               std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1e-12}));
          }
        }
  EXPECT_LT(worst_f, 1e-6);
  EXPECT_LT(worst_d, 1e-12);
  const double elapsed = seconds_since(t0);
  EXPECT_LT(elapsed, 60.0);
  std::cout << "[CRITERION 3] adjointness: single " << worst_f << ", double " << worst_d << ", "
            << elapsed << "s\n";
}

// ---------------------------------------------------------------------------
// 4. Protocol fidelity: scheduler factor, early stop, lambda arithmetic,
//    95:5 split.
// ---------------------------------------------------------------------------
TEST(Criterion04, ProtocolFidelity) {
  {  // lr: 0.1 -> 0.02 -> 0.004, each cut exactly x0.2
    TrainConfig cfg;
    RunState<float> state;
    state.lr = cfg.initial_lr;
    state.best_val_acc = 0.9;
    for (int i = 0; i < cfg.scheduler_patience; ++i) scheduler_step(state, 0.1, cfg);
    EXPECT_DOUBLE_EQ(state.lr, 0.1 * 0.2);
    for (int i = 0; i < cfg.scheduler_patience; ++i) scheduler_step(state, 0.1, cfg);
    EXPECT_DOUBLE_EQ(state.lr, 0.1 * 0.2 * 0.2);
  }
  {  // early stop at exactly 10 stagnant epochs
    TrainConfig cfg;
    EXPECT_EQ(cfg.patience_epochs, 10);
    RunState<float> state;
    state.best_val_acc = 0.9;
    for (int i = 1; i <= 9; ++i) {
      scheduler_step(state, 0.2, cfg);
      EXPECT_FALSE(early_stop_check(state, cfg));
    }
    scheduler_step(state, 0.2, cfg);
    EXPECT_TRUE(early_stop_check(state, cfg));
  }
  {  // lambda default and loss arithmetic
    TrainConfig cfg;
    EXPECT_DOUBLE_EQ(cfg.lambda, 0.01);
    auto cls = Tensor<float>::scalar(2.3f);
    std::optional<Tensor<float>> aux = Tensor<float>::scalar(10.0f);
    EXPECT_NEAR(total_loss<float>(nullptr, cls, aux, cfg.lambda).item(), 2.4f, 1e-6f);
  }
  {  // 50,000-record split
    std::vector<ImageRecord> records(50000);
    auto split = split_train_val(records, 0.05, 31415);
    EXPECT_EQ(split.train.size(), 47500u);
    EXPECT_EQ(split.val.size(), 2500u);
  }
  std::cout << "[CRITERION 4] protocol fidelity: lr x0.2 cuts, 10-epoch stop, lambda 0.01, "
               "47500/2500 split\n";
}

// ---------------------------------------------------------------------------
// 5. Zero-weight equivalence: lambda = 0 (and AuxTask::None) leave the
//    classifier trajectory bit-identical to a pure classifier.
// ---------------------------------------------------------------------------
TEST(Criterion05, ZeroWeightEquivalence) {
  auto train_pool = synth_dataset(100, 2, 616);
  auto test_pool = synth_dataset(20, 2, 617);
  DatasetSplit split = prepare_dataset(train_pool, test_pool, 0.1, 618);

  TrainConfig cfg;
  cfg.lambda = 0.0;
  cfg.initial_lr = 0.05;
  cfg.batch_size = 32;
  cfg.max_epochs = 3;

  auto run = [&](AuxTask aux) {
    Network<float> net({Backbone::plain_cnn, 4, 4242}, aux);
    Loader<float> train_loader(&split.train, cfg.batch_size, Order::random, 1001, true);
    Loader<float> val_loader(&split.val, cfg.batch_size, Order::sequential, 0, cfg.augment_val);
    train_model(net, train_loader, val_loader, cfg);
    return net;
  };
  Network<float> none = run(AuxTask::None);
  Network<float> ft = run(AuxTask::FT);

  std::size_t compared = 0;
  for (const auto& [name, t] : none.named_parameters())
    for (const auto& [name2, t2] : ft.named_parameters()) {
      if (name2 != name) continue;
      ++compared;
      ASSERT_EQ(t.numel(), t2.numel());
      for (std::size_t j = 0; j < t.numel(); ++j)
        ASSERT_EQ(t.data()[j], t2.data()[j]) << name << "[" << j << "]";
    }
  EXPECT_GT(compared, 0u);
  std::cout << "[CRITERION 5] zero-weight equivalence: " << compared
            << " shared tensors bit-identical\n";
}

// ---------------------------------------------------------------------------
// 6. Training smoke (synthetic): micro-resnet + FT reaches >= 85% clean test
//    accuracy within 30 epochs on the 2-class set (2000 train / 400 test).
// ---------------------------------------------------------------------------
TEST(Criterion06, SyntheticTrainingSmoke) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentConfig cfg;
  cfg.synthetic = true;
  cfg.synth_classes = 2;
  cfg.synth_per_class = 1000;
  cfg.synth_test_per_class = 200;
  cfg.width = 8;
  cfg.train.batch_size = 128;
  cfg.train.initial_lr = 0.1;
  cfg.train.max_epochs = 30;
  cfg.train.seed = 8787;
  cfg.out_dir = scratch_dir("criterion6").string();

  RunReport report =
      run_experiment<float>({Backbone::micro_resnet, AuxTask::FT, TrainMode::clean}, cfg);
  const double elapsed = seconds_since(t0);
  ASSERT_FALSE(report.failed) << report.error;
  EXPECT_LE(report.epochs_run, 30);
  EXPECT_GE(report.clean_test_acc, 0.85);
  EXPECT_LT(elapsed, 600.0);
  std::cout << "[CRITERION 6] micro-resnet+FT synthetic: clean acc " << report.clean_test_acc
            << " in " << report.epochs_run << " epochs, " << elapsed << "s\n";
}

// ---------------------------------------------------------------------------
// 7. Training smoke (real CIFAR-10 subset), optional: runs when
//    CIFAR10_DATA_DIR is set. plain-cnn, airplane vs automobile, all three
//    aux variants complete, none variant must reach >= 70%.
// ---------------------------------------------------------------------------
TEST(Criterion07, RealCifarTrainingSmoke) {
  const char* dir = std::getenv("CIFAR10_DATA_DIR");
  if (!dir) {
    std::cout << "[CRITERION 7] skipped: CIFAR10_DATA_DIR not set (optional criterion)\n";
    GTEST_SKIP() << "CIFAR-10 files not available";
  }
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentConfig cfg;
  cfg.synthetic = false;
  cfg.data_dir = dir;
  cfg.class_filter = {0, 1};  // airplane vs automobile
  cfg.max_train_per_class = 1000;
  cfg.width = 16;
  cfg.train.batch_size = 128;
  cfg.train.initial_lr = 0.05;
  cfg.train.max_epochs = 15;
  cfg.train.seed = 2024;
  cfg.out_dir = scratch_dir("criterion7").string();

  double none_acc = 0;
  for (AuxTask aux : {AuxTask::None, AuxTask::Recon, AuxTask::FT}) {
    RunReport report = run_experiment<float>({Backbone::plain_cnn, aux, TrainMode::clean}, cfg);
    ASSERT_FALSE(report.failed) << to_string(aux) << ": " << report.error;
    if (aux == AuxTask::None) none_acc = report.clean_test_acc;
    std::cout << "  criterion 7 cell " << to_string(aux) << ": clean "
              << report.clean_test_acc << "\n";
  }
  const double elapsed = seconds_since(t0);
  EXPECT_GE(none_acc, 0.70);
  EXPECT_LT(elapsed, 1200.0);
  std::cout << "[CRITERION 7] plain-cnn CIFAR 2-class: clean acc " << none_acc << ", all aux "
               "variants completed, " << elapsed << "s\n";
}

// ---------------------------------------------------------------------------
// 8. Attack effectiveness: FGSM at eps 0.3 costs a clean-trained smoke model
//    >= 30 accuracy points.
// ---------------------------------------------------------------------------
TEST(Criterion08, AttackEffectiveness) {
  const auto& runs = smoke_runs();
  ASSERT_FALSE(runs.clean.failed) << runs.clean.error;
  const double drop = runs.clean.clean_test_acc - runs.clean.adv_test_acc;
  EXPECT_GE(runs.clean.clean_test_acc, 0.85);  // the attack needs a competent victim
  EXPECT_GE(drop, 0.30);
  std::cout << "[CRITERION 8] FGSM eps=0.3: clean " << runs.clean.clean_test_acc << " -> adv "
            << runs.clean.adv_test_acc << " (drop " << drop << ")\n";
}

// ---------------------------------------------------------------------------
// 9. Adversarial-training benefit: at equal budget, the adversarially
//    trained twin beats the clean-trained model by >= 15 points on the
//    adversarial test set.
// ---------------------------------------------------------------------------
TEST(Criterion09, AdversarialTrainingBenefit) {
  const auto& runs = smoke_runs();
  ASSERT_FALSE(runs.adv.failed) << runs.adv.error;
  const double gain = runs.adv.adv_test_acc - runs.clean.adv_test_acc;
  EXPECT_GE(gain, 0.15);
  std::cout << "[CRITERION 9] adversarial training: adv acc " << runs.adv.adv_test_acc << " vs "
            << runs.clean.adv_test_acc << " clean-trained (gain " << gain << ")\n";
}

// ---------------------------------------------------------------------------
// 10. FGSM invariants: eps=0 bitwise identity, L-inf budget respected,
//     attack never mutates weights.
// ---------------------------------------------------------------------------
TEST(Criterion10, FgsmInvariants) {
  const auto& runs = smoke_runs();
  Network<float> net = checkpoint_load<float>(
      (fs::path(runs.cfg.out_dir) / "plain-cnn" / "none" / "clean" / "checkpoint.bin").string());

  DatasetSplit split = load_experiment_data(runs.cfg);
  Loader<float> loader(&split.test, 64, Order::sequential, 0, false);
  auto batch = loader.next();
  ASSERT_TRUE(batch.has_value());

  {  // eps = 0 identity, bitwise
    auto adv = fgsm(net, batch->images, batch->labels, 0.0);
    for (std::size_t i = 0; i < adv.numel(); ++i)
      ASSERT_EQ(adv.data()[i], batch->images.data()[i]);
  }
  {  // budget bound and weight immutability
    auto before = net.state_snapshot();
    auto adv = fgsm(net, batch->images, batch->labels, 0.3);
    float worst = 0;
    for (std::size_t i = 0; i < adv.numel(); ++i)
      worst = std::max(worst, std::abs(adv.data()[i] - batch->images.data()[i]));
    EXPECT_LE(worst, 0.3f + 1e-7f);
    auto after = net.state_snapshot();
    ASSERT_EQ(before.size(), after.size());
    for (std::size_t i = 0; i < before.size(); ++i) ASSERT_EQ(before[i], after[i]);
    std::cout << "[CRITERION 10] FGSM invariants: max |delta| " << worst
              << ", weights bit-identical, eps=0 identity\n";
  }
}

// ---------------------------------------------------------------------------
// 11. Reproducibility: a cell rerun from its recorded config snapshot +
//     seed reproduces the accuracies exactly; checkpoints round-trip
//     bit-exactly.
// ---------------------------------------------------------------------------
TEST(Criterion11, Reproducibility) {
  ExperimentConfig cfg;
  cfg.synthetic = true;
  cfg.synth_classes = 2;
  cfg.synth_per_class = 40;
  cfg.synth_test_per_class = 10;
  cfg.width = 4;
  cfg.val_fraction = 0.1;
  cfg.train.batch_size = 16;
  cfg.train.max_epochs = 2;
  cfg.train.initial_lr = 0.05;
  cfg.train.seed = 11011;
  cfg.out_dir = scratch_dir("criterion11a").string();

  GridCell cell{Backbone::micro_resnet, AuxTask::FT, TrainMode::adversarial};
  RunReport first = run_experiment<float>(cell, cfg);
  ASSERT_FALSE(first.failed) << first.error;

  // rebuild the configuration purely from the recorded snapshot
  ExperimentConfig replay = config_from_json(first.config_snapshot);
  replay.out_dir = scratch_dir("criterion11b").string();
  RunReport second = run_experiment<float>(cell, replay);
  EXPECT_EQ(first.clean_test_acc, second.clean_test_acc);
  EXPECT_EQ(first.adv_test_acc, second.adv_test_acc);
  EXPECT_EQ(first.epochs_run, second.epochs_run);
  EXPECT_EQ(first.seed, second.seed);

  // checkpoint round-trip: load then re-save, byte-identical files
  const fs::path ckpt =
      fs::path(cfg.out_dir) / "micro-resnet" / "ft" / "adversarial" / "checkpoint.bin";
  Network<float> net = checkpoint_load<float>(ckpt.string());
  const fs::path copy = fs::path(cfg.out_dir) / "roundtrip.bin";
  checkpoint_save(net, copy.string());
  auto bytes_a = read_file_bytes(ckpt.string());
  auto bytes_b = read_file_bytes(copy.string());
  EXPECT_EQ(bytes_a, bytes_b);
  std::cout << "[CRITERION 11] reproducibility: rerun accuracies identical (clean "
            << first.clean_test_acc << ", adv " << first.adv_test_acc
            << "), checkpoint round-trip byte-identical\n";
}
