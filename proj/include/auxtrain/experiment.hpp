// Experiment harness: runs (backbone x aux-task x training-mode) grid
// cells, each with an independently derived seed, and aggregates the
// resulting reports into a table of clean / adversarial test accuracies.
//
// Output layout: <out>/<backbone>/<aux>/<mode>/{checkpoint.bin, metrics.csv,
// report.json}, one JSON object per report file.
#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "auxtrain/data.hpp"
#include "auxtrain/models.hpp"
#include "auxtrain/training.hpp"

namespace auxtrain {

enum class TrainMode { clean, adversarial };

inline const char* to_string(TrainMode m) { return m == TrainMode::clean ? "clean" : "adversarial"; }

inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "clean") return TrainMode::clean;
  if (s == "adversarial") return TrainMode::adversarial;
  throw ContractError("unknown train mode '" + s + "' (expected clean|adversarial)");
}

struct GridCell {
  Backbone backbone = Backbone::plain_cnn;
  AuxTask aux = AuxTask::None;
  TrainMode mode = TrainMode::clean;
};

// Everything needed to reproduce a run: data selection plus the shared
// TrainConfig. Per-cell seeds are derived from `train.seed` and the cell
// coordinates, so cells are independent and individually reproducible.
struct ExperimentConfig {
  TrainConfig train;
  AdvConfig adv;              // evaluation attack; also the training attack in adversarial mode
  int width = 16;
  bool synthetic = true;
  std::string data_dir;
  int synth_classes = 2;
  int synth_per_class = 1000;
  int synth_test_per_class = 200;
  std::vector<int> class_filter;   // optional CIFAR class subset (labels remapped)
  int max_train_per_class = 0;     // 0 = no cap
  int max_test_per_class = 0;
  double val_fraction = 0.05;
  std::uint64_t data_seed = 42;    // shared across cells: same data, same split
  std::string out_dir = "runs";
};

struct RunReport {
  std::string backbone, aux, mode;
  double clean_test_acc = 0.0;
  double adv_test_acc = 0.0;
  int epochs_run = 0;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  nlohmann::json config_snapshot;
};

inline std::uint64_t derive_cell_seed(std::uint64_t base, const GridCell& cell) {
  return mix64(mix64(mix64(base, std::uint64_t(cell.backbone) + 1),
                     std::uint64_t(cell.aux) + 1),
               std::uint64_t(cell.mode) + 1);
}

inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["lambda"] = cfg.train.lambda;
  j["initial_lr"] = cfg.train.initial_lr;
  j["plateau_factor"] = cfg.train.plateau_factor;
  j["patience_epochs"] = cfg.train.patience_epochs;
  j["scheduler_patience"] = cfg.train.scheduler_patience;
  j["improvement_tol"] = cfg.train.improvement_tol;
  j["batch_size"] = cfg.train.batch_size;
  j["momentum"] = cfg.train.momentum;
  j["weight_decay"] = cfg.train.weight_decay;
  j["max_epochs"] = cfg.train.max_epochs;
  j["seed"] = cfg.train.seed;
  j["augment_val"] = cfg.train.augment_val;
  j["ft_log_magnitude"] = cfg.train.ft_log_magnitude;
  j["monitor_adversarial_val"] = cfg.train.monitor_adversarial_val;
  j["epsilon"] = cfg.adv.epsilon;
  j["adv_fraction"] = cfg.adv.train_adv_fraction;
  j["attack_includes_aux"] = cfg.adv.attack_includes_aux;
  if (cfg.adv.clip) j["clip"] = {cfg.adv.clip->first, cfg.adv.clip->second};
  j["width"] = cfg.width;
  j["synthetic"] = cfg.synthetic;
  j["data_dir"] = cfg.data_dir;
  j["synth_classes"] = cfg.synth_classes;
  j["synth_per_class"] = cfg.synth_per_class;
  j["synth_test_per_class"] = cfg.synth_test_per_class;
  j["class_filter"] = cfg.class_filter;
  j["max_train_per_class"] = cfg.max_train_per_class;
  j["max_test_per_class"] = cfg.max_test_per_class;
  j["val_fraction"] = cfg.val_fraction;
  j["data_seed"] = cfg.data_seed;
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  cfg.train.lambda = j.at("lambda").get<double>();
  cfg.train.initial_lr = j.at("initial_lr").get<double>();
  cfg.train.plateau_factor = j.at("plateau_factor").get<double>();
  cfg.train.patience_epochs = j.at("patience_epochs").get<int>();
  cfg.train.scheduler_patience = j.at("scheduler_patience").get<int>();
  cfg.train.improvement_tol = j.at("improvement_tol").get<double>();
  cfg.train.batch_size = j.at("batch_size").get<int>();
  cfg.train.momentum = j.at("momentum").get<double>();
  cfg.train.weight_decay = j.at("weight_decay").get<double>();
  cfg.train.max_epochs = j.at("max_epochs").get<int>();
  cfg.train.seed = j.at("seed").get<std::uint64_t>();
  cfg.train.augment_val = j.at("augment_val").get<bool>();
  cfg.train.ft_log_magnitude = j.at("ft_log_magnitude").get<bool>();
  cfg.train.monitor_adversarial_val = j.at("monitor_adversarial_val").get<bool>();
  cfg.adv.epsilon = j.at("epsilon").get<double>();
  cfg.adv.train_adv_fraction = j.at("adv_fraction").get<double>();
  cfg.adv.attack_includes_aux = j.at("attack_includes_aux").get<bool>();
  if (j.contains("clip")) cfg.adv.clip = {j["clip"][0].get<double>(), j["clip"][1].get<double>()};
  cfg.width = j.at("width").get<int>();
  cfg.synthetic = j.at("synthetic").get<bool>();
  cfg.data_dir = j.at("data_dir").get<std::string>();
  cfg.synth_classes = j.at("synth_classes").get<int>();
  cfg.synth_per_class = j.at("synth_per_class").get<int>();
  cfg.synth_test_per_class = j.at("synth_test_per_class").get<int>();
  cfg.class_filter = j.at("class_filter").get<std::vector<int>>();
  cfg.max_train_per_class = j.at("max_train_per_class").get<int>();
  cfg.max_test_per_class = j.at("max_test_per_class").get<int>();
  cfg.val_fraction = j.at("val_fraction").get<double>();
  cfg.data_seed = j.at("data_seed").get<std::uint64_t>();
  return cfg;
}

inline nlohmann::json report_to_json(const RunReport& r) {
  nlohmann::json j;
  j["backbone"] = r.backbone;
  j["aux"] = r.aux;
  j["mode"] = r.mode;
  j["clean_test_acc"] = r.clean_test_acc;
  j["adv_test_acc"] = r.adv_test_acc;
  j["epochs_run"] = r.epochs_run;
  j["wall_seconds"] = r.wall_seconds;
  j["seed"] = r.seed;
  j["failed"] = r.failed;
  j["error"] = r.error;
  j["config"] = r.config_snapshot;
  return j;
}

inline RunReport report_from_json(const nlohmann::json& j) {
  RunReport r;
  r.backbone = j.at("backbone").get<std::string>();
  r.aux = j.at("aux").get<std::string>();
  r.mode = j.at("mode").get<std::string>();
  r.clean_test_acc = j.at("clean_test_acc").get<double>();
  r.adv_test_acc = j.at("adv_test_acc").get<double>();
  r.epochs_run = j.at("epochs_run").get<int>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.failed = j.at("failed").get<bool>();
  r.error = j.at("error").get<std::string>();
  if (j.contains("config")) r.config_snapshot = j.at("config");
  return r;
}

// Builds the standardized split for an experiment. Synthetic train and test
// pools come from disjoint seed streams of the shared data seed.
inline DatasetSplit load_experiment_data(const ExperimentConfig& cfg) {
  std::vector<ImageRecord> train_pool, test_pool;
  if (cfg.synthetic) {
    train_pool = synth_dataset(cfg.synth_per_class, cfg.synth_classes, cfg.data_seed);
    test_pool = synth_dataset(cfg.synth_test_per_class, cfg.synth_classes, mix64(cfg.data_seed, 1));
  } else {
    if (cfg.data_dir.empty())
      throw ContractError("data_dir is required unless synthetic data is selected");
    auto [train, test] = load_cifar10(cfg.data_dir);
    train_pool = std::move(train);
    test_pool = std::move(test);
    if (!cfg.class_filter.empty()) {
      train_pool = filter_classes(train_pool, cfg.class_filter);
      test_pool = filter_classes(test_pool, cfg.class_filter);
    }
    if (cfg.max_train_per_class > 0) train_pool = limit_per_class(train_pool, cfg.max_train_per_class);
    if (cfg.max_test_per_class > 0) test_pool = limit_per_class(test_pool, cfg.max_test_per_class);
  }
  return prepare_dataset(train_pool, test_pool, cfg.val_fraction, cfg.data_seed);
}

inline std::string cell_dir(const ExperimentConfig& cfg, const GridCell& cell) {
  namespace fs = std::filesystem;
  return (fs::path(cfg.out_dir) / to_string(cell.backbone) / to_string(cell.aux) /
          to_string(cell.mode))
      .string();
}

// Trains one grid cell end to end: build network, train with the protocol,
// restore best-validation weights, evaluate clean and FGSM test accuracy,
// persist checkpoint + metrics + report. Test data is touched only after
// training has completed.
template <typename S = float>
RunReport run_experiment(const GridCell& cell, const ExperimentConfig& cfg,
                         const DatasetSplit* shared_split = nullptr) {
  namespace fs = std::filesystem;
  const auto t0 = std::chrono::steady_clock::now();

  RunReport report;
  report.backbone = to_string(cell.backbone);
  report.aux = to_string(cell.aux);
  report.mode = to_string(cell.mode);
  report.seed = derive_cell_seed(cfg.train.seed, cell);
  report.config_snapshot = config_to_json(cfg);

  const std::string dir = cell_dir(cfg, cell);
  fs::create_directories(dir);

  try {
    DatasetSplit local;
    const DatasetSplit* split = shared_split;
    if (!split) {
      local = load_experiment_data(cfg);
      split = &local;
    }

    TrainConfig train_cfg = cfg.train;
    train_cfg.seed = report.seed;
    if (cell.mode == TrainMode::adversarial) train_cfg.adv = cfg.adv;

    EncoderConfig enc;
    enc.backbone = cell.backbone;
    enc.width = cfg.width;
    enc.seed = report.seed;
    Network<S> net(enc, cell.aux);

    Loader<S> train_loader(&split->train, train_cfg.batch_size, Order::random,
                           mix64(report.seed, 0x10adULL), /*augment=*/true);
    Loader<S> val_loader(&split->val, train_cfg.batch_size, Order::sequential,
                         mix64(report.seed, 0x7a1ULL), train_cfg.augment_val);

    RunState<S> state = train_model(net, train_loader, val_loader, train_cfg,
                                    (fs::path(dir) / "metrics.csv").string());
    report.epochs_run = state.epoch;

    // evaluation phase: test data is only materialized here
    Loader<S> test_loader(&split->test, train_cfg.batch_size, Order::sequential, 0, false);
    report.clean_test_acc = evaluate(net, test_loader);
    report.adv_test_acc =
        adv_evaluate(net, test_loader, cfg.adv.epsilon, cfg.adv.clip,
                     cfg.adv.attack_includes_aux, cfg.train.lambda, cfg.train.ft_log_magnitude);

    checkpoint_save(net, (fs::path(dir) / "checkpoint.bin").string());
  } catch (const DivergenceError& e) {
    report.failed = true;
    report.error = e.what();
  }

  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ofstream out(fs::path(dir) / "report.json", std::ios::trunc);
  if (!out) throw IoError("cannot write report in " + dir);
  out << report_to_json(report).dump() << '\n';
  return report;
}

// Runs every cell of the grid, optionally across a pool of worker threads.
// Cells are fully isolated; the dataset is shared read-only.
template <typename S = float>
std::vector<RunReport> run_grid(const std::vector<GridCell>& cells, const ExperimentConfig& cfg,
                                int workers = 1) {
  if (cells.empty()) throw ContractError("empty experiment grid");
  DatasetSplit split = load_experiment_data(cfg);
  std::vector<RunReport> reports(cells.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < cells.size(); ++i)
      reports[i] = run_experiment<S>(cells[i], cfg, &split);
    return reports;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      reports[i] = run_experiment<S>(cells[i], cfg, &split);
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min<int>(workers, int(cells.size())); ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  return reports;
}

inline std::vector<RunReport> collect_reports(const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::vector<RunReport> reports;
  if (!fs::exists(out_dir)) throw IoError("no such output directory: " + out_dir);
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(out_dir))
    if (entry.is_regular_file() && entry.path().filename() == "report.json")
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  for (const auto& p : files) {
    std::ifstream in(p);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      reports.push_back(report_from_json(nlohmann::json::parse(line)));
    }
  }
  return reports;
}

struct ReportTable {
  std::string text;  // aligned human-readable table
  std::string csv;   // machine-readable source of truth
};

// Rows: backbone x train-mode. Columns: aux task x {clean, adv}, aux order
// fixed as none, recon, ft. Failed cells render as FAILED; absent cells
// stay blank.
inline ReportTable report_table(const std::vector<RunReport>& reports) {
  if (reports.empty()) throw ContractError("report_table needs at least one report");
  const std::vector<std::string> aux_order = {"none", "recon", "ft"};

  std::vector<std::pair<std::string, std::string>> rows;  // (backbone, mode)
  for (const auto& r : reports) {
    std::pair<std::string, std::string> key{r.backbone, r.mode};
    if (std::find(rows.begin(), rows.end(), key) == rows.end()) rows.push_back(key);
  }
  std::sort(rows.begin(), rows.end());

  auto find = [&](const std::string& bb, const std::string& mode,
                  const std::string& aux) -> const RunReport* {
    for (const auto& r : reports)
      if (r.backbone == bb && r.mode == mode && r.aux == aux) return &r;
    return nullptr;
  };
  auto fmt = [](double acc) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << acc;
    return s.str();
  };

  std::ostringstream csv;
  csv << "backbone,mode";
  for (const auto& a : aux_order) csv << ',' << a << "_clean," << a << "_adv";
  csv << '\n';

  std::vector<std::vector<std::string>> grid;
  std::vector<std::string> head = {"backbone", "mode"};
  for (const auto& a : aux_order) {
    head.push_back(a + "/clean");
    head.push_back(a + "/adv");
  }
  grid.push_back(head);

  for (const auto& [bb, mode] : rows) {
    std::vector<std::string> line = {bb, mode};
    csv << bb << ',' << mode;
    for (const auto& a : aux_order) {
      const RunReport* r = find(bb, mode, a);
      std::string clean = !r ? "" : (r->failed ? "FAILED" : fmt(r->clean_test_acc));
      std::string adv = !r ? "" : (r->failed ? "FAILED" : fmt(r->adv_test_acc));
      line.push_back(clean);
      line.push_back(adv);
      csv << ',' << clean << ',' << adv;
    }
    csv << '\n';
    grid.push_back(line);
  }

  std::vector<std::size_t> widths(grid[0].size(), 0);
  for (const auto& line : grid)
    for (std::size_t c = 0; c < line.size(); ++c) widths[c] = std::max(widths[c], line[c].size());
  std::ostringstream text;
  for (const auto& line : grid) {
    for (std::size_t c = 0; c < line.size(); ++c)
      text << std::left << std::setw(int(widths[c]) + 2) << line[c];
    text << '\n';
  }
  return {text.str(), csv.str()};
}

}  // namespace auxtrain
