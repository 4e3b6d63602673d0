// Command-line experiment harness.
//
//   auxtrain train       one (backbone, aux, mode) cell
//   auxtrain grid        full backbone x aux x mode matrix
//   auxtrain attack-eval FGSM-evaluate an existing checkpoint
//   auxtrain report      aggregate report rows into a table
//
// Configuration: defaults < config file (--config, key=value lines) <
// --set key=value overrides < dedicated flags. Exits 0 iff every requested
// cell succeeded.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "auxtrain/auxtrain.hpp"

namespace {

using namespace auxtrain;

struct GridSpec {
  std::vector<Backbone> backbones = {Backbone::plain_cnn, Backbone::micro_resnet};
  std::vector<AuxTask> aux_tasks = {AuxTask::None, AuxTask::Recon, AuxTask::FT};
  std::vector<TrainMode> modes = {TrainMode::clean, TrainMode::adversarial};
};

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    // trim
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ContractError("config key '" + key + "' expects a boolean, got '" + v + "'");
}

void apply_kv(ExperimentConfig& cfg, GridSpec& grid, GridCell& cell, const std::string& key,
              const std::string& value) {
  auto as_int = [&]() { return std::stoi(value); };
  auto as_double = [&]() { return std::stod(value); };
  auto as_u64 = [&]() { return std::uint64_t(std::stoull(value)); };

  if (key == "lambda") cfg.train.lambda = as_double();
  else if (key == "lr" || key == "initial_lr") cfg.train.initial_lr = as_double();
  else if (key == "plateau_factor") cfg.train.plateau_factor = as_double();
  else if (key == "patience") cfg.train.patience_epochs = as_int();
  else if (key == "scheduler_patience") cfg.train.scheduler_patience = as_int();
  else if (key == "improvement_tol") cfg.train.improvement_tol = as_double();
  else if (key == "batch_size") cfg.train.batch_size = as_int();
  else if (key == "momentum") cfg.train.momentum = as_double();
  else if (key == "weight_decay") cfg.train.weight_decay = as_double();
  else if (key == "max_epochs") cfg.train.max_epochs = as_int();
  else if (key == "seed") cfg.train.seed = as_u64();
  else if (key == "augment_val") cfg.train.augment_val = parse_bool(key, value);
  else if (key == "monitor_adversarial_val")
    cfg.train.monitor_adversarial_val = parse_bool(key, value);
  else if (key == "ft_log_magnitude") cfg.train.ft_log_magnitude = parse_bool(key, value);
  else if (key == "epsilon") cfg.adv.epsilon = as_double();
  else if (key == "adv_fraction") cfg.adv.train_adv_fraction = as_double();
  else if (key == "attack_includes_aux") cfg.adv.attack_includes_aux = parse_bool(key, value);
  else if (key == "clip_lo") cfg.adv.clip = {as_double(), cfg.adv.clip ? cfg.adv.clip->second : 0.0};
  else if (key == "clip_hi") cfg.adv.clip = {cfg.adv.clip ? cfg.adv.clip->first : 0.0, as_double()};
  else if (key == "width") cfg.width = as_int();
  else if (key == "synthetic") cfg.synthetic = parse_bool(key, value);
  else if (key == "data_dir") cfg.data_dir = value;
  else if (key == "out") cfg.out_dir = value;
  else if (key == "synth_classes") cfg.synth_classes = as_int();
  else if (key == "synth_per_class") cfg.synth_per_class = as_int();
  else if (key == "synth_test_per_class") cfg.synth_test_per_class = as_int();
  else if (key == "val_fraction") cfg.val_fraction = as_double();
  else if (key == "data_seed") cfg.data_seed = as_u64();
  else if (key == "max_train_per_class") cfg.max_train_per_class = as_int();
  else if (key == "max_test_per_class") cfg.max_test_per_class = as_int();
  else if (key == "class_filter") {
    cfg.class_filter.clear();
    for (const auto& c : split_csv(value)) cfg.class_filter.push_back(std::stoi(c));
  } else if (key == "backbone") cell.backbone = backbone_from_string(value);
  else if (key == "aux") cell.aux = aux_task_from_string(value);
  else if (key == "mode") cell.mode = train_mode_from_string(value);
  else if (key == "backbones") {
    grid.backbones.clear();
    for (const auto& b : split_csv(value)) grid.backbones.push_back(backbone_from_string(b));
  } else if (key == "aux_tasks") {
    grid.aux_tasks.clear();
    for (const auto& a : split_csv(value)) grid.aux_tasks.push_back(aux_task_from_string(a));
  } else if (key == "modes") {
    grid.modes.clear();
    for (const auto& m : split_csv(value)) grid.modes.push_back(train_mode_from_string(m));
  } else {
    throw ContractError("unknown config key '" + key + "'");
  }
}

void apply_set(ExperimentConfig& cfg, GridSpec& grid, GridCell& cell, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos)
    throw ContractError("--set expects key=value, got '" + kv + "'");
  apply_kv(cfg, grid, cell, kv.substr(0, eq), kv.substr(eq + 1));
}

void load_config_file(ExperimentConfig& cfg, GridSpec& grid, GridCell& cell,
                      const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected key=value");
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    auto trim = [](std::string s) {
      const auto b2 = s.find_first_not_of(" \t");
      const auto e2 = s.find_last_not_of(" \t");
      return b2 == std::string::npos ? std::string() : s.substr(b2, e2 - b2 + 1);
    };
    apply_kv(cfg, grid, cell, trim(key), trim(value));
  }
}

void print_report(const RunReport& r) {
  if (r.failed) {
    std::cout << "[" << r.backbone << " / " << r.aux << " / " << r.mode << "] FAILED: " << r.error
              << "\n";
    return;
  }
  std::cout << "[" << r.backbone << " / " << r.aux << " / " << r.mode
            << "] clean=" << r.clean_test_acc << " adv=" << r.adv_test_acc
            << " epochs=" << r.epochs_run << " wall=" << r.wall_seconds << "s seed=" << r.seed
            << "\n";
}

void write_tables(const std::string& out_dir, const std::vector<RunReport>& reports) {
  const ReportTable table = report_table(reports);
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::ofstream csv(fs::path(out_dir) / "report.csv");
  csv << table.csv;
  std::ofstream txt(fs::path(out_dir) / "report.txt");
  txt << table.text;
  std::cout << table.text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"auxiliary-task image classification experiments"};
  app.require_subcommand(1);

  std::string config_file, data_dir, out_dir, checkpoint_path;
  std::vector<std::string> sets;
  bool synthetic_flag = false;
  int workers = 1;
  double epsilon_flag = -1.0;
  std::string backbone_flag, aux_flag, mode_flag;

  app.add_option("--config", config_file, "config file with key=value lines");
  app.add_option("--set", sets, "config override key=value (repeatable)");
  app.add_option("--data-dir", data_dir, "directory with CIFAR-10 *_batch.bin files");
  app.add_flag("--synthetic", synthetic_flag, "use the synthetic grating dataset");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--workers", workers, "parallel grid workers")->check(CLI::PositiveNumber);

  auto* train_cmd = app.add_subcommand("train", "train one grid cell");
  train_cmd->add_option("--backbone", backbone_flag, "plain-cnn | micro-resnet");
  train_cmd->add_option("--aux", aux_flag, "none | recon | ft");
  train_cmd->add_option("--mode", mode_flag, "clean | adversarial");

  auto* grid_cmd = app.add_subcommand("grid", "run the full experiment matrix");

  auto* attack_cmd = app.add_subcommand("attack-eval", "evaluate a checkpoint under FGSM");
  attack_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  attack_cmd->add_option("--epsilon", epsilon_flag, "attack budget (overrides config)");

  auto* report_cmd = app.add_subcommand("report", "aggregate reports under --out");

  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg;
    GridSpec grid;
    GridCell cell;
    if (!config_file.empty()) load_config_file(cfg, grid, cell, config_file);
    for (const auto& kv : sets) apply_set(cfg, grid, cell, kv);
    if (!data_dir.empty()) {
      cfg.data_dir = data_dir;
      cfg.synthetic = false;
    }
    if (synthetic_flag) cfg.synthetic = true;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (!backbone_flag.empty()) cell.backbone = backbone_from_string(backbone_flag);
    if (!aux_flag.empty()) cell.aux = aux_task_from_string(aux_flag);
    if (!mode_flag.empty()) cell.mode = train_mode_from_string(mode_flag);

    if (train_cmd->parsed()) {
      RunReport report = run_experiment<float>(cell, cfg);
      print_report(report);
      write_tables(cfg.out_dir, {report});
      return report.failed ? 1 : 0;
    }

    if (grid_cmd->parsed()) {
      std::vector<GridCell> cells;
      for (Backbone b : grid.backbones)
        for (AuxTask a : grid.aux_tasks)
          for (TrainMode m : grid.modes) cells.push_back({b, a, m});
      std::vector<RunReport> reports = run_grid<float>(cells, cfg, workers);
      for (const auto& r : reports) print_report(r);
      write_tables(cfg.out_dir, reports);
      for (const auto& r : reports)
        if (r.failed) return 1;
      return 0;
    }

    if (attack_cmd->parsed()) {
      Network<float> net = checkpoint_load<float>(checkpoint_path);
      const double eps = epsilon_flag >= 0 ? epsilon_flag : cfg.adv.epsilon;
      DatasetSplit split = load_experiment_data(cfg);
      Loader<float> test_loader(&split.test, cfg.train.batch_size, Order::sequential, 0, false);
      const double clean = evaluate(net, test_loader);
      const double adv = adv_evaluate(net, test_loader, eps, cfg.adv.clip);
      std::cout << "checkpoint: " << checkpoint_path << "\n"
                << "clean test accuracy: " << clean << "\n"
                << "FGSM(eps=" << eps << ") test accuracy: " << adv << "\n";
      return 0;
    }

    if (report_cmd->parsed()) {
      std::vector<RunReport> reports = collect_reports(cfg.out_dir);
      write_tables(cfg.out_dir, reports);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
